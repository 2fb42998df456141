import copy
import json
import logging
from pathlib import Path
from typing import Any, Dict, List, Optional

from config.settings_manager import settings
from src.core.models import LADDER, Method, MethodConfig
from src.core.planner import PlannerConfig

PLANNER_KEYS = ("horizon", "inner_updates", "step_size", "huber_delta", "init", "open_loop")
MODEL_KEYS = ("latent_dim", "hidden_dim", "action_dim", "attenuator_hidden", "second_order", "goal_mode")

DEFAULT_METHODS = {
    "bc": {"enabled": True, "settings": {}},
    "tebc": {"enabled": True, "settings": {}},
    "upn": {"enabled": True, "settings": {"horizon": 5, "inner_updates": 1, "step_size": 0.1}},
    "cpn": {"enabled": True, "settings": {"horizon": 5, "inner_updates": 1, "step_size": 0.1, "second_order": True}},
}


class MethodRegistry:
    """Manages which ladder methods run and their per-method overrides"""

    def __init__(self, config_path: Optional[Path] = None, app_settings=None):
        self.logger = logging.getLogger(__name__)
        self.settings = app_settings or settings
        self.config_path = Path(config_path) if config_path else Path(self.settings.METHODS_CONFIG_PATH)
        self.method_configs: Dict[str, Any] = {}
        self.enabled_methods: List[str] = []

    async def load_config(self) -> bool:
        """Load method configuration from file"""
        try:
            if self.config_path.exists():
                with open(self.config_path, 'r', encoding='utf-8') as f:
                    config_data = json.load(f)
                self.method_configs = config_data.get('methods', {})
                self.enabled_methods = [Method.parse(name).value for name in config_data.get('enabled_methods', [])]
                self.logger.info(f"✅ Loaded method config: {len(self.method_configs)} methods configured")
            else:
                await self._create_default_config()
            return True
        except Exception as e:
            self.logger.error(f"❌ Error loading method config: {e}")
            self._use_defaults()
            return False

    def _use_defaults(self) -> None:
        self.method_configs = copy.deepcopy(DEFAULT_METHODS)
        self.enabled_methods = [method.value for method in LADDER]

    async def _create_default_config(self) -> None:
        self._use_defaults()
        await self.save_config()
        self.logger.info("✅ Created default method configuration")

    async def save_config(self) -> bool:
        try:
            config_data = {
                'methods': self.method_configs,
                'enabled_methods': self.enabled_methods
            }
            self.config_path.parent.mkdir(parents=True, exist_ok=True)
            with open(self.config_path, 'w', encoding='utf-8') as f:
                json.dump(config_data, f, indent=2, ensure_ascii=False)
            self.logger.info(f"✅ Saved method config to {self.config_path}")
            return True
        except Exception as e:
            self.logger.error(f"❌ Error saving method config: {e}")
            return False

    def get_method_settings(self, name) -> Dict[str, Any]:
        key = Method.parse(name).value
        return self.method_configs.get(key, {"enabled": False, "settings": {}}).get("settings", {})

    def update_method_settings(self, name, values: Dict[str, Any]) -> bool:
        key = Method.parse(name).value
        if key in self.method_configs:
            self.method_configs[key].setdefault("settings", {}).update(values)
            self.logger.info(f"✅ Updated settings for method: {key}")
            return True
        self.logger.warning(f"❌ Cannot update settings: method {key} not configured")
        return False

    def is_enabled(self, name) -> bool:
        return Method.parse(name).value in self.enabled_methods

    def enable_method(self, name) -> bool:
        key = Method.parse(name).value
        if key in self.method_configs and key not in self.enabled_methods:
            self.enabled_methods.append(key)
            self.method_configs[key]['enabled'] = True
            self.logger.info(f"✅ Enabled method: {key}")
            return True
        self.logger.warning(f"❌ Cannot enable method: {key} not configured or already enabled")
        return False

    def disable_method(self, name) -> bool:
        key = Method.parse(name).value
        if key in self.enabled_methods:
            self.enabled_methods.remove(key)
            if key in self.method_configs:
                self.method_configs[key]['enabled'] = False
            self.logger.info(f"✅ Disabled method: {key}")
            return True
        self.logger.warning(f"❌ Cannot disable method: {key} not enabled")
        return False

    def get_enabled_methods(self) -> List[Method]:
        """Enabled methods in ladder order"""
        return [method for method in LADDER if method.value in self.enabled_methods]

    def method_config(self, name, **overrides) -> MethodConfig:
        values = {k: v for k, v in self.get_method_settings(name).items() if k in MODEL_KEYS + PLANNER_KEYS[:3]}
        values.update({k: v for k, v in overrides.items() if v is not None})
        return MethodConfig.from_settings(name, self.settings, **values)

    def planner_config(self, name, **overrides) -> Optional[PlannerConfig]:
        method = Method.parse(name)
        if not method.planning:
            return None
        values = {k: v for k, v in self.get_method_settings(method).items() if k in PLANNER_KEYS}
        values.update({k: v for k, v in overrides.items() if v is not None})
        return PlannerConfig.from_settings(self.settings, **values)
