import os
import json
import copy
from pathlib import Path

from dotenv import load_dotenv

DEFAULT_CONFIG = {
    "suite": {
        "config_path": "config/suite.json"
    },
    "model": {
        "latent_dim": 32,
        "hidden_dim": 32,
        "action_dim": 4,
        "attenuator_hidden": 16,
        "encoder": {
            "channels": [16, 32, 32, 32],
            "kernel_size": 3,
            "stride": 2,
            "image_size": [84, 84, 3]
        }
    },
    "planner": {
        "horizon": 5,
        "inner_updates": 1,
        "step_size": 0.1,
        "huber_delta": 1.0,
        "init": "zeros"
    },
    "training": {
        "epochs": 50,
        "batch_size": 32,
        "learning_rate": 1e-3,
        "second_order": True,
        "seed": 0,
        "goal_alignment_weight": 1.0
    },
    "evaluation": {
        "trials": 20,
        "base_seed": 1000,
        "workers": 1
    },
    "dataset": {
        "demos_per_task": 100,
        "data_dir": "data/demos",
        "max_demo_retries": 20
    },
    "extrapolation": {
        "trajectories": 21,
        "grid": "H=3,5,8;U=1,2,5",
        "z_offsets": [-0.15, 0.15],
        "test_goals": 10,
        "epochs": 50
    },
    "logging": {
        "level": "INFO",
        "file": "data/logs/cpn.log"
    }
}


class Settings:
    def __init__(self, config_path=None):
        self.base_dir = Path(__file__).parent.parent
        load_dotenv(self.base_dir / ".env")
        self.config_path = Path(config_path) if config_path else self.base_dir / "config" / "settings.json"
        self._load_config()

    def _load_config(self):
        """Load configuration from JSON file"""
        if self.config_path.exists():
            with open(self.config_path, 'r', encoding='utf-8') as f:
                self._config = json.load(f)
        else:
            self._create_default_config()

    def _create_default_config(self):
        """Create default configuration file"""
        self._config = copy.deepcopy(DEFAULT_CONFIG)
        self.save_config()

    def save_config(self):
        """Save configuration to file"""
        self.config_path.parent.mkdir(parents=True, exist_ok=True)
        with open(self.config_path, 'w', encoding='utf-8') as f:
            json.dump(self._config, f, indent=2, ensure_ascii=False)

    def get(self, key, default=None):
        """Get configuration value using dot notation, falling back to built-in defaults"""
        for source in (self._config, DEFAULT_CONFIG):
            value = source
            for k in key.split('.'):
                if isinstance(value, dict) and k in value:
                    value = value[k]
                else:
                    value = None
                    break
            if value is not None:
                return value
        return default

    def set(self, key, value, persist=False):
        """Set configuration value using dot notation"""
        keys = key.split('.')
        config = self._config

        for k in keys[:-1]:
            if k not in config:
                config[k] = {}
            config = config[k]

        config[keys[-1]] = value
        if persist:
            self.save_config()

    def resolve_path(self, relative):
        """Resolve a repo-relative path from the config"""
        path = Path(relative)
        return path if path.is_absolute() else self.base_dir / path

    @property
    def DATA_DIR(self):
        return self.resolve_path(os.getenv('CPN_DATA_DIR', self.get('dataset.data_dir')))

    @property
    def CONFIG_DIR(self):
        return self.base_dir / "config"

    @property
    def SUITE_CONFIG_PATH(self):
        return self.resolve_path(self.get('suite.config_path'))

    @property
    def METHODS_CONFIG_PATH(self):
        return self.CONFIG_DIR / "methods.json"

    @property
    def LOG_FILE(self):
        return self.resolve_path(self.get('logging.file'))

    @property
    def LOG_LEVEL(self):
        return os.getenv('CPN_LOG_LEVEL', self.get('logging.level', 'INFO'))

    @property
    def WORKERS(self):
        return int(os.getenv('CPN_WORKERS', self.get('evaluation.workers', 1)))

    # Protocol constants
    @property
    def DEMOS_PER_TASK(self):
        return self.get('dataset.demos_per_task', 100)

    @property
    def EPOCHS(self):
        return self.get('training.epochs', 50)

    @property
    def TRIALS(self):
        return self.get('evaluation.trials', 20)

    @property
    def HORIZON(self):
        return self.get('planner.horizon', 5)

    @property
    def INNER_UPDATES(self):
        return self.get('planner.inner_updates', 1)

    @property
    def ACTION_DIM(self):
        return self.get('model.action_dim', 4)

    @property
    def HIDDEN_DIM(self):
        return self.get('model.hidden_dim', 32)

    @property
    def LATENT_DIM(self):
        return self.get('model.latent_dim', 32)

    @property
    def IMAGE_SIZE(self):
        return tuple(self.get('model.encoder.image_size', [84, 84, 3]))


# Global settings instance
settings = Settings()
