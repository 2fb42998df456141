from .settings_manager import settings

__all__ = ['settings']