import logging
import sys
from pathlib import Path

_CONFIGURED = False


def setup_logging(level=None, log_file=None):
    """Setup logging configuration"""
    global _CONFIGURED
    from config import settings

    level = level or settings.LOG_LEVEL
    log_file = Path(log_file) if log_file else settings.LOG_FILE

    if not _CONFIGURED:
        log_file.parent.mkdir(parents=True, exist_ok=True)
        logging.basicConfig(
            level=getattr(logging, str(level).upper(), logging.INFO),
            format='%(asctime)s - %(name)s - %(levelname)s - %(message)s',
            handlers=[
                logging.FileHandler(log_file, encoding='utf-8'),
                logging.StreamHandler(sys.stdout)
            ]
        )
        _CONFIGURED = True

    return logging.getLogger("CPN")
