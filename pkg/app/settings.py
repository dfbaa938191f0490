import logging
import os
import sys
from typing import List, Optional

from dotenv import load_dotenv

# Load environment variables only once at import time
if not os.getenv("NAIM_CHECKPOINT") and not os.getenv("MASTER_API_KEY"):
    load_dotenv()

LOG_FORMAT = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"


def is_production() -> bool:
    return bool(os.getenv("PRODUCTION"))


def configure_logging(debug: Optional[bool] = None) -> None:
    """Configure root logging: stdout always, a log file only when LOG_TO_FILE=true.

    ``debug=None`` logs DEBUG outside production and INFO in production.
    """
    handlers: List[logging.Handler] = [logging.StreamHandler(sys.stdout)]

    if os.getenv("LOG_TO_FILE", "false").lower() == "true" and not is_production():
        try:
            handlers.append(logging.FileHandler("naim.log"))
        except OSError as e:
            print(f"Warning: Could not create log file: {e}")

    if debug is None:
        debug = not is_production()
    level = logging.DEBUG if debug else logging.INFO

    logging.basicConfig(level=level, format=LOG_FORMAT, handlers=handlers, force=True)


def checkpoint_path() -> Optional[str]:
    return os.getenv("NAIM_CHECKPOINT")


def master_api_key() -> Optional[str]:
    return os.getenv("MASTER_API_KEY")


def default_jobs() -> int:
    try:
        return max(1, int(os.getenv("NAIM_JOBS", "1")))
    except ValueError:
        return 1


def allowed_origins() -> List[str]:
    origins = ["*"]
    if is_production():
        origins = []
        if os.getenv("ALLOWED_ORIGINS"):
            origins.extend(os.getenv("ALLOWED_ORIGINS").split(","))
    return origins
