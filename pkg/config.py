import os
from dotenv import load_dotenv

load_dotenv()

TOOLKIT_VERSION = "0.3.0"

LOG_LEVEL = os.getenv("WEIGHTDYN_LOG_LEVEL", "INFO").upper()


def _int_env(name: str, default: int, minimum: int) -> int:
    raw = os.getenv(name)
    if raw is None or raw.strip() == "":
        return default
    try:
        value = int(raw)
    except ValueError:
        raise ValueError(f"{name} must be an integer, got {raw!r}")
    if value < minimum:
        raise ValueError(f"{name} must be >= {minimum}, got {value}")
    return value


WORKERS = _int_env("WEIGHTDYN_WORKERS", 1, 1)
DEFAULT_SEED = _int_env("WEIGHTDYN_SEED", 0, 0)
CHUNK_SIZE = _int_env("WEIGHTDYN_CHUNK_SIZE", 65536, 1)

if LOG_LEVEL not in {"DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL"}:
    raise ValueError(f"WEIGHTDYN_LOG_LEVEL not understood: {LOG_LEVEL}")
