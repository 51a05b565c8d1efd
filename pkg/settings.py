"""Runtime settings read from the environment (and an optional .env file)."""

import os
import threading

import psutil
from dotenv import load_dotenv
from tqdm import tqdm

load_dotenv()


def _flag(name: str, default: str = "0") -> bool:
    return os.environ.get(name, default).lower() in {"1", "true", "yes"}


# --------------------------
# CONFIG
# --------------------------
THREADS = max(1, int(os.environ.get("HANDCRAFT_THREADS", psutil.cpu_count(logical=False) or 1)))
QUIET = _flag("HANDCRAFT_QUIET")
LOG_DIR = os.environ.get("HANDCRAFT_LOG_DIR", "./runs")
DEFAULT_SEED = int(os.environ.get("HANDCRAFT_DEFAULT_SEED", "0"))


print_lock = threading.Lock()


def log(message: str) -> None:
    """Thread-safe progress message that does not tear tqdm bars."""
    if QUIET:
        return
    with print_lock:
        tqdm.write(message)


def progress(iterable, **kwargs):
    return tqdm(iterable, disable=QUIET, leave=False, **kwargs)
