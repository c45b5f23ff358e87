import logging
import os
from functools import lru_cache
from pathlib import Path

ROOT = Path(__file__).resolve().parent.parent
SCENARIO_DIR = ROOT / "data" / "scenarios"

# exact-geometry predicates
EPS_GEOM = 1e-9
# strict separation margin required of hyperplanes and planned constraints
EPS_SEP = 1e-6
# state/input bound slack during playback
EPS_DYN = 1e-6
# dynamic-consistency defect allowed between consecutive knots
EPS_DC = 1e-4

# virtual-time lattice (seconds per tick)
TICK = 1e-6
TICKS_PER_SECOND = 1_000_000

D_ARR = 0.05
V_ARR = 0.02
DT_CHECK = 0.01

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s - %(message)s"


@lru_cache(maxsize=1)
def load_env() -> None:
    env_path = ROOT / ".env"
    if env_path.exists():
        try:
            from dotenv import load_dotenv

            load_dotenv(env_path)
        except Exception:
            pass


def get_env(name: str, default: str | None = None) -> str | None:
    load_env()
    return os.getenv(name, default)


def get_env_int(name: str, default: int) -> int:
    raw = get_env(name)
    if raw is None or raw.strip() == "":
        return default
    try:
        return int(raw)
    except ValueError:
        logging.getLogger(__name__).warning("Ignoring non-integer %s=%r", name, raw)
        return default


def to_ticks(seconds: float) -> int:
    return int(round(seconds * TICKS_PER_SECOND))


def to_seconds(ticks: int) -> float:
    return ticks / TICKS_PER_SECOND


def snap(seconds: float) -> float:
    """Round a time onto the virtual-time lattice."""
    return to_seconds(to_ticks(seconds))


def configure_logging(level: str | None = None) -> None:
    logging.basicConfig(
        level=(level or get_env("ASTA_LOG_LEVEL", "INFO")).upper(),
        format=LOG_FORMAT,
    )
