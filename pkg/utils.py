import hashlib
import json
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from datetime import datetime, timezone
from pathlib import Path

logger = logging.getLogger(__name__)

THREADS_ENV_VAR = "NUDGE_ENGINE_THREADS"


class NudgeEngineError(Exception):
    """Base class of every error raised by the engine's modules."""
    pass


def thread_count() -> int:
    """Number of worker threads, capped by NUDGE_ENGINE_THREADS when set."""
    default = os.cpu_count() or 1
    raw = os.environ.get(THREADS_ENV_VAR)
    if raw is None:
        return default
    try:
        return max(1, int(raw))
    except ValueError:
        logger.warning("Ignoring non-integer %s=%r", THREADS_ENV_VAR, raw)
        return default


def divide_work(items: list, num_workers: int) -> list:
    """Divide items among workers as contiguous ranges."""
    n = len(items)
    num_workers = max(1, min(num_workers, n)) if n else 1
    chunk_size = n // num_workers
    remainder = n % num_workers

    chunks = []
    start = 0
    for i in range(num_workers):
        # Distribute remainder across first few workers
        size = chunk_size + (1 if i < remainder else 0)
        chunks.append(items[start:start + size])
        start += size

    return chunks


def parallel_map(fn, items: list) -> list:
    """Apply fn to every item with a thread pool; output order follows input order."""
    workers = thread_count()
    if workers == 1 or len(items) < 2:
        return [fn(item) for item in items]
    chunks = divide_work(list(items), workers)
    with ThreadPoolExecutor(max_workers=len(chunks)) as pool:
        results = pool.map(lambda chunk: [fn(item) for item in chunk], chunks)
    return [value for chunk in results for value in chunk]


def stable_hash(*parts) -> int:
    """64-bit integer from sha256 over the '|'-joined parts; stable across runs and platforms."""
    digest = hashlib.sha256("|".join(str(p) for p in parts).encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big")


def file_checksum(path) -> str:
    sha = hashlib.sha256()
    with open(path, "rb") as file:
        for block in iter(lambda: file.read(1 << 20), b""):
            sha.update(block)
    return sha.hexdigest()


def to_json(obj, filename) -> None:
    # Save a plain JSON document
    with open(filename, "w") as file:
        json.dump(obj, file, indent=4, sort_keys=True)


def read_lines(path) -> list:
    """Non-empty, stripped lines of a plain text file (e.g. a stock list)."""
    with open(path, "r") as file:
        return [line.strip() for line in file if line.strip()]


def utc_now() -> datetime:
    return datetime.now(timezone.utc).replace(microsecond=0)


def resolve_path(path, base_dir) -> Path:
    path = Path(path)
    return path if path.is_absolute() else Path(base_dir) / path
