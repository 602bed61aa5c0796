import csv
import io
import json
import logging
import time
from contextlib import contextmanager
from pathlib import Path
from typing import Any, Iterable, Iterator

from src.nn.checkpoint import atomic_write_bytes, file_sha256

logger = logging.getLogger(__name__)

TRACE_HEADER = ("batch", "iter", "loss")


def write_text(path: Path | str, text: str) -> Path:
    return atomic_write_bytes(path, text.encode("utf-8"))


def write_json(path: Path | str, data: Any) -> Path:
    path = write_text(path, json.dumps(data, indent=2, sort_keys=True) + "\n")
    logger.info(f"Wrote {path}")
    return path


def write_csv(path: Path | str, header: Iterable[str], rows: Iterable[Iterable[Any]]) -> Path:
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(list(header))
    for row in rows:
        writer.writerow([repr(v) if isinstance(v, float) else v for v in row])
    path = write_text(path, buffer.getvalue())
    logger.info(f"Wrote {path}")
    return path


def write_trace_csv(path: Path | str, rows: Iterable[tuple[int, int, float]]) -> Path:
    return write_csv(path, TRACE_HEADER, rows)


def read_trace_csv(path: Path | str) -> list[tuple[int, int, float]]:
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.DictReader(f)
        return [(int(r["batch"]), int(r["iter"]), float(r["loss"])) for r in reader]


def hash_artifacts(paths: Iterable[Path | str]) -> dict[str, str]:
    return {str(p): file_sha256(p) for p in paths}


class PhaseTimer:
    """Wall-clock seconds per named phase."""

    def __init__(self):
        self.phases: dict[str, float] = {}
        
    @contextmanager
    def phase(self, name: str) -> Iterator[None]:
        start = time.perf_counter()
        try:
            yield
        finally:
            self.phases[name] = self.phases.get(name, 0.0) + time.perf_counter() - start
