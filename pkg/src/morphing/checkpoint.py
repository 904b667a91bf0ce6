from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from loguru import logger

from src.mesh.io import FLOAT_FORMAT, LineReader
from src.morphing.optimizer import ContinuationState
from src.schemas.run_config import RunConfig, parse_run_config

CHECKPOINT_HEADER = "MORPHCKPT v1"
FINAL_CHECKPOINT = "morphings.ckpt"


@dataclass(frozen=True)
class Checkpoint:
    """Optimizer state after ``iteration`` accepted iterations."""

    iteration: int
    continuation: ContinuationState
    config: RunConfig
    displacements: np.ndarray

    @property
    def size(self) -> int:
        return len(self.displacements)


def checkpoint_name(iteration: int) -> str:
    return f"checkpoint_{iteration:05d}.ckpt"


def write_checkpoint(path: str | Path, checkpoint: Checkpoint) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    displacements = np.asarray(checkpoint.displacements, dtype=np.float64)
    n, nodes, _ = displacements.shape
    continuation = checkpoint.continuation
    tmp = path.with_suffix(path.suffix + ".tmp")
    with tmp.open("w", encoding="utf-8") as handle:
        handle.write(f"{CHECKPOINT_HEADER}\n")
        handle.write(f"iteration {checkpoint.iteration}\n")
        handle.write(f"c1 {continuation.c1:.17g}\n")
        handle.write(f"c2 {continuation.c2:.17g}\n")
        handle.write(f"next_event {continuation.next_event}\n")
        handle.write(f"c1_exhausted {int(continuation.c1_exhausted)}\n")
        handle.write(f"since_event {continuation.since_event}\n")
        handle.write(f"config {checkpoint.config.canonical_json()}\n")
        handle.write(f"morphings {n} nodes {nodes}\n")
        np.savetxt(handle, displacements.reshape(-1, 2), fmt=FLOAT_FORMAT)
    tmp.replace(path)
    logger.debug("Wrote checkpoint {} at iteration {}", path, checkpoint.iteration)
    return path


def read_checkpoint(path: str | Path) -> Checkpoint:
    path = Path(path)
    with path.open("r", encoding="utf-8") as handle:
        reader = LineReader(path, handle, comments=False)
        header = reader.next("header")
        if header != CHECKPOINT_HEADER:
            raise reader.error(f"expected header '{CHECKPOINT_HEADER}', found '{header}'")
        iteration = reader.count("iteration")

        def real(keyword: str) -> float:
            tokens = reader.keyword(keyword)
            try:
                return float(tokens[0])
            except (IndexError, ValueError) as exc:
                raise reader.error(f"'{keyword}' needs a real value") from exc

        c1 = real("c1")
        c2 = real("c2")
        next_event = reader.keyword("next_event")
        if next_event not in (["c1"], ["c2"]):
            raise reader.error(f"next_event must be c1 or c2, found {' '.join(next_event)!r}")
        exhausted = reader.count("c1_exhausted")
        since_event = reader.count("since_event")
        line = reader.next("config")
        if not line.startswith("config "):
            raise reader.error("expected 'config <json>'")
        config = parse_run_config(line[len("config ") :], source=f"{path}:{reader.line}")
        tokens = reader.keyword("morphings")
        try:
            n, nodes = int(tokens[0]), int(tokens[2])
        except (IndexError, ValueError) as exc:
            raise reader.error("expected 'morphings <n> nodes <N>'") from exc
        values = reader.rows(n * nodes, 2, float, "displacement")
    continuation = ContinuationState(
        c1=c1,
        c2=math.inf if math.isinf(c2) else c2,
        next_event=next_event[0],
        c1_exhausted=bool(exhausted),
        since_event=since_event,
    )
    return Checkpoint(
        iteration=iteration, continuation=continuation, config=config, displacements=values.reshape(n, nodes, 2)
    )


def latest_checkpoint(directory: str | Path) -> Path | None:
    candidates = sorted(Path(directory).glob("checkpoint_*.ckpt"))
    return candidates[-1] if candidates else None
