"""Joint-band x time-window maps of MaxSim evidence.

Each token credits only its winning patch with its (non-negative part of)
best similarity, so the grid total equals the sum of clipped token maxima and
the map is as sparse as the token count.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from ._io import write_atomic
from .errors import DataError, LimoError
from .late_interaction import argmax_assignment
from .motion_image import BASE_LAYOUT, FeatureLayout, frame_indices, patch_cell, save_grayscale


@dataclass(frozen=True)
class Attribution:
    token: str
    patch: int
    similarity: float

    @property
    def cell(self) -> tuple[int, int]:
        return patch_cell(self.patch)


@dataclass(frozen=True)
class InteractionMap:
    grid: np.ndarray  # (joint bands, time windows), non-negative
    attributions: tuple[Attribution, ...]

    @property
    def argmax_row(self) -> int:
        """Joint band with the largest total activation (lowest index on ties)."""
        return int(np.argmax(self.grid.sum(axis=1)))

    @property
    def argmax_cell(self) -> tuple[int, int]:
        k, w = np.unravel_index(int(np.argmax(self.grid)), self.grid.shape)
        return int(k), int(w)


def compute_map(
    S: np.ndarray, tokens: Sequence[str] | None = None, layout: FeatureLayout = BASE_LAYOUT
) -> InteractionMap:
    """Winner-credited, negatively clipped aggregation of an (M, 196) interaction matrix."""
    S = np.asarray(S, dtype=float)
    if S.ndim != 2 or S.shape[1] != layout.n_patches or S.shape[0] < 1:
        raise DataError(f"interaction matrix shape {S.shape} does not match a {layout.grid}x{layout.grid} patch grid")
    tokens = list(tokens) if tokens is not None else [str(i) for i in range(S.shape[0])]
    if len(tokens) != S.shape[0]:
        raise DataError("token list length does not match the interaction matrix")
    win = argmax_assignment(S)
    best = S[np.arange(S.shape[0]), win]
    flat = np.zeros(layout.n_patches)
    np.add.at(flat, win, np.maximum(best, 0.0))
    attributions = tuple(Attribution(t, int(j), float(s)) for t, j, s in zip(tokens, win, best))
    return InteractionMap(flat.reshape(layout.grid, layout.grid), attributions)


def token_heatmaps(S: np.ndarray, layout: FeatureLayout = BASE_LAYOUT) -> np.ndarray:
    """Unaggregated per-token maps, (M, grid, grid)."""
    S = np.asarray(S, dtype=float)
    return S.reshape(S.shape[0], layout.grid, layout.grid)


def frame_ranges(n_frames: int, layout: FeatureLayout = BASE_LAYOUT) -> list[list[int] | None]:
    """Source-frame span [first, last] covered by each time window; None for padding."""
    idx = frame_indices(n_frames, layout.width)
    out = []
    for w in range(layout.grid):
        cols = idx[w * layout.d_part : (w + 1) * layout.d_part]
        out.append([int(cols[0]), int(cols[-1])] if cols.size else None)
    return out


def map_to_csv(grid: np.ndarray) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    for row in np.asarray(grid):
        writer.writerow([repr(float(x)) for x in row])
    return buf.getvalue()


def map_from_csv(text: str) -> np.ndarray:
    rows = [[float(x) for x in line] for line in csv.reader(io.StringIO(text)) if line]
    return np.array(rows)


def export_map(
    imap: InteractionMap,
    path: str | Path,
    fmt: str | None = None,
    joint_names: Sequence[str] | None = None,
    n_frames: int | None = None,
) -> Path:
    """Write the grid as CSV (raw values) or an 8-bit PGM/PNG plus a JSON sidecar."""
    path = Path(path)
    fmt = (fmt or path.suffix.lstrip(".")).lower()
    try:
        if fmt == "csv":
            write_atomic(path, map_to_csv(imap.grid))
        elif fmt in ("pgm", "png"):
            save_grayscale(path, imap.grid, fmt)
        else:
            raise DataError(f"unsupported map format {fmt!r}")
        sidecar = {
            "rows": list(joint_names) if joint_names else [f"band{k}" for k in range(imap.grid.shape[0])],
            "frame_ranges": frame_ranges(n_frames) if n_frames else None,
            "attributions": [
                {"token": a.token, "patch": a.patch, "cell": list(a.cell), "similarity": a.similarity}
                for a in imap.attributions
            ],
        }
        write_atomic(path.with_name(path.name + ".json"), json.dumps(sidecar, indent=1))
    except OSError as exc:
        raise LimoError(f"cannot write {path}: {exc}") from exc
    return path
