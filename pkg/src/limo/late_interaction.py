"""Token-patch interaction matrices and MaxSim scoring (text queries motion).

Rows are L2-normalised and, by default, snapped to a 2**-24 grid. On that
grid every product of two entries is a multiple of 2**-48 and every partial
dot product of two unit vectors stays below 2 in magnitude, so float64
accumulation is exact in any order: a BLAS matmul, a sharded computation and
a scalar loop all produce bit-identical similarities. Snapped values are also
exactly representable in float32, which is how galleries are stored.
The snap perturbs a cosine by at most a few 1e-7; pass ``exact=False`` for
the smooth (differentiable) cosine used during training.

Only the text-to-motion direction exists: each token takes its maximum over
patches and the maxima are averaged. Motion-to-text retrieval reads the
transpose of the same batch matrix.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .errors import DataError, DegenerateEmbeddingError

NORM_FLOOR = 1e-12
GRID = 2.0**24


def unit_rows(x: np.ndarray, exact: bool = True, what: str = "embedding") -> np.ndarray:
    """L2-normalise rows of ``x``; raise on rows with norm <= 1e-12."""
    x = np.asarray(x, dtype=float)
    norms = np.linalg.norm(x, axis=-1, keepdims=True)
    bad = norms[..., 0] <= NORM_FLOOR
    if np.any(bad):
        rows = np.argwhere(bad).tolist()
        raise DegenerateEmbeddingError(f"{what}: zero-norm rows at {rows[:5]}")
    u = x / norms
    if exact:
        u = np.round(u * GRID) / GRID
    return u


def interaction_matrix(L: np.ndarray, V: np.ndarray, exact: bool = True) -> np.ndarray:
    """(M, N) cosine similarities between token rows ``L`` and patch rows ``V``."""
    L = np.atleast_2d(L)
    V = np.atleast_2d(V)
    if L.shape[-1] != V.shape[-1]:
        raise DataError(f"embedding widths differ: {L.shape[-1]} vs {V.shape[-1]}")
    return unit_rows(L, exact, "token") @ unit_rows(V, exact, "patch").T


def maxsim_score(S: np.ndarray) -> float:
    """Mean over tokens of the best patch similarity."""
    S = np.asarray(S, dtype=float)
    if S.ndim != 2 or 0 in S.shape:
        raise DataError(f"interaction matrix must be non-empty 2-D, got {S.shape}")
    return float(S.max(axis=1).sum() / S.shape[0])


def argmax_assignment(S: np.ndarray) -> np.ndarray:
    """Winning patch per token; ties go to the smallest patch index."""
    return np.argmax(np.asarray(S), axis=-1)


def batch_scores(
    texts: Sequence[np.ndarray],
    motions: Sequence[np.ndarray] | np.ndarray,
    exact: bool = True,
) -> np.ndarray:
    """Score matrix with entry (i, j) = MaxSim(text_i, motion_j).

    Every entry equals ``maxsim_score(interaction_matrix(texts[i], motions[j]))``
    bit for bit when ``exact`` is set.
    """
    if len(texts) == 0 or len(motions) == 0:
        raise DataError("empty batch")
    motion_units = []
    for j, m in enumerate(motions):
        if np.atleast_2d(m).shape[0] == 0:
            raise DataError(f"motion {j}: no patch rows")
        try:
            motion_units.append(unit_rows(m, exact, "patch"))
        except DegenerateEmbeddingError as exc:
            raise DegenerateEmbeddingError(f"motion {j}: {exc}") from None
    counts = [u.shape[0] for u in motion_units]
    flat = np.concatenate(motion_units, axis=0)
    bounds = np.concatenate([[0], np.cumsum(counts)])
    out = np.empty((len(texts), len(motion_units)))
    for i, t in enumerate(texts):
        try:
            lu = unit_rows(t, exact, "token")
        except DegenerateEmbeddingError as exc:
            raise DegenerateEmbeddingError(f"text {i}: {exc}") from None
        if lu.shape[-1] != flat.shape[-1]:
            raise DataError(f"text {i}: embedding width {lu.shape[-1]} != {flat.shape[-1]}")
        sims = lu @ flat.T
        best = np.maximum.reduceat(sims, bounds[:-1], axis=1)
        out[i] = best.sum(axis=0) / lu.shape[0]
    return out


def save_scores_csv(path, scores: np.ndarray, row_ids=None, col_ids=None) -> None:
    """Dump a score matrix for debugging; first row/column hold ids."""
    from ._io import write_atomic

    scores = np.asarray(scores)
    row_ids = list(range(scores.shape[0])) if row_ids is None else list(row_ids)
    col_ids = list(range(scores.shape[1])) if col_ids is None else list(col_ids)
    lines = ["," + ",".join(str(c) for c in col_ids)]
    for rid, row in zip(row_ids, scores):
        lines.append(str(rid) + "," + ",".join(repr(float(x)) for x in row))
    write_atomic(path, "\n".join(lines) + "\n")
