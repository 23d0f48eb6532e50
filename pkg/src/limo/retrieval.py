"""Multi-vector galleries with exact, product-quantised and binary MaxSim search.

A gallery holds one matrix of L2-normalised rows per item: motion patches for
text-to-motion search, caption tokens for motion-to-text search. Scores are
always MaxSim with the text on the token side, so both directions read the
same quantity.
"""

from __future__ import annotations

import math
import struct
import time
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from ._io import atomic_open, check_magic, unpack_from
from .errors import DataError, FormatError
from .late_interaction import batch_scores, unit_rows

LIIX_MAGIC = b"LIIX"
LIPQ_MAGIC = b"LIPQ"
LIIX_VERSION = 1
MODES = ("float32", "pq", "binary")
DIRECTIONS = ("t2m", "m2t")
K_LIST = (1, 2, 3, 5, 10)
CHUNK_ROWS = 8192


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


# -- codebooks ---------------------------------------------------------------------


@dataclass(frozen=True)
class PQCodebook:
    centroids: np.ndarray  # (m, k, d/m)
    seed: int
    iterations: int
    sse_history: tuple[float, ...] = ()

    def __post_init__(self):
        if self.centroids.ndim != 3 or not np.all(np.isfinite(self.centroids)):
            raise DataError("codebook centroids must be a finite (m, k, sub) array")
        if self.k > 256:
            raise DataError("codes are 8-bit: at most 256 centroids per subspace")

    @property
    def m(self) -> int:
        return self.centroids.shape[0]

    @property
    def k(self) -> int:
        return self.centroids.shape[1]

    @property
    def sub(self) -> int:
        return self.centroids.shape[2]

    @property
    def d(self) -> int:
        return self.m * self.sub

    @property
    def nbytes(self) -> int:
        return self.centroids.size * 4

    def encode(self, x: np.ndarray) -> np.ndarray:
        """Nearest-centroid code per subspace, (n, m) uint8."""
        x = np.asarray(x, dtype=float)
        if x.shape[-1] != self.d:
            raise DataError(f"vector width {x.shape[-1]} does not match codebook width {self.d}")
        xs = x.reshape(-1, self.m, self.sub)
        codes = np.empty((xs.shape[0], self.m), dtype=np.uint8)
        for s in range(self.m):
            codes[:, s] = _assign(np.ascontiguousarray(xs[:, s]), self.centroids[s])[0]
        return codes

    def decode(self, codes: np.ndarray) -> np.ndarray:
        codes = np.asarray(codes)
        return self.centroids[np.arange(self.m)[None, :], codes.astype(np.int64)].reshape(codes.shape[0], self.d)

    def tables(self, q: np.ndarray) -> np.ndarray:
        """ADC lookup tables: dot products of query sub-vectors with every centroid, (Q, m, k)."""
        qs = np.asarray(q, dtype=float).reshape(-1, self.m, self.sub)
        return np.einsum("qms,mks->qmk", qs, self.centroids)

    def to_bytes(self) -> bytes:
        head = LIPQ_MAGIC + struct.pack("<IIIIQ", self.m, self.k, self.sub, self.iterations, self.seed)
        return head + np.ascontiguousarray(self.centroids, dtype="<f4").tobytes()

    @classmethod
    def from_bytes(cls, buf: bytes, offset: int = 0) -> tuple["PQCodebook", int]:
        check_magic(buf[offset:], LIPQ_MAGIC, "PQ codebook")
        m, k, sub, iters, seed = unpack_from("<IIIIQ", buf, offset + 4, "PQ codebook")
        start = offset + 28
        n = m * k * sub
        if len(buf) < start + 4 * n:
            raise FormatError("PQ codebook: truncated centroid block")
        cent = np.frombuffer(buf, dtype="<f4", count=n, offset=start).astype(float).reshape(m, k, sub)
        return cls(cent, int(seed), int(iters)), start + 4 * n


def _kmeans_pp(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """k-means++ seeding of one subspace; x is (n, sub)."""
    n = x.shape[0]
    x2 = (x**2).sum(1)
    cent = np.empty((k, x.shape[1]))
    cent[0] = x[rng.integers(n)]
    best = ((x - cent[0]) ** 2).sum(1)
    for c in range(1, k):
        total = best.sum()
        if total > 0:
            pick = min(int(np.searchsorted(np.cumsum(best), rng.random() * total, side="right")), n - 1)
        else:  # all-duplicate subspace: any point is as good as another
            pick = int(rng.integers(n))
        cent[c] = x[pick]
        dist = np.maximum(x2 - 2.0 * (x @ cent[c]) + cent[c] @ cent[c], 0.0)
        np.minimum(best, dist, out=best)
    return cent


def _assign(
    x: np.ndarray, cent: np.ndarray, prev: np.ndarray | None = None, chunk: int = 4096
) -> tuple[np.ndarray, np.ndarray]:
    """Nearest centroid per point of one subspace, x (n, sub), cent (k, sub).

    Candidates come from the expanded form |c|^2 - 2 x.c in float32; the returned
    distances are recomputed directly. A previous label is kept when it is at
    least as close, so a Lloyd assignment step never raises the SSE.
    """
    n = x.shape[0]
    x32 = x.astype(np.float32)
    ct = (-2.0 * cent.T).astype(np.float32)
    c2 = (cent**2).sum(1).astype(np.float32)
    lab = np.empty(n, dtype=np.int64)
    for at in range(0, n, chunk):
        g = x32[at : at + chunk] @ ct
        g += c2
        lab[at : at + chunk] = np.argmin(g, axis=1)
    dist = ((x - cent[lab]) ** 2).sum(1)
    if prev is not None:
        old = ((x - cent[prev]) ** 2).sum(1)
        keep = old <= dist
        lab = np.where(keep, prev, lab)
        dist = np.where(keep, old, dist)
    return lab, dist


def _lloyd(x: np.ndarray, k: int, iterations: int, rng: np.random.Generator) -> tuple[np.ndarray, list[float]]:
    sub = x.shape[1]
    cent = _kmeans_pp(x, k, rng)
    history, lab = [], None
    for _ in range(iterations):
        lab, dist = _assign(x, cent, lab)
        history.append(float(dist.sum()))
        counts = np.bincount(lab, minlength=k)
        sums = np.zeros((k, sub))
        np.add.at(sums, lab, x)
        filled = counts > 0
        cent[filled] = sums[filled] / counts[filled, None]
        empty = np.flatnonzero(~filled)
        if empty.size:
            far = np.argsort(-dist, kind="stable")[: empty.size]
            cent[empty] = x[far]
    return cent, history


def kmeans(
    x: np.ndarray, k: int, iterations: int = 25, seed: int = 0
) -> tuple[np.ndarray, list[float]]:
    """Lloyd iterations in every subspace of ``x`` (m, n, sub).

    Returns centroids (m, k, sub) and the total within-cluster SSE measured
    after each assignment step; the sequence never increases. Empty clusters
    are moved onto the points farthest from their current centroid.
    """
    rng = np.random.default_rng(seed)
    m, _, sub = x.shape
    cent = np.empty((m, k, sub))
    total = np.zeros(iterations)
    for s in range(m):
        cent[s], hist = _lloyd(x[s], k, iterations, rng)
        total += hist
    return cent, [float(v) for v in total]


def train_pq(
    vectors: np.ndarray, m: int = 64, bits: int = 8, iterations: int = 25, seed: int = 0, max_train: int = 8192
) -> PQCodebook:
    """Product-quantisation codebook trained on pooled rows (sub-sampled to ``max_train``)."""
    x = np.asarray(vectors, dtype=float)
    if x.ndim != 2 or x.shape[0] < 1:
        raise DataError("PQ training needs a non-empty (n, d) matrix")
    d = x.shape[1]
    if m < 1 or d % m:
        raise DataError(f"subspace count {m} does not divide the dimension {d}")
    if not 0 <= bits <= 8:
        raise DataError("bits per code must lie in [0, 8]")
    rng = np.random.default_rng(seed)
    if x.shape[0] > max_train:
        x = x[np.sort(rng.choice(x.shape[0], max_train, replace=False))]
    k = 2**bits
    if x.shape[0] < k:
        warnings.warn(f"only {x.shape[0]} training vectors; using {x.shape[0]} centroids instead of {k}")
        k = x.shape[0]
    xs = np.ascontiguousarray(x.reshape(x.shape[0], m, d // m).transpose(1, 0, 2))
    cent, history = kmeans(xs, k, iterations, int(rng.integers(2**63)))
    return PQCodebook(cent, seed, iterations, tuple(history))


@dataclass(frozen=True)
class BinaryCodes:
    bits: np.ndarray  # (n, d/8) packed sign bits, 1 = non-negative after centering
    mean: np.ndarray  # (d,)

    @property
    def d(self) -> int:
        return self.mean.shape[0]

    def signs(self, rows: slice | None = None) -> np.ndarray:
        b = self.bits if rows is None else self.bits[rows]
        return np.unpackbits(b, axis=1, count=self.d).astype(float) * 2.0 - 1.0


def encode_binary_rows(x: np.ndarray, mean: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.shape[1] % 8:
        raise DataError("binary codes need a dimension divisible by 8")
    return np.packbits(x - mean >= 0, axis=1)


# -- gallery -------------------------------------------------------------------------


@dataclass(frozen=True)
class SearchHit:
    id: str
    score: float


@dataclass(frozen=True)
class GalleryIndex:
    """Immutable multi-vector gallery in one storage mode."""

    ids: tuple[str, ...]
    offsets: np.ndarray  # (G+1,) row offsets
    d: int
    mode: str = "float32"
    direction: str = "t2m"
    vectors: np.ndarray | None = None  # float32 mode: (rows, d)
    codes: np.ndarray | None = None  # pq mode: (rows, m) uint8
    codebook: PQCodebook | None = None
    binary: BinaryCodes | None = None

    def __post_init__(self):
        if self.mode not in MODES:
            raise DataError(f"unknown index mode {self.mode!r}")
        if self.direction not in DIRECTIONS:
            raise DataError(f"unknown direction {self.direction!r}")
        if len(self.ids) == 0:
            raise DataError("empty gallery")
        if len(set(self.ids)) != len(self.ids):
            raise DataError("duplicate item ids in gallery")

    @property
    def size(self) -> int:
        return len(self.ids)

    @property
    def n_rows(self) -> int:
        return int(self.offsets[-1])

    @property
    def row_counts(self) -> np.ndarray:
        return np.diff(self.offsets)

    @property
    def payload_bytes(self) -> int:
        return payload_bytes(self.n_rows, self.d, self.mode, self.codebook.m if self.codebook else 64)

    @property
    def side_bytes(self) -> int:
        """Codebook or centering means, stored separately from the payload."""
        if self.mode == "pq":
            return self.codebook.nbytes
        if self.mode == "binary":
            return self.d * 4
        return 0

    def item(self, i: int) -> np.ndarray:
        """Stored (or reconstructed) rows of item ``i``."""
        sl = slice(int(self.offsets[i]), int(self.offsets[i + 1]))
        if self.mode == "float32":
            return self.vectors[sl].astype(float)
        if self.mode == "pq":
            return self.codebook.decode(self.codes[sl])
        return self.binary.signs(sl)

    def _dots(self, q: np.ndarray, rows: slice, tables: np.ndarray | None) -> np.ndarray:
        """(Q, rows) similarity of every query row to every gallery row in ``rows``."""
        if self.mode == "float32":
            return q @ self.vectors[rows].astype(float).T
        if self.mode == "binary":
            return q @ self.binary.signs(rows).T
        # tables arrive as (m, k, Q) so each lookup gathers a contiguous Q-vector
        codes = self.codes[rows]
        out = np.zeros((codes.shape[0], tables.shape[2]))
        for s in range(self.codebook.m):
            out += tables[s][codes[:, s]]
        return out.T

    def scores(self, query: np.ndarray, exact: bool = True) -> np.ndarray:
        """MaxSim of the query against every item, in gallery order."""
        q = unit_rows(np.atleast_2d(query), exact, "query")
        if q.shape[1] != self.d:
            raise DataError(f"query width {q.shape[1]} does not match gallery width {self.d}")
        tables = np.ascontiguousarray(self.codebook.tables(q).transpose(1, 2, 0)) if self.mode == "pq" else None
        out = np.empty(self.size)
        bounds = self.offsets
        # shard over whole items so the per-item reductions never straddle a chunk
        g = 0
        while g < self.size:
            h = g + 1
            while h < self.size and bounds[h + 1] - bounds[g] <= CHUNK_ROWS:
                h += 1
            rows = slice(int(bounds[g]), int(bounds[h]))
            sims = self._dots(q, rows, tables)
            local = bounds[g:h] - bounds[g]
            if self.direction == "t2m":
                best = np.maximum.reduceat(sims, local, axis=1)  # (M, items)
                out[g:h] = best.sum(axis=0) / q.shape[0]
            else:
                best = sims.max(axis=0)  # per gallery token
                out[g:h] = np.add.reduceat(best, local) / np.diff(bounds[g : h + 1])
            g = h
        return out

    def search(self, query: np.ndarray, k: int = 10) -> list[SearchHit]:
        """Top-``k`` items by descending score; ties by ascending id; k > G returns G."""
        s = self.scores(query)
        order = rank_order(s, self.ids)[: max(0, int(k))]
        return [SearchHit(self.ids[i], float(s[i])) for i in order]


def payload_bytes(n_rows: int, d: int = 256, mode: str = "float32", m: int = 64) -> int:
    if mode == "float32":
        return n_rows * d * 4
    if mode == "pq":
        return n_rows * m
    if mode == "binary":
        return n_rows * d // 8
    raise DataError(f"unknown index mode {mode!r}")


def rank_order(scores: np.ndarray, ids: Sequence[str]) -> np.ndarray:
    """Indices sorted by descending score, ties by ascending id."""
    return np.lexsort((np.asarray(ids), -np.asarray(scores)))


def build_index(items: Iterable[tuple[str, np.ndarray]], direction: str = "t2m") -> GalleryIndex:
    """Float32 gallery of snapped unit rows (exact in float32, see ``late_interaction``)."""
    ids, mats = [], []
    for item_id, mat in items:
        mat = np.atleast_2d(np.asarray(mat, dtype=float))
        if mat.shape[0] < 1:
            raise DataError(f"item {item_id!r} has no rows")
        ids.append(str(item_id))
        mats.append(unit_rows(mat, True, f"item {item_id!r}"))
    if not ids:
        raise DataError("empty gallery")
    widths = {m.shape[1] for m in mats}
    if len(widths) != 1:
        raise DataError(f"items have different widths {sorted(widths)}")
    offsets = np.concatenate([[0], np.cumsum([m.shape[0] for m in mats])]).astype(np.int64)
    return GalleryIndex(
        ids=tuple(ids),
        offsets=_frozen(offsets),
        d=widths.pop(),
        direction=direction,
        vectors=_frozen(np.concatenate(mats).astype(np.float32)),
    )


def search_exact(query: np.ndarray, index: GalleryIndex, k: int = 10) -> list[SearchHit]:
    if index.mode != "float32":
        raise DataError("exact search needs a float32 index")
    return index.search(query, k)


def encode_pq(index: GalleryIndex, codebook: PQCodebook) -> GalleryIndex:
    if index.mode != "float32":
        raise DataError("PQ encoding starts from a float32 index")
    if codebook.d != index.d:
        raise DataError(f"codebook width {codebook.d} does not match index width {index.d}")
    return GalleryIndex(
        ids=index.ids, offsets=index.offsets, d=index.d, mode="pq", direction=index.direction,
        codes=_frozen(codebook.encode(index.vectors)), codebook=codebook,
    )


def search_pq(query: np.ndarray, index: GalleryIndex, k: int = 10) -> list[SearchHit]:
    if index.mode != "pq" or index.codebook is None:
        raise DataError("PQ search needs a PQ-encoded index with its codebook")
    return index.search(query, k)


def encode_binary(index: GalleryIndex) -> GalleryIndex:
    if index.mode != "float32":
        raise DataError("binary encoding starts from a float32 index")
    x = index.vectors.astype(float)
    mean = x.mean(axis=0)
    codes = BinaryCodes(_frozen(encode_binary_rows(x, mean)), _frozen(mean))
    return GalleryIndex(
        ids=index.ids, offsets=index.offsets, d=index.d, mode="binary", direction=index.direction, binary=codes,
    )


def search_binary(query: np.ndarray, index: GalleryIndex, k: int = 10) -> list[SearchHit]:
    if index.mode != "binary":
        raise DataError("binary search needs a binary index")
    return index.search(query, k)


def compress(index: GalleryIndex, mode: str, seed: int = 0, m: int = 64, bits: int = 8, iterations: int = 25) -> GalleryIndex:
    if mode == "float32":
        return index
    if mode == "pq":
        return encode_pq(index, train_pq(index.vectors, m, bits, iterations, seed))
    if mode == "binary":
        return encode_binary(index)
    raise DataError(f"unknown index mode {mode!r}")


# -- persistence -----------------------------------------------------------------------


def index_to_bytes(index: GalleryIndex) -> bytes:
    out = [LIIX_MAGIC, struct.pack("<IBII", LIIX_VERSION, MODES.index(index.mode), index.size, index.d)]
    out.append(struct.pack("<B", DIRECTIONS.index(index.direction)))
    for i in index.ids:
        raw = i.encode("utf-8")
        out.append(struct.pack("<H", len(raw)) + raw)
    out.append(np.asarray(index.row_counts, dtype="<u4").tobytes())
    if index.mode == "float32":
        out.append(np.ascontiguousarray(index.vectors, dtype="<f4").tobytes())
    elif index.mode == "pq":
        out.append(struct.pack("<I", index.codebook.m))
        out.append(np.ascontiguousarray(index.codes, dtype=np.uint8).tobytes())
        out.append(index.codebook.to_bytes())
    else:
        out.append(np.ascontiguousarray(index.binary.mean, dtype="<f8").tobytes())
        out.append(np.ascontiguousarray(index.binary.bits, dtype=np.uint8).tobytes())
    return b"".join(out)


def index_from_bytes(buf: bytes) -> GalleryIndex:
    check_magic(buf, LIIX_MAGIC, "index")
    version, mode_id, G, d = unpack_from("<IBII", buf, 4, "index")
    if version != LIIX_VERSION:
        raise FormatError(f"index: unsupported version {version}")
    if mode_id >= len(MODES):
        raise FormatError(f"index: unknown mode byte {mode_id}")
    (dir_id,) = unpack_from("<B", buf, 17, "index")
    if dir_id >= len(DIRECTIONS):
        raise FormatError(f"index: unknown direction byte {dir_id}")
    at = 18
    ids = []
    for _ in range(G):
        (n,) = unpack_from("<H", buf, at, "index id table")
        raw = buf[at + 2 : at + 2 + n]
        if len(raw) != n:
            raise FormatError("index: truncated id table")
        ids.append(raw.decode("utf-8"))
        at += 2 + n
    if len(buf) < at + 4 * G:
        raise FormatError("index: truncated row counts")
    counts = np.frombuffer(buf, dtype="<u4", count=G, offset=at).astype(np.int64)
    at += 4 * G
    offsets = _frozen(np.concatenate([[0], np.cumsum(counts)]))
    rows = int(offsets[-1])
    mode = MODES[mode_id]
    common = dict(ids=tuple(ids), offsets=offsets, d=int(d), mode=mode, direction=DIRECTIONS[dir_id])

    def take(n_bytes: int) -> bytes:
        nonlocal at
        chunk = buf[at : at + n_bytes]
        if len(chunk) != n_bytes:
            raise FormatError("index: truncated payload")
        at += n_bytes
        return chunk

    if mode == "float32":
        vec = np.frombuffer(take(rows * d * 4), dtype="<f4").reshape(rows, d).astype(np.float32)
        result = GalleryIndex(**common, vectors=_frozen(vec))
    elif mode == "pq":
        (m,) = struct.unpack("<I", take(4))
        codes = np.frombuffer(take(rows * m), dtype=np.uint8).reshape(rows, m).copy()
        codebook, at = PQCodebook.from_bytes(buf, at)
        if codebook.m != m or codebook.d != d:
            raise FormatError("index: codebook does not match the code layout")
        result = GalleryIndex(**common, codes=_frozen(codes), codebook=codebook)
    else:
        mean = np.frombuffer(take(d * 8), dtype="<f8").copy()
        bits = np.frombuffer(take(rows * d // 8), dtype=np.uint8).reshape(rows, d // 8).copy()
        result = GalleryIndex(**common, binary=BinaryCodes(_frozen(bits), _frozen(mean)))
    if at != len(buf):
        raise FormatError(f"index: {len(buf) - at} trailing bytes")
    return result


def save_index(path: str | Path, index: GalleryIndex) -> None:
    with atomic_open(path, "wb") as fh:
        fh.write(index_to_bytes(index))


def load_index(path: str | Path) -> GalleryIndex:
    return index_from_bytes(Path(path).read_bytes())


# -- evaluation -------------------------------------------------------------------------


@dataclass(frozen=True)
class EvalReport:
    direction: str
    recall: Mapping[int, float]  # K -> percent
    medr: float
    n_queries: int
    ranks: tuple[int, ...] = field(default=(), repr=False)

    def row(self) -> dict:
        out = {"direction": self.direction.upper()}
        out.update({f"R@{k}": round(v, 4) for k, v in self.recall.items()})
        out["MedR"] = self.medr
        out["queries"] = self.n_queries
        return out


def first_relevant_ranks(rankings: Sequence[Sequence], relevant: Sequence[Iterable]) -> np.ndarray:
    """1-based rank of the best-ranked relevant item for every query."""
    if len(rankings) != len(relevant):
        raise DataError("rankings and ground truth differ in length")
    ranks = np.empty(len(rankings), dtype=np.int64)
    for q, (ranked, rel) in enumerate(zip(rankings, relevant)):
        rel = set(rel)
        if not rel:
            raise DataError(f"query {q} has no relevant item")
        hit = next((r for r, item in enumerate(ranked, 1) if item in rel), None)
        if hit is None:
            raise DataError(f"query {q}: no relevant item appears in its ranking")
        ranks[q] = hit
    return ranks


def report_from_ranks(ranks: np.ndarray, direction: str, ks: Sequence[int] = K_LIST) -> EvalReport:
    ranks = np.asarray(ranks)
    if ranks.size == 0:
        raise DataError("no queries to evaluate")
    recall = {int(k): float(100.0 * np.mean(ranks <= k)) for k in ks}
    return EvalReport(direction, recall, float(np.median(ranks)), int(ranks.size), tuple(int(r) for r in ranks))


def evaluate(
    rankings: Sequence[Sequence], relevant: Sequence[Iterable], direction: str = "t2m", ks: Sequence[int] = K_LIST
) -> EvalReport:
    """R@K (percent) and MedR from ranked id lists, first relevant rank per query."""
    if direction not in DIRECTIONS:
        raise DataError(f"unknown direction {direction!r}")
    return report_from_ranks(first_relevant_ranks(rankings, relevant), direction, ks)


def ranks_from_scores(scores: np.ndarray, query_labels: Sequence[str], item_labels: Sequence[str], item_ids=None) -> np.ndarray:
    """First relevant rank per row of a (queries, items) score matrix, relevance by equal label."""
    item_ids = list(item_ids) if item_ids is not None else [f"{i:09d}" for i in range(scores.shape[1])]
    item_labels = np.asarray(item_labels)
    ranks = np.empty(scores.shape[0], dtype=np.int64)
    for q in range(scores.shape[0]):
        order = rank_order(scores[q], item_ids)
        hits = np.flatnonzero(item_labels[order] == query_labels[q])
        if hits.size == 0:
            raise DataError(f"query {q} has no relevant item")
        ranks[q] = hits[0] + 1
    return ranks


@dataclass(frozen=True)
class PairReport:
    t2m: EvalReport
    m2t: EvalReport
    scores: np.ndarray = field(repr=False)


def evaluate_embeddings(texts: Sequence[np.ndarray], motions: Sequence[np.ndarray], labels: Sequence[str], ks=K_LIST) -> PairReport:
    """Both directions over paired embeddings; items sharing a label are mutually relevant."""
    S = batch_scores(texts, motions, exact=True)
    ids = [f"{i:09d}" for i in range(len(labels))]
    t2m = report_from_ranks(ranks_from_scores(S, labels, labels, ids), "t2m", ks)
    m2t = report_from_ranks(ranks_from_scores(S.T, labels, labels, ids), "m2t", ks)
    return PairReport(t2m, m2t, S)


def evaluate_examples(params, examples, ks=K_LIST) -> PairReport:
    """Encode paired examples (see ``training.Example``) and evaluate both directions."""
    from .encoders import encode_features, encode_text

    texts = [encode_text(ex.ids, params) for ex in examples]
    motions = [encode_features(ex.frames, params) for ex in examples]
    return evaluate_embeddings(texts, motions, [ex.label for ex in examples], ks)


def eval_csv(reports: Sequence[EvalReport]) -> str:
    ks = sorted(reports[0].recall)
    lines = ["direction," + ",".join(f"R@{k}" for k in ks) + ",MedR"]
    for r in reports:
        lines.append(r.direction.upper() + "," + ",".join(f"{r.recall[k]:.4f}" for k in ks) + f",{r.medr:g}")
    return "\n".join(lines) + "\n"


# -- latency ---------------------------------------------------------------------------------


@dataclass(frozen=True)
class LatencyReport:
    mode: str
    gallery_size: int
    mean_ms: float
    p50_ms: float
    p95_ms: float
    bytes: int
    n_queries: int
    baseline_mean_ms: float
    baseline_p50_ms: float

    @property
    def overhead(self) -> float:
        return self.mean_ms / self.baseline_mean_ms if self.baseline_mean_ms > 0 else math.inf


def _timed(fn, queries, warmup: int, repeats: int) -> np.ndarray:
    for i in range(warmup):
        fn(queries[i % len(queries)])
    times = np.empty(repeats)
    for i in range(repeats):
        t0 = time.perf_counter()
        fn(queries[i % len(queries)])
        times[i] = (time.perf_counter() - t0) * 1e3
    return times


def bench_latency(
    index: GalleryIndex, queries: Sequence[np.ndarray], k: int = 10, warmup: int = 10, repeats: int = 100
) -> LatencyReport:
    """Warm per-query wall time of full search, plus a mean-pooled single-vector baseline."""
    if warmup < 10 or repeats < 100:
        raise DataError("latency needs at least 10 warm-up and 100 measured queries")
    if not queries:
        raise DataError("no benchmark queries")
    times = _timed(lambda q: index.search(q, k), queries, warmup, repeats)
    pooled = np.stack([index.item(i).mean(axis=0) for i in range(index.size)])
    pooled = pooled / np.maximum(np.linalg.norm(pooled, axis=1, keepdims=True), 1e-12)

    def single(q):
        v = np.atleast_2d(q).mean(axis=0)
        s = pooled @ (v / max(np.linalg.norm(v), 1e-12))
        return np.argsort(-s, kind="stable")[:k]

    base = _timed(single, queries, warmup, repeats)
    return LatencyReport(
        mode=index.mode,
        gallery_size=index.size,
        mean_ms=float(times.mean()),
        p50_ms=float(np.percentile(times, 50)),
        p95_ms=float(np.percentile(times, 95)),
        bytes=index.payload_bytes,
        n_queries=repeats,
        baseline_mean_ms=float(base.mean()),
        baseline_p50_ms=float(np.percentile(base, 50)),
    )


def bench_csv(reports: Sequence[LatencyReport]) -> str:
    lines = ["mode,G,mean_ms,p50_ms,p95_ms,bytes,baseline_mean_ms"]
    for r in reports:
        lines.append(
            f"{r.mode},{r.gallery_size},{r.mean_ms:.4f},{r.p50_ms:.4f},{r.p95_ms:.4f},{r.bytes},{r.baseline_mean_ms:.4f}"
        )
    return "\n".join(lines) + "\n"


# -- planted benchmark -------------------------------------------------------------------------


@dataclass(frozen=True)
class SyntheticBenchmark:
    gallery: list[np.ndarray]
    queries: list[np.ndarray]
    targets: np.ndarray  # gallery index relevant to each query

    @property
    def ids(self) -> list[str]:
        return [f"item{g:05d}" for g in range(len(self.gallery))]


def synthetic_benchmark(
    n_items: int = 1000,
    n_queries: int = 200,
    n_rows: int = 16,
    n_tokens: int = 8,
    d: int = 256,
    n_clusters: int = 64,
    cluster_spread: float = 0.6,
    query_noise: float = 1.0,
    seed: int = 0,
) -> SyntheticBenchmark:
    """Clustered multi-vector gallery; each query is a noisy copy of some rows of one item."""
    if not 1 <= n_tokens <= n_rows:
        raise DataError(f"queries take 1..{n_rows} rows of an item, got {n_tokens}")
    rng = np.random.default_rng(seed)
    centers = rng.standard_normal((n_clusters, d))
    gallery = []
    for _ in range(n_items):
        c = centers[rng.integers(n_clusters, size=n_rows)]
        gallery.append(c + cluster_spread * rng.standard_normal((n_rows, d)))
    targets = rng.integers(n_items, size=n_queries)
    queries = []
    for t in targets:
        rows = gallery[t][rng.choice(n_rows, size=n_tokens, replace=False)]
        noise = rng.standard_normal(rows.shape) * query_noise * cluster_spread
        queries.append(rows + noise)
    return SyntheticBenchmark(gallery, queries, targets)


def benchmark_recall(index: GalleryIndex, bench: SyntheticBenchmark, ks=K_LIST) -> EvalReport:
    ids = list(index.ids)
    rankings = []
    for q in bench.queries:
        order = rank_order(index.scores(q), ids)
        rankings.append([ids[i] for i in order])
    relevant = [[ids[t]] for t in bench.targets]
    return evaluate(rankings, relevant, "t2m", ks)
