"""Desk-scale text and motion encoders.

The motion encoder is a linear patch embedding with learned positions; the
text encoder is a token table followed by one uniform +-1 context-mixing
step. Both are small enough for closed-form gradients (see ``training``).
"""

from __future__ import annotations

import json
import math
import re
import struct
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

from ._io import atomic_open, check_magic, unpack_from, write_atomic
from .errors import DataError, EmptyQueryError, FormatError
from .motion_image import (
    BASE_LAYOUT,
    FeatureLayout,
    ImageStats,
    MotionImage,
    PartProjectionSet,
    build_motion_image,
    patchify,
    to_rgb,
)

D_MODEL = 256
LIEP_MAGIC = b"LIEP"
LIEP_VERSION = 1

PAD, MASK, UNK = "[PAD]", "[MASK]", "[UNK]"
_WORD = re.compile(r"[a-z0-9]+")


@dataclass(frozen=True)
class Vocabulary:
    tokens: tuple[str, ...]

    def __post_init__(self):
        if self.tokens[:3] != (PAD, MASK, UNK):
            raise DataError("vocabulary must start with [PAD], [MASK], [UNK]")
        if len(set(self.tokens)) != len(self.tokens):
            raise DataError("vocabulary has duplicate tokens")
        object.__setattr__(self, "_ids", {t: i for i, t in enumerate(self.tokens)})

    pad_id = 0
    mask_id = 1
    unk_id = 2

    def __len__(self) -> int:
        return len(self.tokens)

    def id(self, token: str) -> int:
        return self._ids.get(token, self.unk_id)

    @classmethod
    def build(cls, texts: Iterable[str], max_size: int = 2048, min_freq: int = 1) -> "Vocabulary":
        """Most frequent words first (ties alphabetical), capped at ``max_size`` entries."""
        counts = Counter(w for t in texts for w in words(t))
        ranked = sorted((w for w, c in counts.items() if c >= min_freq), key=lambda w: (-counts[w], w))
        return cls((PAD, MASK, UNK) + tuple(ranked[: max_size - 3]))

    def to_json(self) -> str:
        return json.dumps({"tokens": list(self.tokens)}, indent=1)

    @classmethod
    def from_json(cls, text: str) -> "Vocabulary":
        try:
            return cls(tuple(json.loads(text)["tokens"]))
        except (KeyError, TypeError, ValueError) as exc:
            raise FormatError(f"malformed vocabulary ({exc})") from exc

    def save(self, path: str | Path) -> None:
        write_atomic(path, self.to_json())

    @classmethod
    def load(cls, path: str | Path) -> "Vocabulary":
        return cls.from_json(Path(path).read_text(encoding="utf-8"))


def words(text: str) -> list[str]:
    return _WORD.findall(text.lower())


def tokenize(text: str, vocab: Vocabulary) -> np.ndarray:
    """Lower-case, split on non-alphanumeric runs, look up with UNK fallback."""
    ws = words(text)
    if not ws:
        raise EmptyQueryError(f"no tokens in query {text!r}")
    return np.array([vocab.id(w) for w in ws], dtype=np.int64)


@dataclass
class EncoderParams:
    patch_w: np.ndarray  # (d, 256)
    patch_b: np.ndarray  # (d,)
    pos: np.ndarray  # (196, d)
    table: np.ndarray  # (V, d)
    alpha: float
    mlm_w: np.ndarray  # (d, V)
    log_tau: float
    parts: PartProjectionSet
    stats: ImageStats = field(default_factory=ImageStats)

    @property
    def d(self) -> int:
        return self.patch_w.shape[0]

    @property
    def vocab_size(self) -> int:
        return self.table.shape[0]

    @property
    def tau(self) -> float:
        return math.exp(self.log_tau)

    @classmethod
    def init(
        cls,
        vocab_size: int,
        seed: int,
        d: int = D_MODEL,
        tau: float = 0.07,
        alpha: float = 0.5,
        layout: FeatureLayout = BASE_LAYOUT,
        pos_std: float = 0.02,
    ) -> "EncoderParams":
        rng = np.random.default_rng(seed)
        patch_dim = layout.d_part * layout.d_part
        lim = 1.0 / math.sqrt(patch_dim)
        return cls(
            patch_w=rng.uniform(-lim, lim, (d, patch_dim)),
            patch_b=np.zeros(d),
            pos=rng.normal(0.0, pos_std, (layout.n_patches, d)),
            table=rng.normal(0.0, 1.0 / math.sqrt(d), (vocab_size, d)),
            alpha=float(alpha),
            mlm_w=rng.normal(0.0, 1.0 / math.sqrt(d), (d, vocab_size)),
            log_tau=math.log(tau),
            parts=PartProjectionSet.init(int(rng.integers(2**31)), layout),
        )

    def copy(self) -> "EncoderParams":
        return EncoderParams(
            self.patch_w.copy(), self.patch_b.copy(), self.pos.copy(), self.table.copy(),
            self.alpha, self.mlm_w.copy(), self.log_tau, self.parts.copy(), self.stats,
        )

    # -- checkpoint ---------------------------------------------------------

    def arrays(self) -> list[np.ndarray]:
        """Parameter blocks in checkpoint order."""
        out = [
            self.patch_w, self.patch_b, self.pos, self.table,
            np.array([self.alpha]), self.mlm_w, np.array([self.log_tau]),
            np.asarray(self.stats.mean), np.asarray(self.stats.std),
        ]
        for w, b in zip(self.parts.weights, self.parts.biases):
            out += [w, b]
        return out

    def to_bytes(self) -> bytes:
        head = LIEP_MAGIC + struct.pack("<III", LIEP_VERSION, self.vocab_size, self.d)
        body = b"".join(np.ascontiguousarray(a, dtype="<f4").tobytes() for a in self.arrays())
        return head + body

    @classmethod
    def from_bytes(cls, buf: bytes, layout: FeatureLayout = BASE_LAYOUT) -> "EncoderParams":
        check_magic(buf, LIEP_MAGIC, "checkpoint")
        version, vsz, d = unpack_from("<III", buf, 4, "checkpoint")
        if version != LIEP_VERSION:
            raise FormatError(f"checkpoint: unsupported version {version}")
        patch_dim = layout.d_part * layout.d_part
        shapes = [(d, patch_dim), (d,), (layout.n_patches, d), (vsz, d), (1,), (d, vsz), (1,), (3,), (3,)]
        for dof in layout.dofs:
            shapes += [(layout.d_part, dof), (layout.d_part,)]
        total = sum(int(np.prod(s)) for s in shapes)
        if len(buf) != 16 + 4 * total:
            raise FormatError(f"checkpoint: expected {16 + 4 * total} bytes, got {len(buf)}")
        flat = np.frombuffer(buf, dtype="<f4", offset=16).astype(float)
        blocks, at = [], 0
        for s in shapes:
            n = int(np.prod(s))
            blocks.append(flat[at : at + n].reshape(s))
            at += n
        parts = PartProjectionSet(
            weights=[blocks[9 + 2 * k] for k in range(layout.n_joints)],
            biases=[blocks[10 + 2 * k] for k in range(layout.n_joints)],
            layout=layout,
        )
        return cls(
            patch_w=blocks[0], patch_b=blocks[1], pos=blocks[2], table=blocks[3],
            alpha=float(blocks[4][0]), mlm_w=blocks[5], log_tau=float(blocks[6][0]),
            parts=parts,
            stats=ImageStats(tuple(float(x) for x in blocks[7]), tuple(float(x) for x in blocks[8])),
        )

    def save(self, path: str | Path) -> None:
        with atomic_open(path, "wb") as fh:
            fh.write(self.to_bytes())

    @classmethod
    def load(cls, path: str | Path) -> "EncoderParams":
        return cls.from_bytes(Path(path).read_bytes())


# -- text ----------------------------------------------------------------------


def context_mean(rows: np.ndarray) -> np.ndarray:
    """Uniform mean of each row with its immediate neighbours (window clipped at the ends)."""
    sums = rows.copy()
    sums[1:] += rows[:-1]
    sums[:-1] += rows[1:]
    return sums / window_counts(rows.shape[0])[:, None]


def window_counts(m: int) -> np.ndarray:
    counts = np.full(m, 3.0)
    if m == 1:
        counts[0] = 1.0
    else:
        counts[0] = counts[-1] = 2.0
    return counts


def encode_text(ids, params: EncoderParams) -> np.ndarray:
    """Token embeddings ``(1 - alpha) * table[id_i] + alpha * mean(table[id_{i-1..i+1}])``."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.ndim != 1 or ids.size < 1:
        raise EmptyQueryError("token sequence is empty")
    if ids.min() < 0 or ids.max() >= params.vocab_size:
        raise DataError(f"token id out of range [0, {params.vocab_size})")
    rows = params.table[ids]
    if params.alpha == 0.0:
        return rows.copy()
    return (1.0 - params.alpha) * rows + params.alpha * context_mean(rows)


# -- motion --------------------------------------------------------------------


def encode_motion(image: MotionImage, params: EncoderParams) -> np.ndarray:
    """Patch embeddings ``W flatten(patch_j) + b + pos_j`` of the normalised image."""
    layout = params.parts.layout
    if image.pixels.shape != (layout.height, layout.width):
        raise DataError(f"image shape {image.pixels.shape} does not match the encoder geometry")
    # channel replication is a no-op for a linear encoder; averaging the
    # normalised channels recovers the single normalised channel
    x = to_rgb(image, params.stats).mean(axis=0)
    patches = patchify(x, layout.d_part)
    return patches @ params.patch_w.T + params.patch_b + params.pos


def encode_features(rows: np.ndarray, params: EncoderParams) -> np.ndarray:
    return encode_motion(build_motion_image(rows, params.parts), params)


# -- masked language modelling -------------------------------------------------


@dataclass
class MaskedBatch:
    original: np.ndarray
    masked: np.ndarray
    positions: np.ndarray
    rate: float


def check_mask_rate(rate: float) -> float:
    rate = float(rate)
    if not 0.0 < rate < 1.0:
        raise DataError(f"mask rate must lie in (0, 1), got {rate}")
    return rate


def mask_count(m: int, rate: float) -> int:
    # tolerance guards against products such as 0.15 * 20 landing a hair above 3
    return max(1, min(m, math.ceil(rate * m - 1e-9)))


def mask_tokens(ids, rate: float = 0.15, seed: int | np.random.Generator = 0, mask_id: int = 1) -> MaskedBatch:
    """Replace ``ceil(rate * M)`` distinct positions (at least one) by the MASK id."""
    rate = check_mask_rate(rate)
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size < 1:
        raise EmptyQueryError("cannot mask an empty sequence")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    n = mask_count(ids.size, rate)
    positions = np.sort(rng.choice(ids.size, size=n, replace=False))
    masked = ids.copy()
    masked[positions] = mask_id
    return MaskedBatch(original=ids, masked=masked, positions=positions, rate=rate)


def mlm_logits(states: np.ndarray, params: EncoderParams) -> np.ndarray:
    """Vocabulary scores for context states taken at masked positions."""
    return np.atleast_2d(states) @ params.mlm_w


def softmax(z: np.ndarray, axis: int = -1) -> np.ndarray:
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def log_softmax(z: np.ndarray, axis: int = -1) -> np.ndarray:
    z = z - z.max(axis=axis, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=axis, keepdims=True))
