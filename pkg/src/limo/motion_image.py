"""Motion Image construction.

Each of the 14 feature joints is projected to a 16-pixel band; stacking the
per-frame columns yields a 224x224 single-channel pseudo-image whose 16x16
patch grid maps one-to-one onto (joint band, time window) cells.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ._io import atomic_open, check_magic, unpack_from
from .errors import DataError, FormatError
from .kinematics import FeatureSequence

LIMI_MAGIC = b"LIMI"


@dataclass(frozen=True)
class FeatureLayout:
    dofs: tuple[int, ...] = (3, 3, 3, 3, 1, 1, 1, 1, 3, 3, 3, 1, 1, 2)
    d_part: int = 16
    width: int = 224

    def __post_init__(self):
        if self.n_joints * self.d_part != self.height:
            raise DataError("layout: joint count times band height must equal image height")
        if self.height != self.width:
            raise DataError("layout: only square images are supported")

    @property
    def n_joints(self) -> int:
        return len(self.dofs)

    @property
    def height(self) -> int:
        return self.n_joints * self.d_part

    @property
    def n_features(self) -> int:
        return sum(self.dofs)

    @property
    def grid(self) -> int:
        """Patches per side."""
        return self.width // self.d_part

    @property
    def n_patches(self) -> int:
        return self.grid * self.grid

    @property
    def slices(self) -> tuple[slice, ...]:
        b = np.concatenate([[0], np.cumsum(self.dofs)])
        return tuple(slice(int(x), int(y)) for x, y in zip(b[:-1], b[1:]))

    def band(self, k: int) -> slice:
        return slice(k * self.d_part, (k + 1) * self.d_part)


BASE_LAYOUT = FeatureLayout()


@dataclass
class PartProjectionSet:
    """Per-joint linear maps from a joint's DoF block into its 16-pixel band."""

    weights: list[np.ndarray]  # W_k: (d_part, dof_k)
    biases: list[np.ndarray]  # b_k: (d_part,)
    seed: int | None = None
    layout: FeatureLayout = field(default=BASE_LAYOUT)

    def __post_init__(self):
        if len(self.weights) != self.layout.n_joints or len(self.biases) != self.layout.n_joints:
            raise DataError("projection count does not match the layout")
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.shape != (self.layout.d_part, self.layout.dofs[k]) or b.shape != (self.layout.d_part,):
                raise DataError(f"projection {k}: bad shapes {w.shape}, {b.shape}")

    @classmethod
    def init(cls, seed: int, layout: FeatureLayout = BASE_LAYOUT) -> "PartProjectionSet":
        """Fan-in scaled uniform weights in [-1/sqrt(dof), 1/sqrt(dof)], zero bias."""
        rng = np.random.default_rng(seed)
        weights = []
        for dof in layout.dofs:
            lim = 1.0 / np.sqrt(dof)
            weights.append(rng.uniform(-lim, lim, (layout.d_part, dof)))
        biases = [np.zeros(layout.d_part) for _ in layout.dofs]
        return cls(weights, biases, seed, layout)

    def copy(self) -> "PartProjectionSet":
        return PartProjectionSet([w.copy() for w in self.weights], [b.copy() for b in self.biases], self.seed, self.layout)


@dataclass
class MotionImage:
    pixels: np.ndarray  # (224, 224)
    valid_frames: int
    layout: FeatureLayout = field(default=BASE_LAYOUT)


@dataclass(frozen=True)
class ImageStats:
    """Per-channel normalisation statistics of the RGB-replicated image."""

    mean: tuple[float, float, float] = (0.0, 0.0, 0.0)
    std: tuple[float, float, float] = (1.0, 1.0, 1.0)


def project_frame(p_t: np.ndarray, proj: PartProjectionSet) -> np.ndarray:
    """One image column: the concatenation of ``W_k p_{t,k} + b_k`` over joints."""
    p_t = np.asarray(p_t, dtype=float)
    layout = proj.layout
    if p_t.shape != (layout.n_features,):
        raise DataError(f"expected {layout.n_features} features, got shape {p_t.shape}")
    return np.concatenate([w @ p_t[sl] + b for w, b, sl in zip(proj.weights, proj.biases, layout.slices)])


def frame_indices(n_frames: int, width: int = 224) -> np.ndarray:
    """Source frame for each filled column; uniform subsampling when T > width."""
    if n_frames < 1:
        raise DataError("empty feature sequence")
    if n_frames <= width:
        return np.arange(n_frames)
    return (np.arange(width) * n_frames) // width


def build_motion_image(features: FeatureSequence | np.ndarray, proj: PartProjectionSet) -> MotionImage:
    """Project every (resampled) frame into a column; pad the rest with zeros."""
    rows = features.rows if isinstance(features, FeatureSequence) else np.asarray(features, dtype=float)
    layout = proj.layout
    if rows.ndim != 2 or rows.shape[0] < 1:
        raise DataError("empty feature sequence")
    if rows.shape[1] != layout.n_features:
        raise DataError(f"expected {layout.n_features} feature columns, got {rows.shape[1]}")
    idx = frame_indices(rows.shape[0], layout.width)
    sel = rows[idx]
    pixels = np.zeros((layout.height, layout.width))
    for k, (w, b, sl) in enumerate(zip(proj.weights, proj.biases, layout.slices)):
        pixels[layout.band(k), : len(idx)] = w @ sel[:, sl].T + b[:, None]
    return MotionImage(pixels=pixels, valid_frames=len(idx), layout=layout)


def to_rgb(image: MotionImage | np.ndarray, stats: ImageStats = ImageStats()) -> np.ndarray:
    """Replicate the single channel three times and normalise each channel."""
    pixels = image.pixels if isinstance(image, MotionImage) else np.asarray(image, dtype=float)
    mean = np.asarray(stats.mean, dtype=float).reshape(3, 1, 1)
    std = np.asarray(stats.std, dtype=float).reshape(3, 1, 1)
    if np.any(std <= 0):
        raise DataError("normalisation std must be positive")
    return (np.broadcast_to(pixels, (3,) + pixels.shape) - mean) / std


def compute_image_stats(images: list[MotionImage]) -> ImageStats:
    if not images:
        raise DataError("cannot compute statistics of an empty corpus")
    stack = np.stack([im.pixels for im in images])
    mean = float(stack.mean())
    std = float(stack.std())
    if std == 0:
        std = 1.0
    return ImageStats(mean=(mean,) * 3, std=(std,) * 3)


def patch_index(k: int, w: int, layout: FeatureLayout = BASE_LAYOUT) -> int:
    """Row-major patch id of joint band ``k`` and time window ``w``."""
    g = layout.grid
    if not (0 <= k < g and 0 <= w < g):
        raise DataError(f"patch cell ({k}, {w}) out of range for a {g}x{g} grid")
    return k * g + w


def patch_cell(pid: int, layout: FeatureLayout = BASE_LAYOUT) -> tuple[int, int]:
    """Inverse of ``patch_index``: (joint band, time window)."""
    if not 0 <= pid < layout.n_patches:
        raise DataError(f"patch id {pid} out of range")
    return divmod(int(pid), layout.grid)


def patchify(pixels: np.ndarray, patch: int = 16) -> np.ndarray:
    """(H, W) -> (N, patch*patch) in row-major patch order, each patch flattened row-major."""
    h, w = pixels.shape[-2:]
    gh, gw = h // patch, w // patch
    lead = pixels.shape[:-2]
    x = pixels.reshape(lead + (gh, patch, gw, patch))
    x = np.moveaxis(x, -3, -2)  # (..., gh, gw, patch, patch)
    return x.reshape(lead + (gh * gw, patch * patch))


def unpatchify(patches: np.ndarray, grid: int = 14, patch: int = 16) -> np.ndarray:
    lead = patches.shape[:-2]
    x = patches.reshape(lead + (grid, grid, patch, patch))
    x = np.moveaxis(x, -2, -3)
    return x.reshape(lead + (grid * patch, grid * patch))


# -- persistence -------------------------------------------------------------


def image_to_bytes(image: MotionImage) -> bytes:
    px = np.ascontiguousarray(image.pixels, dtype="<f4")
    if px.shape != (224, 224):
        raise DataError("only base-geometry images can be persisted")
    return LIMI_MAGIC + struct.pack("<I", image.valid_frames) + px.tobytes()


def image_from_bytes(buf: bytes) -> MotionImage:
    check_magic(buf, LIMI_MAGIC, "motion image")
    (valid,) = unpack_from("<I", buf, 4, "motion image")
    if len(buf) != 8 + 224 * 224 * 4:
        raise FormatError(f"motion image: expected {8 + 224 * 224 * 4} bytes, got {len(buf)}")
    px = np.frombuffer(buf, dtype="<f4", offset=8).reshape(224, 224).astype(float)
    return MotionImage(pixels=px, valid_frames=int(valid))


def save_image(path: str | Path, image: MotionImage) -> None:
    with atomic_open(path, "wb") as fh:
        fh.write(image_to_bytes(image))


def load_image(path: str | Path) -> MotionImage:
    return image_from_bytes(Path(path).read_bytes())


def to_uint8(values: np.ndarray) -> np.ndarray:
    """Min-max scale to 0..255; a constant input maps to 0."""
    values = np.asarray(values, dtype=float)
    lo, hi = float(values.min()), float(values.max())
    if hi <= lo:
        return np.zeros(values.shape, dtype=np.uint8)
    return np.round((values - lo) / (hi - lo) * 255.0).astype(np.uint8)


def pgm_bytes(gray: np.ndarray) -> bytes:
    gray = np.asarray(gray, dtype=np.uint8)
    h, w = gray.shape
    return f"P5\n{w} {h}\n255\n".encode("ascii") + gray.tobytes()


def save_grayscale(path: str | Path, values: np.ndarray, fmt: str | None = None) -> None:
    """Write a min-max scaled 8-bit grayscale PGM or PNG."""
    path = Path(path)
    fmt = (fmt or path.suffix.lstrip(".")).lower()
    gray = to_uint8(values)
    if fmt == "pgm":
        with atomic_open(path, "wb") as fh:
            fh.write(pgm_bytes(gray))
    elif fmt == "png":
        from PIL import Image

        with atomic_open(path, "wb") as fh:
            Image.fromarray(gray, mode="L").save(fh, format="PNG")
    else:
        raise DataError(f"unsupported image format {fmt!r}")
