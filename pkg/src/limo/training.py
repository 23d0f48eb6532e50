"""Contrastive + masked-language-model training of the toy encoders.

The forward pass is written out explicitly so that every gradient is
closed-form. The max over patches is differentiated as a subgradient that
flows only into the winning patch of each token (ties resolved by
``argmax_assignment``).
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from ._io import write_atomic
from .encoders import EncoderParams, MaskedBatch, Vocabulary, context_mean, log_softmax, mask_tokens, softmax, tokenize, window_counts
from .errors import DataError
from .late_interaction import unit_rows
from .motion_image import ImageStats, build_motion_image, compute_image_stats, frame_indices, patchify, unpatchify

BETA1, BETA2, ADAM_EPS = 0.9, 0.999, 1e-8
# weight matrices receive decoupled weight decay; biases, positional vectors,
# alpha and the temperature do not
DECAYED_PREFIXES = ("table", "patch_w", "mlm_w", "part_w")


@dataclass(frozen=True)
class LossConfig:
    lambda_mlm: float = 0.2
    mask_rate: float = 0.15
    batch_size: int = 16
    epochs: int = 50
    lr: float = 1e-3
    weight_decay: float = 0.1
    seed: int = 0
    tau_init: float = 0.07
    d_model: int = 256
    pos_std: float = 0.02

    def __post_init__(self):
        if self.lambda_mlm < 0:
            raise DataError("lambda_mlm must be non-negative")
        if self.batch_size < 2:
            raise DataError("contrastive training needs a batch size of at least 2")
        if not 0.0 < self.mask_rate < 1.0:
            raise DataError("mask rate must lie in (0, 1)")
        if self.epochs < 0 or self.lr < 0 or self.weight_decay < 0:
            raise DataError("epochs, learning rate and weight decay must be non-negative")

    @classmethod
    def from_dict(cls, d: dict) -> "LossConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise DataError(f"unknown training options: {sorted(unknown)}")
        return cls(**d)


@dataclass
class TrainState:
    params: EncoderParams
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0

    @property
    def tau(self) -> float:
        return self.params.tau


@dataclass
class Example:
    """A training pair reduced to what the encoders consume."""

    frames: np.ndarray  # resampled feature rows (n <= 224, 29)
    ids: np.ndarray
    label: str


@dataclass
class Batch:
    examples: list[Example]
    masks: list[MaskedBatch]

    def __len__(self) -> int:
        return len(self.examples)


@dataclass(frozen=True)
class LossParts:
    t2m: float
    m2t: float
    mlm: float
    lambda_mlm: float

    @property
    def ret(self) -> float:
        return 0.5 * (self.t2m + self.m2t)

    @property
    def total(self) -> float:
        return self.ret + self.lambda_mlm * self.mlm


def make_example(rows: np.ndarray, text: str, vocab: Vocabulary, label: str | None = None, width: int = 224) -> Example:
    rows = np.asarray(rows, dtype=float)
    return Example(frames=rows[frame_indices(rows.shape[0], width)], ids=tokenize(text, vocab), label=label or text)


def make_batch(examples: Sequence[Example], rate: float, rng: np.random.Generator, mask_id: int = 1) -> Batch:
    return Batch(list(examples), [mask_tokens(ex.ids, rate, rng, mask_id) for ex in examples])


# -- losses --------------------------------------------------------------------


def _square(S: np.ndarray) -> np.ndarray:
    S = np.asarray(S, dtype=float)
    if S.ndim != 2 or S.shape[0] != S.shape[1] or S.shape[0] < 1:
        raise DataError(f"score matrix must be square, got shape {S.shape}")
    return S


def t2m_loss(S: np.ndarray, tau: float) -> float:
    """Row-wise cross-entropy with the diagonal as target."""
    S = _square(S)
    if not tau > 0:
        raise DataError("temperature must be positive")
    return float(-np.mean(np.diag(log_softmax(S / tau, axis=1))))


def m2t_loss(S: np.ndarray, tau: float) -> float:
    return t2m_loss(_square(S).T, tau)


def mlm_loss(batch: MaskedBatch | Sequence[MaskedBatch], params: EncoderParams) -> float:
    """Mean negative log-likelihood of the true tokens at the masked positions."""
    from .encoders import encode_text, mlm_logits

    masks = [batch] if isinstance(batch, MaskedBatch) else list(batch)
    nll, count = 0.0, 0
    for mb in masks:
        if mb.positions.size < 1:
            raise DataError("masked batch has no masked positions")
        states = encode_text(mb.masked, params)[mb.positions]
        lp = log_softmax(mlm_logits(states, params), axis=1)
        nll -= float(lp[np.arange(len(mb.positions)), mb.original[mb.positions]].sum())
        count += len(mb.positions)
    return nll / count


# -- forward / backward ---------------------------------------------------------


def param_groups(params: EncoderParams) -> dict[str, np.ndarray]:
    """Named views of every trainable block; scalars are wrapped as 1-element arrays."""
    groups = {
        "table": params.table,
        "alpha": np.array([params.alpha]),
        "patch_w": params.patch_w,
        "patch_b": params.patch_b,
        "pos": params.pos,
        "mlm_w": params.mlm_w,
        "log_tau": np.array([params.log_tau]),
    }
    for k, (w, b) in enumerate(zip(params.parts.weights, params.parts.biases)):
        groups[f"part_w{k}"] = w
        groups[f"part_b{k}"] = b
    return groups


def set_scalars(params: EncoderParams, groups: dict[str, np.ndarray]) -> None:
    params.alpha = float(groups["alpha"][0])
    params.log_tau = float(groups["log_tau"][0])


def _pixel_affine(stats: ImageStats) -> tuple[float, float]:
    """Channel-averaged normalisation as ``x = a * p - c``."""
    mean = np.asarray(stats.mean, dtype=float)
    std = np.asarray(stats.std, dtype=float)
    return float(np.mean(1.0 / std)), float(np.mean(mean / std))


def _images(params: EncoderParams, examples: Sequence[Example]) -> np.ndarray:
    lay = params.parts.layout
    pixels = np.zeros((len(examples), lay.height, lay.width))
    for b, ex in enumerate(examples):
        n = ex.frames.shape[0]
        for k, (w, bias, sl) in enumerate(zip(params.parts.weights, params.parts.biases, lay.slices)):
            pixels[b, lay.band(k), :n] = w @ ex.frames[:, sl].T + bias[:, None]
    return pixels


def _text_forward(ids: np.ndarray, params: EncoderParams) -> np.ndarray:
    rows = params.table[ids]
    return (1.0 - params.alpha) * rows + params.alpha * context_mean(rows)


def _text_backward(ids: np.ndarray, d_out: np.ndarray, params: EncoderParams, grads: dict) -> None:
    rows = params.table[ids]
    grads["alpha"][0] += float(np.sum(d_out * (context_mean(rows) - rows)))
    e = d_out / window_counts(len(ids))[:, None]
    d_ctx = e.copy()
    d_ctx[1:] += e[:-1]
    d_ctx[:-1] += e[1:]
    np.add.at(grads["table"], ids, (1.0 - params.alpha) * d_out + params.alpha * d_ctx)


def _unit_backward(x: np.ndarray, xh: np.ndarray, d_xh: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(x, axis=-1, keepdims=True)
    return (d_xh - xh * np.sum(xh * d_xh, axis=-1, keepdims=True)) / norms


def forward(params: EncoderParams, batch: Batch, lambda_mlm: float = 0.2, need_grad: bool = True):
    """Loss components and, if requested, the gradient of the total for every group.

    Returns ``(LossParts, grads, cache)``; ``cache`` exposes the batch score
    matrix and argmax winners for diagnostics.
    """
    examples = batch.examples
    B = len(examples)
    if B < 2:
        raise DataError("contrastive loss needs at least two pairs")
    lay = params.parts.layout
    n_p = lay.n_patches
    d = params.d

    # motion tower
    a, c = _pixel_affine(params.stats)
    pixels = _images(params, examples)
    patches = patchify(pixels * a - c, lay.d_part)  # (B, 196, 256)
    V = patches @ params.patch_w.T + params.patch_b + params.pos
    Vh = unit_rows(V, exact=False, what="patch")
    Vflat = Vh.reshape(B * n_p, d)

    # text tower (clean ids)
    lengths = np.array([len(ex.ids) for ex in examples])
    starts = np.concatenate([[0], np.cumsum(lengths)[:-1]])
    L = np.concatenate([_text_forward(ex.ids, params) for ex in examples])
    Lh = unit_rows(L, exact=False, what="token")

    sims = (Lh @ Vflat.T).reshape(-1, B, n_p)
    win = np.argmax(sims, axis=2)  # (sumM, B)
    best = np.take_along_axis(sims, win[..., None], axis=2)[..., 0]
    S = np.add.reduceat(best, starts, axis=0) / lengths[:, None]

    tau = params.tau
    Z = S / tau
    lp_rows = log_softmax(Z, axis=1)
    lp_cols = log_softmax(Z, axis=0)
    l_t2m = float(-np.mean(np.diag(lp_rows)))
    l_m2t = float(-np.mean(np.diag(lp_cols)))

    # masked language model (masked ids through the same text encoder)
    mlm_states, mlm_targets = [], []
    for mb in batch.masks:
        mlm_states.append(_text_forward(mb.masked, params)[mb.positions])
        mlm_targets.append(mb.original[mb.positions])
    H = np.concatenate(mlm_states)
    targets = np.concatenate(mlm_targets)
    logits = H @ params.mlm_w
    lp = log_softmax(logits, axis=1)
    l_mlm = float(-np.mean(lp[np.arange(len(targets)), targets]))

    parts = LossParts(l_t2m, l_m2t, l_mlm, float(lambda_mlm))
    cache = {"S": S, "winners": win, "starts": starts, "sims": sims}
    if not need_grad:
        return parts, None, cache

    grads = {k: np.zeros_like(v) for k, v in param_groups(params).items()}
    eye = np.eye(B)
    dZ = 0.5 * ((np.exp(lp_rows) - eye) + (np.exp(lp_cols) - eye)) / B
    grads["log_tau"][0] = float(np.sum(dZ * -Z))
    dS = dZ / tau

    tok_text = np.repeat(np.arange(B), lengths)
    d_best = dS[tok_text] / lengths[tok_text][:, None]  # (sumM, B)
    flat_idx = np.arange(B)[None, :] * n_p + win  # (sumM, B)
    dLh = np.einsum("tc,tcd->td", d_best, Vflat[flat_idx])
    assign = np.zeros((B * n_p, Lh.shape[0]))
    np.add.at(assign, (flat_idx.ravel(), np.repeat(np.arange(Lh.shape[0]), B)), d_best.ravel())
    dVh = (assign @ Lh).reshape(B, n_p, d)

    # motion backward
    dV = _unit_backward(V, Vh, dVh)
    grads["patch_b"] += dV.sum(axis=(0, 1))
    grads["pos"] += dV.sum(axis=0)
    grads["patch_w"] += np.einsum("bnd,bnp->dp", dV, patches)
    dpix = unpatchify(dV @ params.patch_w, lay.grid, lay.d_part) * a
    for b, ex in enumerate(examples):
        n = ex.frames.shape[0]
        for k, sl in enumerate(lay.slices):
            g = dpix[b, lay.band(k), :n]
            grads[f"part_w{k}"] += g @ ex.frames[:, sl]
            grads[f"part_b{k}"] += g.sum(axis=1)

    # text backward (retrieval)
    dL = _unit_backward(L, Lh, dLh)
    for b, ex in enumerate(examples):
        _text_backward(ex.ids, dL[starts[b] : starts[b] + lengths[b]], params, grads)

    # text backward (mlm)
    if lambda_mlm != 0.0:
        dlogits = softmax(logits, axis=1)
        dlogits[np.arange(len(targets)), targets] -= 1.0
        dlogits *= lambda_mlm / len(targets)
        grads["mlm_w"] += H.T @ dlogits
        dH = dlogits @ params.mlm_w.T
        at = 0
        for mb in batch.masks:
            d_out = np.zeros((len(mb.masked), d))
            k = len(mb.positions)
            np.add.at(d_out, mb.positions, dH[at : at + k])
            at += k
            _text_backward(mb.masked, d_out, params, grads)
    return parts, grads, cache


def total_loss(params: EncoderParams, batch: Batch, lambda_mlm: float = 0.2) -> LossParts:
    return forward(params, batch, lambda_mlm, need_grad=False)[0]


def gradients(params: EncoderParams, batch: Batch, lambda_mlm: float = 0.2) -> dict[str, np.ndarray]:
    return forward(params, batch, lambda_mlm)[1]


def argmax_margin(params: EncoderParams, batch: Batch) -> float:
    """Smallest gap between the best and second-best patch over all token/motion pairs."""
    sims = forward(params, batch, 0.0, need_grad=False)[2]["sims"]
    top2 = np.sort(sims, axis=2)[..., -2:]
    return float(np.min(top2[..., 1] - top2[..., 0]))


@dataclass(frozen=True)
class GradCheck:
    group: str
    analytic: float
    numeric: float
    winners_stable: bool = True  # argmax winners identical at both probe points

    @property
    def rel_error(self) -> float:
        scale = max(abs(self.analytic), abs(self.numeric))
        return 0.0 if scale == 0.0 else abs(self.analytic - self.numeric) / scale


def finite_difference_check(
    params: EncoderParams,
    batch: Batch,
    lambda_mlm: float = 0.2,
    h: float = 1e-4,
    seed: int = 0,
    groups: Sequence[str] | None = None,
) -> list[GradCheck]:
    """Central differences of the total loss along one unit direction per group.

    A probe whose perturbation changes any argmax winner straddles a kink of
    the max and is flagged through ``winners_stable``; such batches are tie
    batches for the purpose of the check.
    """
    rng = np.random.default_rng(seed)
    _, grads, cache = forward(params, batch, lambda_mlm)
    names = list(groups or grads)
    out = []
    for name in names:
        # half gradient direction, half random: keeps the probed derivative away
        # from zero (where O(h^2) truncation would dominate a relative error)
        # while still exercising components orthogonal to the gradient
        u = rng.standard_normal(grads[name].shape) if grads[name].size > 1 else np.ones(1)
        u /= np.linalg.norm(u)
        gnorm = np.linalg.norm(grads[name])
        if gnorm > 0 and u.size > 1:
            u = u + grads[name] / gnorm
            u /= np.linalg.norm(u)
        analytic = float(np.sum(grads[name] * u))
        vals, stable = [], True
        for sign in (1.0, -1.0):
            p = params.copy()
            g = param_groups(p)
            g[name] += sign * h * u
            set_scalars(p, g)
            parts, _, c = forward(p, batch, lambda_mlm, need_grad=False)
            vals.append(parts.total)
            stable &= bool(np.array_equal(c["winners"], cache["winners"]))
        out.append(GradCheck(name, analytic, (vals[0] - vals[1]) / (2 * h), stable))
    return out


# -- optimisation ---------------------------------------------------------------


def adamw_update(
    param: np.ndarray, grad: np.ndarray, m: np.ndarray, v: np.ndarray, step: int, lr: float, weight_decay: float
) -> None:
    """In-place decoupled-weight-decay Adam update; ``step`` counts from 1."""
    if weight_decay:
        param *= 1.0 - lr * weight_decay
    m *= BETA1
    m += (1.0 - BETA1) * grad
    v *= BETA2
    v += (1.0 - BETA2) * grad * grad
    m_hat = m / (1.0 - BETA1**step)
    v_hat = v / (1.0 - BETA2**step)
    param -= lr * m_hat / (np.sqrt(v_hat) + ADAM_EPS)


def apply_gradients(state: TrainState, grads: dict[str, np.ndarray], lr: float, weight_decay: float) -> TrainState:
    state.step += 1
    groups = param_groups(state.params)
    for name, g in grads.items():
        if name not in state.m:
            state.m[name] = np.zeros_like(g)
            state.v[name] = np.zeros_like(g)
        wd = weight_decay if name.startswith(DECAYED_PREFIXES) else 0.0
        adamw_update(groups[name], g, state.m[name], state.v[name], state.step, lr, wd)
    groups["alpha"][0] = min(1.0, max(0.0, groups["alpha"][0]))
    set_scalars(state.params, groups)
    return state


def train_step(state: TrainState, batch: Batch, config: LossConfig) -> LossParts:
    parts, grads, _ = forward(state.params, batch, config.lambda_mlm)
    apply_gradients(state, grads, config.lr, config.weight_decay)
    return parts


# -- loop -------------------------------------------------------------------------


@dataclass
class EpochLog:
    epoch: int
    t2m: float
    m2t: float
    mlm: float
    val_r1: float


def history_csv(history: Sequence[EpochLog]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["epoch", "L_t2m", "L_m2t", "L_mlm", "val_R@1"])
    for h in history:
        w.writerow([h.epoch, f"{h.t2m:.6f}", f"{h.m2t:.6f}", f"{h.mlm:.6f}", f"{h.val_r1:.2f}"])
    return buf.getvalue()


def init_state(vocab_size: int, train: Sequence[Example], config: LossConfig) -> TrainState:
    """Fresh parameters with image statistics measured on the training images."""
    params = EncoderParams.init(vocab_size, config.seed, d=config.d_model, tau=config.tau_init, pos_std=config.pos_std)
    images = [build_motion_image(ex.frames, params.parts) for ex in train]
    params.stats = compute_image_stats(images)
    return TrainState(params)


def train_loop(
    train: Sequence[Example],
    config: LossConfig,
    vocab_size: int,
    val: Sequence[Example] | None = None,
    state: TrainState | None = None,
    on_epoch: Callable[[EpochLog], None] | None = None,
) -> tuple[TrainState, list[EpochLog]]:
    """Seeded AdamW loop; the last partial batch is kept when it has at least two pairs."""
    if len(train) < config.batch_size:
        raise DataError(f"dataset has {len(train)} pairs, fewer than the batch size {config.batch_size}")
    from .retrieval import evaluate_examples

    state = state or init_state(vocab_size, train, config)
    rng = np.random.default_rng(config.seed)
    history = []
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(len(train))
        sums = np.zeros(3)
        n_batches = 0
        for at in range(0, len(order), config.batch_size):
            idx = order[at : at + config.batch_size]
            if len(idx) < 2:
                continue
            batch = make_batch([train[i] for i in idx], config.mask_rate, rng)
            parts = train_step(state, batch, config)
            sums += (parts.t2m, parts.m2t, parts.mlm)
            n_batches += 1
        val_r1 = evaluate_examples(state.params, val).t2m.recall[1] if val else float("nan")
        log = EpochLog(epoch, *(sums / n_batches), val_r1)
        history.append(log)
        if on_epoch:
            on_epoch(log)
    return state, history


def save_history(path, history: Sequence[EpochLog]) -> None:
    write_atomic(path, history_csv(history))
