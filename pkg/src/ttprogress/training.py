"""Meta-training: dissimilarity-based window sampling, the unrolled
adaptation objective, AdamW, and the cosine warmup schedule.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields
from itertools import combinations
from pathlib import Path

import numpy as np
from scipy.spatial.distance import squareform, pdist

from .autodiff import Tensor, add, grad, mul
from .model import (MetaParams, init_meta_params, pred_loss,
                    predict, self_loss)
from .adaptation import fused_inputs

__all__ = [
    "TrainConfig",
    "Window",
    "NumericalError",
    "candidate_windows",
    "select_diverse",
    "window_loss",
    "window_terms",
    "adamw_step",
    "AdamWState",
    "cosine_lr",
    "train",
]

EXACT_SELECTION_BUDGET = 100_000


class NumericalError(RuntimeError):
    """Raised when training produces a non-finite loss or gradient."""


@dataclass
class TrainConfig:
    lambda_self: float = 0.5
    w_tr: int = 8
    stride: int = 4
    b: int = 8
    lr: float = 1e-4
    weight_decay: float = 1e-4
    warmup_frac: float = 0.1
    epochs: int = 5
    batch_size: int = 32
    max_len: int = 120
    seed: int = 0
    meta_grad_mode: str = "exact"
    selection: str = "exact"
    dissim_feature: str = "flat"
    eta_inner: float = 0.1
    t_ep_inner: int = 1
    dprime: int = 64
    d_head: int = 0  # 0 means "same as dprime"

    def __post_init__(self):
        if self.lambda_self < 0 or self.w_tr < 1 or self.stride < 1 or self.b < 1 or self.batch_size < 1:
            raise ValueError("invalid training configuration")
        if self.meta_grad_mode not in ("exact", "first_order"):
            raise ValueError(f"unknown meta_grad_mode {self.meta_grad_mode!r}")
        if self.selection not in ("exact", "greedy"):
            raise ValueError(f"unknown selection mode {self.selection!r}")
        if self.dissim_feature not in ("flat", "mean"):
            raise ValueError(f"unknown dissim_feature {self.dissim_feature!r}")

    @classmethod
    def from_file(cls, path) -> "TrainConfig":
        """Parse a flat `key = value` config file; unknown keys are errors."""
        known = {f.name: f.type for f in fields(cls)}
        kwargs = {}
        for lineno, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected 'key = value'")
            key, value = (s.strip() for s in line.split("=", 1))
            if key not in known:
                raise ValueError(f"{path}:{lineno}: unknown config key {key!r}")
            kwargs[key] = value
        typed = {}
        proto = cls()
        for key, value in kwargs.items():
            current = getattr(proto, key)
            if isinstance(current, bool):
                typed[key] = value.lower() in ("1", "true", "yes")
            elif isinstance(current, int):
                typed[key] = int(value)
            elif isinstance(current, float):
                typed[key] = float(value)
            else:
                typed[key] = value
        return cls(**typed)


@dataclass
class Window:
    """Fixed-length sub-trajectory with its labels and validity mask."""

    traj_id: str
    start: int  # 0-based frame index into the trajectory
    frames: list  # fused inputs, one per frame
    labels: np.ndarray
    mask: np.ndarray

    @property
    def length(self) -> int:
        return len(self.frames)

    def feature(self, mode: str = "flat") -> np.ndarray:
        stacked = np.stack(self.frames)
        if mode == "mean":
            return stacked.mean(axis=0)
        return stacked.reshape(-1)


def candidate_windows(traj, w_tr: int, s: int, max_len: int | None = None) -> list:
    """Sliding windows of length w_tr with stride s, in ascending start
    order. A trajectory shorter than w_tr yields one whole-trajectory
    window instead of being dropped.
    """
    if traj.labels is None:
        raise ValueError(f"trajectory {traj.id} has no labels")
    xs = fused_inputs(traj)
    labels = traj.labels
    if max_len is not None and len(xs) > max_len:
        xs = xs[:max_len]
        labels = labels[:max_len]
    T = len(xs)
    if T < w_tr:
        return [Window(traj.id, 0, xs, np.asarray(labels), np.ones(T))]
    out = []
    start = 0
    while start + w_tr <= T:
        out.append(Window(traj.id, start, xs[start:start + w_tr],
                          np.asarray(labels[start:start + w_tr]), np.ones(w_tr)))
        start += s
    return out


def select_diverse(candidates: list, b: int, mode: str = "exact",
                   feature_mode: str = "flat") -> list:
    """Pick min(b, n) windows maximizing total pairwise squared distance.

    Exact mode enumerates subsets (falling back to greedy past the
    combination budget); ties break toward lexicographically-first start
    indices. Greedy seeds with the farthest pair, then adds the candidate
    with the largest summed squared distance to the chosen set.
    """
    n = len(candidates)
    if b >= n:
        return list(candidates)
    feats = np.stack([w.feature(feature_mode) for w in candidates])
    d2 = squareform(pdist(feats, "sqeuclidean")) if n > 1 else np.zeros((1, 1))
    if mode == "exact" and math.comb(n, b) <= EXACT_SELECTION_BUDGET:
        best_idx, best_obj = None, -np.inf
        for idx in combinations(range(n), b):
            obj = sum(d2[i][j] for i, j in combinations(idx, 2))
            if obj > best_obj:
                best_obj, best_idx = obj, idx
        return [candidates[i] for i in best_idx]
    if b == 1:
        return [candidates[0]]
    seed_i, seed_j = np.unravel_index(np.argmax(d2), d2.shape)
    chosen = sorted((int(seed_i), int(seed_j)))
    remaining = [i for i in range(n) if i not in chosen]
    while len(chosen) < b:
        gains = [d2[i, chosen].sum() for i in remaining]
        pick = remaining[int(np.argmax(gains))]
        chosen.append(pick)
        remaining.remove(pick)
    return [candidates[i] for i in sorted(chosen)]


def _meta_tensors(meta: MetaParams) -> MetaParams:
    return MetaParams(
        meta.theta0.to_tensors(requires_grad=True),
        meta.proj.to_tensors(requires_grad=True),
        meta.head.to_tensors(requires_grad=True),
        meta.d, meta.dprime, meta.d_head,
    )


def window_loss(window: Window, meta: MetaParams, cfg: TrainConfig) -> Tensor:
    """Unrolled objective over one window.

    Sequential implicit-memory adaptation from the meta initialization:
    each live frame first updates the adaptation parameters on its own
    self-supervised loss, then is scored. Returns mean prediction error
    plus lambda times the mean pre-update self-loss; differentiable
    through the inner updates when meta_grad_mode is exact.
    """
    total_pred, total_self = window_terms(window, meta, cfg)
    return total_pred + Tensor(cfg.lambda_self) * total_self


def window_terms(window: Window, meta: MetaParams, cfg: TrainConfig):
    """Mean prediction-error and self-loss tensors for one window."""
    exact = cfg.meta_grad_mode == "exact"
    proj, head = meta.proj, meta.head
    theta_params = list(meta.theta0.tensors())
    pred_terms, self_terms = [], []
    for x, y, m in zip(window.frames, window.labels, window.mask):
        if m == 0:
            continue
        xt = Tensor(x)
        first_sl = None
        for _ in range(cfg.t_ep_inner):
            cur = meta.theta0.replace_tensors(theta_params)
            sl = self_loss(xt, cur, proj)
            if first_sl is None:
                first_sl = sl
            if cfg.eta_inner != 0.0:
                grads = grad(sl, theta_params, create_graph=exact)
                if not exact:
                    grads = [Tensor(g.data) for g in grads]
                eta = Tensor(cfg.eta_inner)
                theta_params = [p - mul(eta, g) for p, g in zip(theta_params, grads)]
        theta_t = meta.theta0.replace_tensors(theta_params)
        pred_terms.append(pred_loss(predict(xt, theta_t, proj, head), float(y)))
        self_terms.append(first_sl)
    if not pred_terms:
        raise ValueError("window contains no live frames")
    inv = Tensor(1.0 / len(pred_terms))
    return _sum_tensors(pred_terms) * inv, _sum_tensors(self_terms) * inv


def _sum_tensors(terms):
    total = terms[0]
    for t in terms[1:]:
        total = add(total, t)
    return total


@dataclass
class AdamWState:
    m: list
    v: list
    step: int = 0

    @classmethod
    def init(cls, params) -> "AdamWState":
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params])


def adamw_step(params, grads, state: AdamWState, lr: float, wd: float = 0.0,
               beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
    """One decoupled-weight-decay Adam step with bias correction."""
    state.step += 1
    t = state.step
    bc1 = 1.0 - beta1 ** t
    bc2 = 1.0 - beta2 ** t
    out = []
    for i, (p, g) in enumerate(zip(params, grads)):
        state.m[i] = beta1 * state.m[i] + (1 - beta1) * g
        state.v[i] = beta2 * state.v[i] + (1 - beta2) * g * g
        m_hat = state.m[i] / bc1
        v_hat = state.v[i] / bc2
        p = p * (1.0 - lr * wd)
        out.append(p - lr * m_hat / (np.sqrt(v_hat) + eps))
    return out, state


def cosine_lr(step: int, total_steps: int, warmup_frac: float, peak: float) -> float:
    """Linear ramp to the peak over the warmup, then cosine decay to zero."""
    if not 0 <= step <= total_steps:
        raise ValueError("step outside [0, total_steps]")
    warmup = warmup_frac * total_steps
    if warmup > 0 and step < warmup:
        return peak * step / warmup
    if total_steps == warmup:
        return peak if step == warmup else 0.0
    return peak * 0.5 * (1.0 + math.cos(math.pi * (step - warmup) / (total_steps - warmup)))


def _flatten_meta(meta: MetaParams):
    groups = (meta.theta0, meta.proj, meta.head)
    tensors = []
    for g in groups:
        tensors.extend(g.tensors())
    return tensors


def _rebuild_meta(meta: MetaParams, arrays) -> MetaParams:
    n_theta = len(meta.theta0.tensors())
    n_proj = len(meta.proj.tensors())
    theta = meta.theta0.replace_tensors(arrays[:n_theta])
    proj = meta.proj.replace_tensors(arrays[n_theta:n_theta + n_proj])
    head = meta.head.replace_tensors(arrays[n_theta + n_proj:])
    return MetaParams(theta, proj, head, meta.d, meta.dprime, meta.d_head)


def train(dataset, cfg: TrainConfig, seed: int | None = None,
          init: MetaParams | None = None, log_fn=None):
    """Meta-train on labeled trajectories; returns (MetaParams, log).

    Per trajectory, candidate windows are sampled and filtered by
    dissimilarity selection; batch gradients are accumulated in dataset
    order and applied with AdamW under a cosine warmup schedule.
    """
    dataset = list(dataset)
    if not dataset:
        raise ValueError("empty training dataset")
    if seed is None:
        seed = cfg.seed
    root = np.random.SeedSequence(seed)
    init_rng, shuffle_rng = (np.random.default_rng(s) for s in root.spawn(2))
    d = dataset[0].d
    d_head = cfg.d_head or cfg.dprime
    meta = init if init is not None else init_meta_params(d, cfg.dprime, d_head, init_rng)
    meta = meta.to_arrays()
    params = [np.asarray(t, dtype=np.float64) for t in _flatten_meta(meta)]
    opt_state = AdamWState.init(params)
    n = len(dataset)
    steps_per_epoch = (n + cfg.batch_size - 1) // cfg.batch_size
    total_steps = cfg.epochs * steps_per_epoch
    window_cache = {
        rec.id: select_diverse(candidate_windows(rec, cfg.w_tr, cfg.stride, cfg.max_len),
                               cfg.b, cfg.selection, cfg.dissim_feature)
        for rec in dataset
    }
    log = []
    step = 0
    for epoch in range(cfg.epochs):
        order = shuffle_rng.permutation(n)
        epoch_pred, epoch_self, epoch_lr = [], [], []
        for bstart in range(0, n, cfg.batch_size):
            batch = [dataset[i] for i in order[bstart:bstart + cfg.batch_size]]
            lr = cosine_lr(step + 1, total_steps, cfg.warmup_frac, cfg.lr)
            meta_t = _meta_tensors(_rebuild_meta(meta, params))
            leaves = _flatten_meta(meta_t)
            pred_parts, self_parts = [], []
            for rec in batch:
                for w in window_cache[rec.id]:
                    tp, ts = window_terms(w, meta_t, cfg)
                    pred_parts.append(tp)
                    self_parts.append(ts)
            inv = Tensor(1.0 / len(pred_parts))
            mean_pred = _sum_tensors(pred_parts) * inv
            mean_self = _sum_tensors(self_parts) * inv
            total = mean_pred + Tensor(cfg.lambda_self) * mean_self
            if not np.isfinite(total.data):
                raise NumericalError(f"non-finite loss at step {step} (epoch {epoch})")
            grads = [g.data for g in grad(total, leaves)]
            if any(not np.all(np.isfinite(g)) for g in grads):
                raise NumericalError(f"non-finite gradient at step {step} (epoch {epoch})")
            params, opt_state = adamw_step(params, grads, opt_state, lr, cfg.weight_decay)
            step += 1
            epoch_lr.append(lr)
            epoch_pred.append(float(mean_pred.data))
            epoch_self.append(float(mean_self.data))
        entry = {
            "epoch": epoch,
            "pred_loss": float(np.mean(epoch_pred)),
            "self_loss": float(np.mean(epoch_self)),
            "lr": float(np.mean(epoch_lr)),
        }
        log.append(entry)
        if log_fn is not None:
            log_fn(entry)
    return _rebuild_meta(meta, params), log
