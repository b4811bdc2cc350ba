"""Online test-time adaptation: the per-step update rule and the four
memory variants (implicit, explicit window, once-per-trajectory, reset).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, add, grad, mul, no_grad
from .model import AdaptParams, MetaParams, ProjectionSet, fuse, predict, self_loss

__all__ = ["AdaptConfig", "AdaptState", "inner_update", "run_ttt", "fused_inputs"]

VARIANTS = ("IM", "EX", "TR", "RS")

DEFAULT_ETA = {"IM": 0.1, "EX": 1.0, "TR": 0.1, "RS": 0.1}
DEFAULT_K = {"IM": 0, "EX": 7, "TR": 0, "RS": 0}


@dataclass
class AdaptConfig:
    """Variant selection and inner-loop hyperparameters.

    k counts context frames before the current one, so the explicit
    variant sees a window of k+1 frames.
    """

    variant: str = "IM"
    k: int | None = None
    eta: float | None = None
    t_ep: int = 1
    carry_across_episodes: bool = False

    def __post_init__(self):
        self.variant = self.variant.upper()
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown adaptation variant {self.variant!r}")
        if self.eta is None:
            self.eta = DEFAULT_ETA[self.variant]
        if self.k is None:
            self.k = DEFAULT_K[self.variant]
        if self.variant in ("IM", "RS", "TR") and self.k != 0:
            raise ValueError(f"variant {self.variant} requires k = 0, got {self.k}")
        if self.k < 0:
            raise ValueError("window size k must be >= 0")
        if self.eta < 0:
            raise ValueError("inner learning rate must be >= 0")
        if self.t_ep < 1:
            raise ValueError("t_ep must be >= 1")


@dataclass
class AdaptState:
    """Live adaptation parameters carried across timesteps (and, when
    configured, across episode boundaries)."""

    theta: AdaptParams
    t: int = 0


def inner_update(theta: AdaptParams, window, eta: float, t_ep: int,
                 proj: ProjectionSet, create_graph: bool = False) -> AdaptParams:
    """Gradient steps on the summed self-supervised loss over the window.

    Gradients are recomputed at the start of each of the t_ep repetitions.
    With ``create_graph`` the returned parameters stay differentiable
    w.r.t. the incoming ones (for meta-training).
    """
    if len(window) == 0:
        raise ValueError("inner_update requires a non-empty window")
    if t_ep < 1:
        raise ValueError("t_ep must be >= 1")
    params = [t if isinstance(t, Tensor) else Tensor(t, requires_grad=True)
              for t in theta.tensors()]
    for p in params:
        p.requires_grad = True
    for _ in range(t_ep):
        cur = theta.replace_tensors(params)
        total = None
        for x in window:
            term = self_loss(x, cur, proj)
            total = term if total is None else add(total, term)
        grads = grad(total, params, create_graph=create_graph)
        step = Tensor(eta)
        params = [p - mul(step, g) for p, g in zip(params, grads)]
        if not create_graph:
            params = [Tensor(p.data, requires_grad=True) for p in params]
    return theta.replace_tensors(params)


def fused_inputs(traj) -> list:
    """Per-frame fused inputs [visual; goal] for a trajectory record."""
    return [fuse(v, traj.goal_embedding) for v in traj.visual_embeddings]


def run_ttt(traj, meta: MetaParams, cfg: AdaptConfig,
            state: AdaptState | None = None, return_state: bool = False):
    """Adapt over one trajectory and return the per-frame predictions.

    Frame t takes part in its own adaptation step before being scored.
    The projections and head are never modified. When ``state`` is given
    (implicit-memory continuation), adaptation resumes from it instead of
    the meta-learned initialization.
    """
    xs = fused_inputs(traj)
    T = len(xs)
    if T < 1:
        raise ValueError("trajectory must have at least one frame")
    theta0 = meta.theta0.to_tensors()
    proj = meta.proj.to_tensors()
    head = meta.head.to_tensors()
    preds = np.empty(T)
    if cfg.variant == "TR":
        theta_star = inner_update(theta0, xs, cfg.eta, cfg.t_ep, proj)
        with no_grad():
            for t, x in enumerate(xs):
                preds[t] = predict(x, theta_star, proj, head).item()
        final = AdaptState(theta_star.to_arrays(), T)
    elif cfg.variant == "IM":
        theta = state.theta.to_tensors() if state is not None else theta0
        for t, x in enumerate(xs):
            theta = inner_update(theta, [x], cfg.eta, cfg.t_ep, proj)
            with no_grad():
                preds[t] = predict(x, theta, proj, head).item()
        final = AdaptState(theta.to_arrays(), (state.t if state else 0) + T)
    else:  # EX and RS re-adapt from the initialization each step
        for t, x in enumerate(xs):
            lo = max(0, t - cfg.k)
            theta_t = inner_update(theta0, xs[lo:t + 1], cfg.eta, cfg.t_ep, proj)
            with no_grad():
                preds[t] = predict(x, theta_t, proj, head).item()
        final = AdaptState(theta0.to_arrays(), T)
    if return_state:
        return preds, final
    return preds
