"""Rank-correlation metric, similarity/regression baselines, and report
aggregation across distribution-shift splits.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import rankdata

from .adaptation import AdaptConfig, run_ttt
from .autodiff import Tensor, grad, no_grad
from .model import MetaParams, head_forward, init_meta_params
from .training import AdamWState, TrainConfig, adamw_step, cosine_lr

__all__ = [
    "spearman_voc",
    "clip_similarity",
    "vlmrm_projection",
    "ClipFtModel",
    "train_clipft",
    "EvalReport",
    "SplitResult",
    "evaluate_split",
    "evaluate",
    "render_report",
    "TTT_ESTIMATORS",
    "BASELINE_ESTIMATORS",
]

TTT_ESTIMATORS = ("TTT-IM", "TTT-EX", "TTT-TR", "TTT-RS")
BASELINE_ESTIMATORS = ("CLIP", "VLM-RM", "CLIP-FT")


def spearman_voc(preds) -> float:
    """Tie-aware Spearman correlation of predictions against frame order.

    All-equal predictions have zero rank variance and score 0 (the caller
    should count such trajectories as degenerate).
    """
    preds = np.asarray(preds, dtype=np.float64)
    T = preds.shape[0]
    if T < 2:
        raise ValueError("need at least 2 frames for a rank correlation")
    if np.all(preds == preds[0]):
        return 0.0
    r = rankdata(preds, method="average")
    t = np.arange(1, T + 1, dtype=np.float64)
    rc = r - r.mean()
    tc = t - t.mean()
    return float((rc @ tc) / np.sqrt((rc @ rc) * (tc @ tc)))


def clip_similarity(traj) -> np.ndarray:
    """Per-frame cosine similarity between frame and goal embeddings."""
    goal = np.asarray(traj.goal_embedding, dtype=np.float64)
    gnorm = np.linalg.norm(goal)
    if gnorm == 0:
        raise ValueError("zero-norm goal embedding")
    out = np.empty(traj.T)
    for t, v in enumerate(np.asarray(traj.visual_embeddings, dtype=np.float64)):
        vnorm = np.linalg.norm(v)
        if vnorm == 0:
            raise ValueError(f"zero-norm frame embedding at index {t}")
        out[t] = (v @ goal) / (vnorm * gnorm)
    return out


def vlmrm_projection(traj, baseline_goal) -> np.ndarray:
    """Project normalized frame embeddings on the reference-to-goal direction."""
    goal = np.asarray(traj.goal_embedding, dtype=np.float64)
    base = np.asarray(baseline_goal, dtype=np.float64)
    g_hat = goal / np.linalg.norm(goal)
    b_hat = base / np.linalg.norm(base)
    direction = g_hat - b_hat
    dnorm = np.linalg.norm(direction)
    if dnorm == 0:
        raise ValueError("goal and baseline embeddings coincide; projection direction undefined")
    direction /= dnorm
    out = np.empty(traj.T)
    for t, v in enumerate(np.asarray(traj.visual_embeddings, dtype=np.float64)):
        vnorm = np.linalg.norm(v)
        if vnorm == 0:
            raise ValueError(f"zero-norm frame embedding at index {t}")
        out[t] = (v / vnorm) @ direction
    return out


@dataclass
class ClipFtModel:
    """Supervised regressor: the same head on an 8x wider projection,
    with no adaptation module and no self-supervised loss."""

    P: np.ndarray  # (8*dprime) x D
    head_meta: MetaParams  # head operates on 8*dprime features

    def predict_frame(self, x) -> float:
        with no_grad():
            z = Tensor(self.P @ np.asarray(x))
            return head_forward(z, self.head_meta.head.to_tensors()).item()

    def predict_trajectory(self, traj) -> np.ndarray:
        from .adaptation import fused_inputs
        return np.array([self.predict_frame(x) for x in fused_inputs(traj)])


def train_clipft(dataset, cfg: TrainConfig, seed: int | None = None, log_fn=None):
    """Train the frozen-feature regressor by plain MSE over frames.

    Uses the shared architecture minus the adaptation path, a projection
    eight times wider, and ten times the outer steps.
    """
    dataset = list(dataset)
    if not dataset:
        raise ValueError("empty training dataset")
    if seed is None:
        seed = cfg.seed
    root = np.random.SeedSequence(seed)
    init_rng, shuffle_rng = (np.random.default_rng(s) for s in root.spawn(2))
    d = dataset[0].d
    wide = 8 * cfg.dprime
    meta = init_meta_params(d, wide, cfg.d_head or cfg.dprime, init_rng).to_arrays()
    P = np.asarray(meta.proj.P_Q, dtype=np.float64)
    head_t = [np.asarray(a, dtype=np.float64) for a in meta.head.tensors()]
    params = [P] + head_t
    opt_state = AdamWState.init(params)
    n = len(dataset)
    steps_per_epoch = (n + cfg.batch_size - 1) // cfg.batch_size
    epochs = 10 * cfg.epochs
    total_steps = epochs * steps_per_epoch
    from .adaptation import fused_inputs
    frames = {rec.id: (fused_inputs(rec)[:cfg.max_len], rec.labels[:cfg.max_len]) for rec in dataset}
    log = []
    step = 0
    for epoch in range(epochs):
        order = shuffle_rng.permutation(n)
        epoch_loss = []
        for bstart in range(0, n, cfg.batch_size):
            batch = [dataset[i] for i in order[bstart:bstart + cfg.batch_size]]
            lr = cosine_lr(step + 1, total_steps, cfg.warmup_frac, cfg.lr)
            P_t = Tensor(params[0], requires_grad=True)
            head = meta.head.replace_tensors(
                [Tensor(a, requires_grad=True) for a in params[1:]])
            terms = []
            for rec in batch:
                xs, ys = frames[rec.id]
                for x, y in zip(xs, ys):
                    pred = head_forward(P_t @ Tensor(x), head)
                    diff = pred - Tensor(float(y))
                    terms.append(diff * diff)
            total = terms[0]
            for t in terms[1:]:
                total = total + t
            total = total * Tensor(1.0 / len(terms))
            leaves = [P_t] + list(head.tensors())
            grads = [g.data for g in grad(total, leaves)]
            params, opt_state = adamw_step(params, grads, opt_state, lr, cfg.weight_decay)
            epoch_loss.append(float(total.data))
            step += 1
        entry = {"epoch": epoch, "mse": float(np.mean(epoch_loss))}
        log.append(entry)
        if log_fn is not None:
            log_fn(entry)
    head_final = meta.head.replace_tensors(params[1:])
    final_meta = MetaParams(meta.theta0, meta.proj, head_final, d, wide, meta.d_head)
    return ClipFtModel(P=params[0], head_meta=final_meta), log


@dataclass
class SplitResult:
    split: str
    shift: str
    estimator: str
    voc: list
    degenerate: int

    @property
    def mean_voc(self) -> float:
        live = [v for v, deg in self.voc if not deg]
        return float(np.mean(live)) if live else 0.0

    def to_dict(self):
        return {
            "split": self.split,
            "shift": self.shift,
            "estimator": self.estimator,
            "mean_voc": self.mean_voc,
            "n_trajectories": len(self.voc),
            "degenerate": self.degenerate,
        }


@dataclass
class EvalReport:
    estimator: str
    splits: list = field(default_factory=list)

    def add(self, result: SplitResult):
        self.splits.append(result)

    def to_dict(self):
        return {"estimator": self.estimator, "splits": [s.to_dict() for s in self.splits]}


def _predict_fn(estimator: str, meta: MetaParams | None, adapt_cfg: AdaptConfig | None,
                clipft: ClipFtModel | None, baseline_goal=None):
    tag = estimator.upper()
    if tag in TTT_ESTIMATORS:
        if meta is None:
            raise ValueError(f"{tag} requires meta-learned parameters")
        cfg = adapt_cfg or AdaptConfig(variant=tag.split("-")[1])
        return lambda traj: run_ttt(traj, meta, cfg)
    if tag == "CLIP":
        return clip_similarity
    if tag == "VLM-RM":
        if baseline_goal is None:
            raise ValueError("VLM-RM requires a baseline prompt embedding")
        return lambda traj: vlmrm_projection(traj, baseline_goal)
    if tag == "CLIP-FT":
        if clipft is None:
            raise ValueError("CLIP-FT requires a trained regressor")
        return clipft.predict_trajectory
    raise ValueError(f"unknown estimator {estimator!r}")


def evaluate_split(records, predict_fn) -> tuple:
    """Per-trajectory VOC scores; returns (list of (voc, degenerate), preds)."""
    scores = []
    all_preds = []
    for rec in records:
        preds = np.asarray(predict_fn(rec), dtype=np.float64)
        degenerate = bool(np.all(preds == preds[0])) if preds.size else True
        scores.append((spearman_voc(preds), degenerate))
        all_preds.append(preds)
    return scores, all_preds


def evaluate(splits, estimator: str, meta: MetaParams | None = None,
             adapt_cfg: AdaptConfig | None = None, clipft: ClipFtModel | None = None,
             baseline_goal=None, collect_preds=None) -> EvalReport:
    """splits: list of (split_name, records, shift_tag), merged in order."""
    fn = _predict_fn(estimator, meta, adapt_cfg, clipft, baseline_goal)
    report = EvalReport(estimator=estimator.upper())
    for split_name, records, shift in splits:
        scores, preds = evaluate_split(records, fn)
        report.add(SplitResult(split_name, shift, report.estimator, scores,
                               degenerate=sum(1 for _, deg in scores if deg)))
        if collect_preds is not None:
            for rec, p in zip(records, preds):
                collect_preds(split_name, rec, p)
    return report


def render_report(reports, fmt: str = "tsv") -> str:
    """Render one row per (split, shift) and one column per estimator."""
    reports = list(reports)
    if fmt == "json":
        return json.dumps([r.to_dict() for r in reports], indent=2)
    names = [r.estimator for r in reports]
    rows = {}
    order = []
    for r in reports:
        for s in r.splits:
            key = (s.split, s.shift)
            if key not in rows:
                rows[key] = {}
                order.append(key)
            rows[key][r.estimator] = s.mean_voc
    header = ["shift", "split"] + names
    lines = []
    if fmt == "tsv":
        lines.append("\t".join(header))
        for split, shift in order:
            vals = [f"{rows[(split, shift)].get(n, float('nan')):.4f}" for n in names]
            lines.append("\t".join([shift, split] + vals))
        return "\n".join(lines)
    if fmt == "md":
        lines.append("| " + " | ".join(header) + " |")
        lines.append("|" + "---|" * len(header))
        for split, shift in order:
            vals = [f"{rows[(split, shift)].get(n, float('nan')):.4f}" for n in names]
            lines.append("| " + " | ".join([shift, split] + vals) + " |")
        return "\n".join(lines)
    raise ValueError(f"unknown report format {fmt!r}")
