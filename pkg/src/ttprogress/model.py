"""Progress-estimation network: fusion, projections, residual adaptation
MLP, self-supervised reconstruction loss, and the frozen prediction head.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass, fields

import numpy as np

from .autodiff import Tensor, gelu, logistic, matmul, tsum

__all__ = [
    "AdaptParams",
    "ProjectionSet",
    "HeadParams",
    "MetaParams",
    "fuse",
    "split_fused",
    "f_adapt",
    "self_loss",
    "head_forward",
    "predict",
    "pred_loss",
    "init_meta_params",
    "save_checkpoint",
    "load_checkpoint",
    "CHECKPOINT_MAGIC",
]

CHECKPOINT_MAGIC = b"TTPM"
CHECKPOINT_VERSION = 1


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


class _ParamGroup:
    """Mixin for dataclasses whose fields are arrays or graph tensors."""

    def to_tensors(self, requires_grad: bool = False):
        vals = {}
        for f in fields(self):
            v = getattr(self, f.name)
            vals[f.name] = Tensor(v.data if isinstance(v, Tensor) else v, requires_grad=requires_grad)
        return type(self)(**vals)

    def to_arrays(self):
        vals = {}
        for f in fields(self):
            v = getattr(self, f.name)
            vals[f.name] = np.array(v.data if isinstance(v, Tensor) else v, dtype=np.float64)
        return type(self)(**vals)

    def tensors(self) -> list:
        return [getattr(self, f.name) for f in fields(self)]

    def field_names(self) -> list:
        return [f.name for f in fields(self)]

    def replace_tensors(self, values) -> "_ParamGroup":
        return type(self)(**dict(zip(self.field_names(), values)))


@dataclass
class AdaptParams(_ParamGroup):
    """Weights of the residual adaptation MLP z + W2*gelu(W1*z + b1) + b2."""

    W1: object
    b1: object
    W2: object
    b2: object


@dataclass
class ProjectionSet(_ParamGroup):
    """Query/key/value projections from fused inputs to adaptation space."""

    P_Q: object
    P_K: object
    P_V: object


@dataclass
class HeadParams(_ParamGroup):
    """Two-layer MLP head with GELU hidden layer and logistic output."""

    W1: object
    b1: object
    w2: object
    b2: object


@dataclass
class MetaParams:
    """All meta-learned weights plus the dimension bookkeeping.

    ``theta0`` is the per-trajectory initialization of the adaptation
    module; projections and head stay frozen at inference time.
    """

    theta0: AdaptParams
    proj: ProjectionSet
    head: HeadParams
    d: int
    dprime: int
    d_head: int

    @property
    def fused_dim(self) -> int:
        return 2 * self.d

    def to_arrays(self) -> "MetaParams":
        return MetaParams(
            self.theta0.to_arrays(), self.proj.to_arrays(), self.head.to_arrays(),
            self.d, self.dprime, self.d_head,
        )

    def flat_arrays(self) -> list:
        out = []
        for group in (self.theta0, self.proj, self.head):
            out.extend(np.asarray(t.data if isinstance(t, Tensor) else t) for t in group.tensors())
        return out


def fuse(visual: np.ndarray, goal: np.ndarray) -> np.ndarray:
    """Concatenate a frame embedding with the goal embedding, visual first."""
    visual = np.asarray(visual, dtype=np.float64)
    goal = np.asarray(goal, dtype=np.float64)
    if visual.ndim != 1 or goal.ndim != 1 or visual.shape != goal.shape:
        raise ValueError(f"fuse expects matching 1-D embeddings, got {visual.shape} and {goal.shape}")
    return np.concatenate([visual, goal])


def split_fused(x: np.ndarray):
    x = np.asarray(x)
    if x.ndim != 1 or x.size % 2 != 0:
        raise ValueError("fused input must be 1-D with even length")
    d = x.size // 2
    return x[:d], x[d:]


def f_adapt(z, theta: AdaptParams) -> Tensor:
    z = _as_tensor(z)
    h = gelu(matmul(_as_tensor(theta.W1), z) + _as_tensor(theta.b1))
    return z + matmul(_as_tensor(theta.W2), h) + _as_tensor(theta.b2)


def self_loss(x, theta: AdaptParams, proj: ProjectionSet) -> Tensor:
    """Squared reconstruction error of the value projection from the key projection."""
    x = _as_tensor(x)
    recon = f_adapt(matmul(_as_tensor(proj.P_K), x), theta)
    target = matmul(_as_tensor(proj.P_V), x)
    diff = recon - target
    return tsum(diff * diff)


def head_forward(z, head: HeadParams) -> Tensor:
    z = _as_tensor(z)
    h = gelu(matmul(_as_tensor(head.W1), z) + _as_tensor(head.b1))
    return logistic(matmul(_as_tensor(head.w2), h) + _as_tensor(head.b2))


def predict(x, theta: AdaptParams, proj: ProjectionSet, head: HeadParams) -> Tensor:
    """Progress estimate in (0, 1) from an adapted query projection."""
    x = _as_tensor(x)
    return head_forward(f_adapt(matmul(_as_tensor(proj.P_Q), x), theta), head)


def pred_loss(prediction, label: float) -> Tensor:
    label = float(label)
    if not 0.0 <= label <= 1.0:
        raise ValueError(f"progress label {label} outside [0, 1]")
    diff = _as_tensor(prediction) - Tensor(label)
    return diff * diff


def init_meta_params(d: int, dprime: int = 64, d_head: int | None = None,
                     rng: np.random.Generator | None = None) -> MetaParams:
    """Initialize weights uniform in +-1/sqrt(fan-in); the adaptation MLP's
    second layer and all biases start at zero so it begins as the identity.
    """
    if d_head is None:
        d_head = dprime
    if rng is None:
        rng = np.random.default_rng(0)
    D = 2 * d

    def u(rows, cols):
        bound = 1.0 / np.sqrt(cols)
        return rng.uniform(-bound, bound, size=(rows, cols))

    theta0 = AdaptParams(
        W1=u(dprime, dprime),
        b1=np.zeros(dprime),
        W2=np.zeros((dprime, dprime)),
        b2=np.zeros(dprime),
    )
    proj = ProjectionSet(P_Q=u(dprime, D), P_K=u(dprime, D), P_V=u(dprime, D))
    head = HeadParams(
        W1=u(d_head, dprime),
        b1=np.zeros(d_head),
        w2=rng.uniform(-1.0 / np.sqrt(d_head), 1.0 / np.sqrt(d_head), size=d_head),
        b2=np.zeros(()),
    )
    return MetaParams(theta0, proj, head, d=d, dprime=dprime, d_head=d_head)


def _write_matrix(buf, arr: np.ndarray):
    arr = np.asarray(arr, dtype=np.float64)
    if arr.ndim == 0:
        rows, cols = 1, 1
    elif arr.ndim == 1:
        rows, cols = arr.shape[0], 1
    else:
        rows, cols = arr.shape
    buf.write(struct.pack("<II", rows, cols))
    buf.write(arr.astype("<f8").tobytes(order="C"))


def _read_matrix(buf, shape) -> np.ndarray:
    header = buf.read(8)
    if len(header) < 8:
        raise ValueError("truncated checkpoint: missing matrix header")
    rows, cols = struct.unpack("<II", header)
    payload = buf.read(8 * rows * cols)
    if len(payload) < 8 * rows * cols:
        raise ValueError("truncated checkpoint: missing matrix payload")
    arr = np.frombuffer(payload, dtype="<f8").reshape(rows, cols)
    if np.prod(shape, dtype=int) != rows * cols:
        raise ValueError(f"checkpoint matrix shape {(rows, cols)} incompatible with {shape}")
    return np.array(arr, dtype=np.float64).reshape(shape)


def save_checkpoint(path, meta: MetaParams) -> None:
    meta = meta.to_arrays()
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    D = meta.fused_dim
    buf.write(struct.pack("<IIIII", CHECKPOINT_VERSION, meta.d, D, meta.dprime, meta.d_head))
    for group in (meta.theta0, meta.proj, meta.head):
        for t in group.tensors():
            _write_matrix(buf, t)
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_checkpoint(path) -> MetaParams:
    with open(path, "rb") as fh:
        buf = io.BytesIO(fh.read())
    magic = buf.read(4)
    if magic != CHECKPOINT_MAGIC:
        raise ValueError(f"bad checkpoint magic {magic!r}")
    header = buf.read(20)
    if len(header) < 20:
        raise ValueError("truncated checkpoint header")
    version, d, D, dprime, d_head = struct.unpack("<IIIII", header)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    if D != 2 * d:
        raise ValueError(f"inconsistent dims in checkpoint: D={D}, d={d}")
    theta0 = AdaptParams(
        W1=_read_matrix(buf, (dprime, dprime)),
        b1=_read_matrix(buf, (dprime,)),
        W2=_read_matrix(buf, (dprime, dprime)),
        b2=_read_matrix(buf, (dprime,)),
    )
    proj = ProjectionSet(
        P_Q=_read_matrix(buf, (dprime, D)),
        P_K=_read_matrix(buf, (dprime, D)),
        P_V=_read_matrix(buf, (dprime, D)),
    )
    head = HeadParams(
        W1=_read_matrix(buf, (d_head, dprime)),
        b1=_read_matrix(buf, (d_head,)),
        w2=_read_matrix(buf, (d_head,)),
        b2=_read_matrix(buf, ()),
    )
    return MetaParams(theta0, proj, head, d=d, dprime=dprime, d_head=d_head)
