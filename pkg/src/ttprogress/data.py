"""Trajectory container I/O, dataset manifests, and the seeded synthetic
benchmark generator covering environment/embodiment distribution shifts.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.linalg import expm

__all__ = [
    "TrajectoryRecord",
    "SynthSpec",
    "DataFormatError",
    "BadMagicError",
    "TruncationError",
    "DimensionError",
    "save_container",
    "load_container",
    "write_manifest",
    "read_manifest",
    "synth_generate",
    "CONTAINER_MAGIC",
]

CONTAINER_MAGIC = b"TTPE"
CONTAINER_VERSION = 1


class DataFormatError(Exception):
    """Base class for container/manifest format problems."""

    code = "format"


class BadMagicError(DataFormatError):
    code = "magic"


class TruncationError(DataFormatError):
    code = "truncated"


class DimensionError(DataFormatError):
    code = "dims"


@dataclass
class TrajectoryRecord:
    """One expert demonstration: frame embeddings, goal embedding, labels."""

    id: str
    task_text: str
    dataset_tag: str
    goal_embedding: np.ndarray
    visual_embeddings: np.ndarray  # T x d
    labels: np.ndarray | None = None  # t/T for t = 1..T when present

    def __post_init__(self):
        self.goal_embedding = np.asarray(self.goal_embedding, dtype=np.float64)
        self.visual_embeddings = np.asarray(self.visual_embeddings, dtype=np.float64)
        if self.visual_embeddings.ndim != 2:
            raise DimensionError(f"trajectory {self.id}: visual embeddings must be T x d")
        if self.visual_embeddings.shape[1] != self.goal_embedding.shape[0]:
            raise DimensionError(
                f"trajectory {self.id}: frame dim {self.visual_embeddings.shape[1]} "
                f"!= goal dim {self.goal_embedding.shape[0]}")
        if self.T < 1:
            raise DimensionError(f"trajectory {self.id}: empty trajectory")
        if not (np.all(np.isfinite(self.goal_embedding)) and np.all(np.isfinite(self.visual_embeddings))):
            raise ValueError(f"trajectory {self.id}: non-finite embeddings")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.float64)
            if self.labels.shape != (self.T,):
                raise DimensionError(f"trajectory {self.id}: labels shape {self.labels.shape}")

    @property
    def T(self) -> int:
        return self.visual_embeddings.shape[0]

    @property
    def d(self) -> int:
        return self.goal_embedding.shape[0]

    @staticmethod
    def progress_labels(T: int) -> np.ndarray:
        return np.arange(1, T + 1, dtype=np.float64) / T


def _write_str(buf, s: str):
    raw = s.encode("utf-8")
    if len(raw) > 0xFFFF:
        raise DataFormatError("string field longer than 65535 bytes")
    buf.append(struct.pack("<H", len(raw)))
    buf.append(raw)


class _Reader:
    def __init__(self, data: bytes, context: str = ""):
        self.data = data
        self.pos = 0
        self.context = context

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise TruncationError(f"truncated file{self.context}: needed {n} bytes at offset {self.pos}")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def u16(self) -> int:
        return struct.unpack("<H", self.take(2))[0]

    def u8(self) -> int:
        return self.take(1)[0]

    def string(self) -> str:
        n = self.u16()
        raw = self.take(n)
        try:
            return raw.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise DataFormatError(
                f"invalid UTF-8 string{self.context} at offset {self.pos - n}") from exc

    def f32(self, count: int) -> np.ndarray:
        raw = self.take(4 * count)
        return np.frombuffer(raw, dtype="<f4").astype(np.float64)


def save_container(path, records) -> None:
    """Write trajectories in the TTPE binary layout (32-bit payload)."""
    records = list(records)
    if not records:
        raise DataFormatError("refusing to write an empty container")
    d = records[0].d
    parts = [CONTAINER_MAGIC, struct.pack("<III", CONTAINER_VERSION, d, len(records))]
    for rec in records:
        if rec.d != d:
            raise DimensionError(f"trajectory {rec.id}: dim {rec.d} != container dim {d}")
        _write_str(parts, rec.id)
        _write_str(parts, rec.task_text)
        _write_str(parts, rec.dataset_tag)
        parts.append(struct.pack("<IB", rec.T, 1 if rec.labels is not None else 0))
        parts.append(rec.goal_embedding.astype("<f4").tobytes())
        parts.append(rec.visual_embeddings.astype("<f4").tobytes(order="C"))
        if rec.labels is not None:
            parts.append(rec.labels.astype("<f4").tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_container(path) -> list:
    data = Path(path).read_bytes()
    r = _Reader(data)
    magic = r.take(4)
    if magic != CONTAINER_MAGIC:
        raise BadMagicError(f"bad magic {magic!r} in {path}")
    version = r.u32()
    if version != CONTAINER_VERSION:
        raise DataFormatError(f"unsupported container version {version}")
    d = r.u32()
    count = r.u32()
    records = []
    for i in range(count):
        r.context = f" (record {i})"
        rec_id = r.string()
        task_text = r.string()
        tag = r.string()
        T = r.u32()
        if T < 1:
            raise DimensionError(f"record {i}: zero-length trajectory")
        has_labels = r.u8()
        goal = r.f32(d)
        visual = r.f32(T * d).reshape(T, d)
        labels = r.f32(T) if has_labels else None
        try:
            records.append(TrajectoryRecord(rec_id, task_text, tag, goal, visual, labels))
        except DataFormatError:
            raise
        except ValueError as exc:
            raise DataFormatError(f"record {i}: {exc}") from exc
    if r.pos != len(data):
        raise DataFormatError(f"{len(data) - r.pos} trailing bytes after last record")
    return records


def write_manifest(path, entries) -> None:
    """entries: list of (split_name, file_path, shift_tag)."""
    lines = ["# split = path, shift_tag"]
    for split, fpath, tag in entries:
        lines.append(f"{split} = {fpath}, {tag}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_manifest(path):
    """Returns list of (split_name, file_path, shift_tag); paths are
    resolved relative to the manifest's directory."""
    base = Path(path).parent
    entries = []
    for lineno, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise DataFormatError(f"{path}:{lineno}: expected 'split = path, tag'")
        split, rhs = (s.strip() for s in line.split("=", 1))
        if "," not in rhs:
            raise DataFormatError(f"{path}:{lineno}: missing shift tag")
        fpath, tag = (s.strip() for s in rhs.rsplit(",", 1))
        entries.append((split, str(base / fpath), tag))
    if not entries:
        raise DataFormatError(f"{path}: empty manifest")
    return entries


@dataclass
class SynthSpec:
    """Desk-scale synthetic benchmark: tasks with smooth goal-approaching
    feature curves, environment mixing matrices, orthogonal embodiment
    transforms, and temporally correlated (AR(1)) nuisance noise.
    """

    d: int = 12
    n_tasks: int = 4
    n_train: int = 32
    n_eval: int = 24
    len_range: tuple = (20, 40)
    noise_scale: float = 1.0
    noise_rho: float = 0.6
    env_scale: float = 0.4
    shift_env_scale: float = 0.7
    embodiment_angle: float = 0.45
    seed: int = 42

    def __post_init__(self):
        if self.d < 2 or self.n_tasks < 1 or self.n_train < 1 or self.n_eval < 1:
            raise ValueError("invalid synthetic spec sizes")
        if not (2 <= self.len_range[0] <= self.len_range[1]):
            raise ValueError("length range must satisfy 2 <= lo <= hi")
        if self.noise_scale < 0 or not (0 <= self.noise_rho < 1):
            raise ValueError("invalid noise parameters")


def _task_bases(spec: SynthSpec, rng: np.random.Generator):
    """Per task: a goal embedding and an orthogonal start direction of the
    same norm, so the noiseless curve's cosine to the goal rises with t."""
    tasks = []
    for _ in range(spec.n_tasks):
        g = rng.normal(size=spec.d)
        g /= np.linalg.norm(g)
        a = rng.normal(size=spec.d)
        a -= (a @ g) * g
        a /= np.linalg.norm(a)
        tasks.append((g, a))
    return tasks


def _env_matrix(d: int, scale: float, rng: np.random.Generator) -> np.ndarray:
    return np.eye(d) + scale * rng.normal(size=(d, d)) / np.sqrt(d)


def _embodiment_rotation(d: int, angle: float, rng: np.random.Generator) -> np.ndarray:
    skew = rng.normal(size=(d, d))
    skew = (skew - skew.T) / np.sqrt(2 * d)
    return expm(angle * skew)


def _make_trajectory(spec, task_idx, tasks, A_env, R_emb, rng, tag, idx) -> TrajectoryRecord:
    g, a = tasks[task_idx]
    T = int(rng.integers(spec.len_range[0], spec.len_range[1] + 1))
    sigma = spec.noise_scale
    rho = spec.noise_rho
    n = sigma * rng.normal(size=spec.d)
    frames = np.empty((T, spec.d))
    for t in range(1, T + 1):
        p = t / T
        u = (1.0 - p) * a + p * g
        frames[t - 1] = R_emb @ (A_env @ u + n)
        n = rho * n + sigma * np.sqrt(1 - rho * rho) * rng.normal(size=spec.d)
    return TrajectoryRecord(
        id=f"{tag}-{idx:04d}",
        task_text=f"task-{task_idx}",
        dataset_tag=tag,
        goal_embedding=g,
        visual_embeddings=frames,
        labels=TrajectoryRecord.progress_labels(T),
    )


def synth_generate(spec: SynthSpec):
    """Build the benchmark bundle.

    Returns dict split_name -> (records, shift_tag). The train and id
    splits share environment matrices and the identity embodiment; the
    shifted splits use fresh environment matrices and/or a rotated
    embodiment unseen in training.
    """
    root = np.random.SeedSequence(spec.seed)
    streams = {name: np.random.default_rng(s) for name, s in zip(
        ("tasks", "envs", "embodiment", "train", "id", "es", "em", "es_em"),
        root.spawn(8))}
    tasks = _task_bases(spec, streams["tasks"])
    train_envs = [_env_matrix(spec.d, spec.env_scale, streams["envs"]) for _ in range(3)]
    shift_envs = [_env_matrix(spec.d, spec.shift_env_scale, streams["envs"]) for _ in range(3)]
    R_train = np.eye(spec.d)
    R_shift = _embodiment_rotation(spec.d, spec.embodiment_angle, streams["embodiment"])

    def make_split(tag, n, envs, R, rng):
        recs = []
        for i in range(n):
            task = int(rng.integers(spec.n_tasks))
            env = envs[int(rng.integers(len(envs)))]
            recs.append(_make_trajectory(spec, task, tasks, env, R, rng, tag, i))
        return recs

    return {
        "train": (make_split("train", spec.n_train, train_envs, R_train, streams["train"]), "ID"),
        "id": (make_split("id", spec.n_eval, train_envs, R_train, streams["id"]), "ID"),
        "es": (make_split("es", spec.n_eval, shift_envs, R_train, streams["es"]), "ES"),
        "em": (make_split("em", spec.n_eval, train_envs, R_shift, streams["em"]), "EM"),
        "es_em": (make_split("es_em", spec.n_eval, shift_envs, R_shift, streams["es_em"]), "ES&EM"),
    }
