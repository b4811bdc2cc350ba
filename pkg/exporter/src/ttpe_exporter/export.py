"""Convert per-trajectory frame folders into a TTPE container.

Input layout::

    input_dir/
        traj_a/
            task.txt          # one line of task text
            000.png 001.png … # frames, ordered by filename
        traj_b/
            …

Embeddings are stored raw (unnormalized); consumers normalize if they
need cosine geometry. Subsampling keeps the last frame so the final label
stays exactly 1; labels are computed from the original frame indices.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

from ttprogress.data import TrajectoryRecord, save_container

from .encoders import get_encoder

__all__ = ["ExportJob", "ExportError", "export", "export_baseline_prompt",
           "subsample_indices"]

IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".gif", ".webp"}


class ExportError(Exception):
    pass


@dataclass
class ExportJob:
    input_dir: str
    output_path: str
    encoder_id: str = "clip-vit-b32"
    stride: int = 1
    dataset_tag: str = "export"
    skip_bad_frames: bool = False

    def __post_init__(self):
        if self.stride < 1:
            raise ExportError("stride must be >= 1")


def subsample_indices(n: int, stride: int) -> list:
    """Every stride-th frame, always including the last one."""
    idx = list(range(0, n, stride))
    if idx[-1] != n - 1:
        idx.append(n - 1)
    return idx


def _load_frames(traj_dir: Path, skip_bad: bool):
    paths = sorted(p for p in traj_dir.iterdir()
                   if p.suffix.lower() in IMAGE_SUFFIXES)
    frames, kept = [], []
    for p in paths:
        try:
            with Image.open(p) as img:
                frames.append(img.convert("RGB"))
            kept.append(p)
        except (UnidentifiedImageError, OSError) as exc:
            if not skip_bad:
                raise ExportError(f"undecodable frame {p}: {exc}") from exc
            warnings.warn(f"skipping undecodable frame {p}: {exc}")
    return frames


def export(job: ExportJob) -> list:
    """Encode every trajectory folder and write one TTPE container.

    Returns the written TrajectoryRecords.
    """
    root = Path(job.input_dir)
    if not root.is_dir():
        raise ExportError(f"input directory {root} not found")
    traj_dirs = sorted(p for p in root.iterdir() if p.is_dir())
    if not traj_dirs:
        raise ExportError(f"no trajectory folders under {root}")
    encoder = get_encoder(job.encoder_id)
    records = []
    for traj_dir in traj_dirs:
        task_file = traj_dir / "task.txt"
        if not task_file.is_file():
            raise ExportError(f"{traj_dir} has no task.txt")
        task_text = task_file.read_text(encoding="utf-8").strip()
        frames = _load_frames(traj_dir, job.skip_bad_frames)
        if not frames:
            raise ExportError(f"{traj_dir} has no decodable frames")
        n = len(frames)
        idx = subsample_indices(n, job.stride)
        visual = encoder.encode_images([frames[i] for i in idx])
        goal = encoder.encode_text(task_text)
        labels = np.array([(i + 1) / n for i in idx])
        records.append(TrajectoryRecord(
            id=traj_dir.name, task_text=task_text, dataset_tag=job.dataset_tag,
            goal_embedding=goal, visual_embeddings=visual, labels=labels))
    save_container(job.output_path, records)
    return records


def export_baseline_prompt(text: str, encoder_id: str, output_path) -> np.ndarray:
    """Write the reference-prompt embedding as a plain text vector file."""
    encoder = get_encoder(encoder_id)
    vec = encoder.encode_text(text)
    np.savetxt(output_path, vec)
    return vec
