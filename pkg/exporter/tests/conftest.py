import numpy as np
import pytest
from PIL import Image, ImageDraw


def render_frame(step: int, total: int, seed: int, size=64) -> Image.Image:
    """A block sliding toward a goal marker, with seeded pixel noise —
    content that actually changes frame to frame."""
    rng = np.random.default_rng(seed * 1000 + step)
    noise = rng.integers(0, 60, size=(size, size, 3), dtype=np.uint8)
    img = Image.fromarray(noise, "RGB")
    draw = ImageDraw.Draw(img)
    goal_x = size - 12
    draw.rectangle([goal_x, 24, goal_x + 8, 40], fill=(0, 200, 0))
    frac = step / max(total - 1, 1)
    x = int(4 + frac * (goal_x - 12))
    draw.rectangle([x, 26, x + 8, 38], fill=(220, 40, 40))
    return img


@pytest.fixture
def image_corpus(tmp_path):
    """Three trajectory folders of rendered PNG frames plus task text."""
    root = tmp_path / "corpus"
    lengths = {"traj_a": 6, "traj_b": 8, "traj_c": 5}
    for seed, (name, n) in enumerate(lengths.items()):
        d = root / name
        d.mkdir(parents=True)
        (d / "task.txt").write_text(f"push the red block to the goal ({name})\n")
        for t in range(n):
            render_frame(t, n, seed).save(d / f"{t:03d}.png")
    return root, lengths
