"""Frozen image/text encoders.

Two backends share one interface:

- ``clip-vit-b32``: the pretrained contrastive vision-language model via
  ``transformers`` (requires the checkpoint to be resolvable, i.e. a hub
  connection or a local cache).
- ``hashed-pixel-512``: a deterministic offline fallback — images are
  downsampled and passed through a fixed random projection, text is hashed
  into a seeded random vector. It carries no semantics but is reproducible
  byte-for-byte anywhere, which keeps the export pipeline and its
  integration tests runnable without downloadable weights.
"""

from __future__ import annotations

import hashlib

import numpy as np
from PIL import Image

__all__ = ["get_encoder", "ENCODER_IDS", "EncoderError"]


class EncoderError(Exception):
    pass


class HashedPixelEncoder:
    """Deterministic stand-in encoder (no pretrained weights).

    Images: resize to 32x32 RGB, scale to [0, 1], apply a fixed Gaussian
    projection and tanh. Text: a Gaussian vector seeded by the SHA-256 of
    the UTF-8 bytes. Same inputs always produce the same vectors.
    """

    def __init__(self, dim: int = 512):
        self.dim = dim
        self.name = f"hashed-pixel-{dim}"
        rng = np.random.default_rng(np.random.SeedSequence(
            int.from_bytes(hashlib.sha256(self.name.encode()).digest()[:8], "big")))
        n_px = 32 * 32 * 3
        self._W = rng.normal(size=(dim, n_px)) / np.sqrt(n_px)
        self._b = 0.01 * rng.normal(size=dim)

    def encode_images(self, images) -> np.ndarray:
        out = np.empty((len(images), self.dim))
        for i, img in enumerate(images):
            arr = np.asarray(img.convert("RGB").resize((32, 32), Image.BILINEAR),
                             dtype=np.float64).ravel() / 255.0
            out[i] = np.tanh(self._W @ arr + self._b)
        return out

    def encode_text(self, text: str) -> np.ndarray:
        if not text.strip():
            raise EncoderError("empty task text")
        digest = hashlib.sha256(text.encode("utf-8")).digest()
        rng = np.random.default_rng(np.random.SeedSequence(
            int.from_bytes(digest[:8], "big")))
        return rng.normal(size=self.dim)


class ClipEncoder:
    """OpenAI-pretrained ViT-B/32 contrastive encoder via transformers."""

    CHECKPOINT = "openai/clip-vit-base-patch32"

    def __init__(self):
        try:
            from transformers import CLIPModel, CLIPProcessor
            self._model = CLIPModel.from_pretrained(self.CHECKPOINT)
            self._proc = CLIPProcessor.from_pretrained(self.CHECKPOINT)
        except Exception as exc:
            raise EncoderError(
                f"cannot load {self.CHECKPOINT} (no hub access or cache?): {exc}"
            ) from exc
        self._model.eval()
        self.dim = int(self._model.config.projection_dim)
        self.name = "clip-vit-b32"

    def encode_images(self, images) -> np.ndarray:
        import torch
        inputs = self._proc(images=[img.convert("RGB") for img in images],
                            return_tensors="pt")
        with torch.no_grad():
            feats = self._model.get_image_features(**inputs)
        return feats.double().numpy()

    def encode_text(self, text: str) -> np.ndarray:
        if not text.strip():
            raise EncoderError("empty task text")
        import torch
        inputs = self._proc(text=[text], return_tensors="pt", padding=True)
        with torch.no_grad():
            feats = self._model.get_text_features(**inputs)
        return feats.double().numpy()[0]


ENCODER_IDS = ("clip-vit-b32", "hashed-pixel-512")


def get_encoder(encoder_id: str):
    if encoder_id == "clip-vit-b32":
        return ClipEncoder()
    if encoder_id.startswith("hashed-pixel-"):
        try:
            dim = int(encoder_id.rsplit("-", 1)[1])
        except ValueError:
            raise EncoderError(f"bad encoder id {encoder_id!r}")
        if dim < 1:
            raise EncoderError("encoder dim must be positive")
        return HashedPixelEncoder(dim)
    raise EncoderError(f"unknown encoder {encoder_id!r} (known: {ENCODER_IDS})")
