"""Common interface of the frame-level video models."""

from typing import Any, Dict, Optional

import numpy as np

from src.models.classifier import bce_loss
from src.tensor.core import Tensor, as_tensor, reshape, sigmoid
from src.tensor.module import Module
from src.utils.errors import ShapeError


def as_frames(frames) -> Tensor:
    """Frames as a (batch, frames, features) tensor; a single (frames, features) matrix gets a batch axis."""
    frames = as_tensor(frames)
    if frames.ndim == 2:
        frames = reshape(frames, (1,) + frames.shape)
    if frames.ndim != 3:
        raise ShapeError(f"expected (batch, frames, features), got {frames.shape}")
    if frames.shape[1] == 0:
        raise ShapeError("empty frame sequence")
    return frames


class VideoModel(Module):
    """Frames (B, I, D_v + D_a) -> class logits (B, C)."""

    family = ""
    # Models that only accept one sequence length (concat pooling) set this
    fixed_length: Optional[int] = None

    def __init__(self, prefix: str, visual_dim: int, audio_dim: int, num_classes: int):
        super().__init__(prefix)
        self.visual_dim = visual_dim
        self.audio_dim = audio_dim
        self.num_classes = num_classes

    @property
    def feature_dim(self) -> int:
        return self.visual_dim + self.audio_dim

    def check_frames(self, frames) -> Tensor:
        frames = as_frames(frames)
        if frames.shape[-1] != self.feature_dim:
            raise ShapeError(f"{self.family} expects {self.feature_dim} features per frame, got {frames.shape[-1]}")
        return frames

    def logits(self, frames) -> Tensor:
        raise NotImplementedError

    def __call__(self, frames) -> Tensor:
        return sigmoid(self.logits(frames))

    def loss(self, frames, labels, mask=None) -> Tensor:
        return bce_loss(self(frames), labels, mask)

    def predict(self, frames) -> np.ndarray:
        """Class probabilities without recording a graph."""
        return self(frames).data

    def config_dict(self) -> Dict[str, Any]:
        raise NotImplementedError

    def describe(self) -> Dict[str, Any]:
        return {
            "family": self.family,
            "visual_dim": self.visual_dim,
            "audio_dim": self.audio_dim,
            "num_classes": self.num_classes,
            "config": self.config_dict(),
        }
