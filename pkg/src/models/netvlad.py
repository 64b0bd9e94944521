"""
Gated NetVLAD video encoder.

Frames are softly assigned to K learnable anchors, residuals to the anchors
are summed over time, every cluster's J-vector is L2-normalized, and the
flattened descriptor goes through a hidden projection, context gating, the
classifier head and a second context gate on the head's logits.
"""

from typing import Any, Dict

import numpy as np
from pydantic import BaseModel, Field

from src.models.base import VideoModel
from src.models.classifier import build_head
from src.tensor.core import Tensor, as_tensor, l2_normalize, reshape, sigmoid, softmax, swapaxes, tsum
from src.tensor.module import Module
from src.utils.config import NORM_EPS
from src.utils.errors import ShapeError


class NetVladConfig(BaseModel):
    """Gated NetVLAD hyperparameters (desk-scale defaults)"""
    clusters: int = Field(default=16, ge=1)
    hidden_size: int = Field(default=128, ge=1)
    classifier: str = "moe"
    num_experts: int = Field(default=2, ge=1)
    eps: float = Field(default=NORM_EPS, gt=0)


def soft_assign(frames, assign_w: Tensor, assign_b: Tensor) -> Tensor:
    """(..., I, J) -> (..., I, K) softmax over clusters."""
    frames = as_tensor(frames)
    if frames.shape[-1] != assign_w.shape[0]:
        raise ShapeError(f"frames have {frames.shape[-1]} features, assignment expects {assign_w.shape[0]}")
    return softmax(frames @ assign_w + assign_b, axis=-1)


def vlad_aggregate(assign: Tensor, features: Tensor, centers: Tensor, eps: float = NORM_EPS) -> Tensor:
    """
    y_jk = sum_i a_ik (x_ij - c_kj), normalized over j for every cluster k.

    assign (..., N, K), features (..., N, D), centers (K, D) -> (..., D, K).
    """
    if features.shape[-2] == 0:
        raise ShapeError("empty frame sequence")
    weighted = swapaxes(assign, -1, -2) @ features
    mass = swapaxes(tsum(assign, axis=-2, keepdims=True), -1, -2)
    vlad = swapaxes(weighted - mass * centers, -1, -2)
    return l2_normalize(vlad, axis=-2, eps=eps)


def context_gate(y, weight: Tensor, bias: Tensor) -> Tensor:
    """z = sigmoid(y W + b) * y."""
    y = as_tensor(y)
    if y.shape[-1] != weight.shape[0]:
        raise ShapeError(f"context gate expects {weight.shape[0]} inputs, got {y.shape[-1]}")
    return sigmoid(y @ weight + bias) * y


class NetVladEncoder(Module):
    """Cluster anchors and assignment weights."""

    def __init__(self, prefix: str, feature_dim: int, clusters: int, rng: np.random.Generator, eps: float = NORM_EPS):
        super().__init__(prefix)
        self.feature_dim = feature_dim
        self.clusters = clusters
        self.eps = eps
        self.centers = self.uniform_param("centers", (clusters, feature_dim), rng, fan_in=feature_dim)
        self.assign_w = self.uniform_param("assign_w", (feature_dim, clusters), rng)
        self.assign_b = self.uniform_param("assign_b", (clusters,), rng, fan_in=feature_dim)

    def encode(self, frames) -> Tensor:
        frames = as_tensor(frames)
        if frames.shape[-2] == 0:
            raise ShapeError("empty frame sequence")
        assign = soft_assign(frames, self.assign_w, self.assign_b)
        return vlad_aggregate(assign, frames, self.centers, self.eps)


def netvlad_encode(frames, encoder: NetVladEncoder) -> Tensor:
    return encoder.encode(frames)


class GatedNetVladModel(VideoModel):
    family = "netvlad"

    def __init__(self, visual_dim: int, audio_dim: int, num_classes: int, config: NetVladConfig, rng: np.random.Generator):
        super().__init__("netvlad", visual_dim, audio_dim, num_classes)
        self.config = config
        J, K, H = self.feature_dim, config.clusters, config.hidden_size
        self.encoder = self.add_module("encoder", NetVladEncoder("netvlad", J, K, rng, config.eps))
        self.hidden_w = self.uniform_param("hidden_w", (J * K, H), rng)
        self.hidden_b = self.uniform_param("hidden_b", (H,), rng, fan_in=J * K)
        self.cg_w = self.uniform_param("cg_w", (H, H), rng)
        self.cg_b = self.uniform_param("cg_b", (H,), rng, fan_in=H)
        head = build_head(config.classifier, f"netvlad/{config.classifier}", H, num_classes, config.num_experts, rng)
        self.head = self.add_module("head", head)
        self.out_cg_w = self.uniform_param("out_cg_w", (num_classes, num_classes), rng)
        self.out_cg_b = self.uniform_param("out_cg_b", (num_classes,), rng, fan_in=num_classes)

    def video_vector(self, frames) -> Tensor:
        frames = self.check_frames(frames)
        descriptor = self.encoder.encode(frames)
        flat = reshape(descriptor, (descriptor.shape[0], -1))
        hidden = flat @ self.hidden_w + self.hidden_b
        return context_gate(hidden, self.cg_w, self.cg_b)

    def logits(self, frames) -> Tensor:
        head_logits = self.head.logits(self.video_vector(frames))
        return context_gate(head_logits, self.out_cg_w, self.out_cg_b)

    def config_dict(self) -> Dict[str, Any]:
        return self.config.model_dump()


def gated_netvlad_forward(frames, model: GatedNetVladModel) -> np.ndarray:
    return model.predict(frames)
