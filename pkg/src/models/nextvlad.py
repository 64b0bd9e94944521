"""
NeXtVLAD encoder and the mixture of NeXtVLAD models trained with
on-the-fly distillation.

Each frame x_i (J) is expanded to lambda*J, split into G groups of
lambda*J/G, and every group vector is softly assigned to K anchors. Group
attention sigmoid(w_g . x_dot_i + b_g) scales each group's contribution.
"""

from typing import Any, Dict, List, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, Field, model_validator

from src.models.base import VideoModel
from src.models.classifier import DistillConfig, build_head, mixture_total_loss
from src.models.netvlad import vlad_aggregate
from src.tensor.core import Tensor, as_tensor, mean, relu, reshape, sigmoid, softmax, stack, tsum
from src.tensor.module import Module
from src.utils.config import NORM_EPS
from src.utils.errors import ConfigError, ShapeError


class NeXtVladConfig(BaseModel):
    """NeXtVLAD / mixture hyperparameters (desk-scale defaults)"""
    groups: int = Field(default=4, ge=1)
    clusters: int = Field(default=8, ge=1)
    expansion: int = Field(default=2, ge=1)
    hidden_size: int = Field(default=64, ge=1)
    gating_reduction: int = Field(default=16, ge=1)
    group_attention: bool = True
    classifier: str = "logistic"
    num_experts: int = Field(default=2, ge=1)
    submodels: int = Field(default=3, ge=1)
    temperature: float = Field(default=3.0, gt=0)
    detach_teacher: bool = False
    eps: float = Field(default=NORM_EPS, gt=0)

    @model_validator(mode="after")
    def _reduction_divides_hidden(self):
        if self.hidden_size % self.gating_reduction != 0:
            raise ValueError(f"gating_reduction {self.gating_reduction} must divide hidden_size {self.hidden_size}")
        return self


class NeXtVladEncoder(Module):
    def __init__(self, prefix: str, feature_dim: int, config: NeXtVladConfig, rng: np.random.Generator):
        super().__init__(prefix)
        expanded = config.expansion * feature_dim
        if expanded % config.groups != 0:
            raise ConfigError(f"expanded size {expanded} is not divisible by {config.groups} groups")
        self.feature_dim = feature_dim
        self.expansion = config.expansion
        self.groups = config.groups
        self.clusters = config.clusters
        self.group_dim = expanded // config.groups
        self.use_group_attention = config.group_attention
        self.eps = config.eps

        G, K = config.groups, config.clusters
        self.expansion_w = self.uniform_param("expansion_w", (feature_dim, expanded), rng)
        self.expansion_b = self.uniform_param("expansion_b", (expanded,), rng, fan_in=feature_dim)
        self.group_w = self.uniform_param("group_w", (expanded, G), rng)
        self.group_b = self.uniform_param("group_b", (G,), rng, fan_in=expanded)
        self.assign_w = self.uniform_param("assign_w", (expanded, G * K), rng)
        self.assign_b = self.uniform_param("assign_b", (G * K,), rng, fan_in=expanded)
        self.centers = self.uniform_param("centers", (K, self.group_dim), rng, fan_in=self.group_dim)

    def expand(self, frames) -> Tensor:
        frames = as_tensor(frames)
        if frames.shape[-1] != self.feature_dim:
            raise ShapeError(f"frames have {frames.shape[-1]} features, encoder expects {self.feature_dim}")
        return frames @ self.expansion_w + self.expansion_b

    def encode(self, frames) -> Tensor:
        """(..., I, J) -> (..., lambda*J/G, K) intra-normalized descriptor."""
        expanded = self.expand(frames)
        lead, frames_count = expanded.shape[:-2], expanded.shape[-2]
        if frames_count == 0:
            raise ShapeError("empty frame sequence")
        G, K = self.groups, self.clusters

        assign = softmax(reshape(expanded @ self.assign_w + self.assign_b, lead + (frames_count, G, K)), axis=-1)
        if self.use_group_attention:
            attention = group_attention(expanded, self)
            assign = assign * reshape(attention, lead + (frames_count, G, 1))
        assign = reshape(assign, lead + (frames_count * G, K))
        grouped = reshape(expanded, lead + (frames_count * G, self.group_dim))
        return vlad_aggregate(assign, grouped, self.centers, self.eps)


def expand_reshape(frames, encoder: NeXtVladEncoder) -> Tensor:
    """(..., I, J) -> (..., I, G, lambda*J/G)."""
    expanded = encoder.expand(frames)
    return reshape(expanded, expanded.shape[:-1] + (encoder.groups, encoder.group_dim))


def group_attention(expanded: Tensor, encoder: NeXtVladEncoder) -> Tensor:
    """alpha_g per (frame, group), in (0, 1)."""
    return sigmoid(expanded @ encoder.group_w + encoder.group_b)


def nextvlad_encode(frames, encoder: NeXtVladEncoder) -> Tensor:
    return encoder.encode(frames)


class SecgGate(Module):
    """Squeeze-excitation gate: h * sigmoid(W2 relu(W1 h + b1) + b2), bottleneck H/r."""

    def __init__(self, prefix: str, hidden_size: int, reduction: int, rng: np.random.Generator):
        super().__init__(prefix)
        if hidden_size % reduction != 0:
            raise ConfigError(f"reduction {reduction} must divide hidden size {hidden_size}")
        bottleneck = hidden_size // reduction
        self.squeeze_w = self.uniform_param("squeeze_w", (hidden_size, bottleneck), rng)
        self.squeeze_b = self.uniform_param("squeeze_b", (bottleneck,), rng, fan_in=hidden_size)
        self.excite_w = self.uniform_param("excite_w", (bottleneck, hidden_size), rng)
        self.excite_b = self.uniform_param("excite_b", (hidden_size,), rng, fan_in=bottleneck)

    def __call__(self, h) -> Tensor:
        h = as_tensor(h)
        squeezed = relu(h @ self.squeeze_w + self.squeeze_b)
        return sigmoid(squeezed @ self.excite_w + self.excite_b) * h


def secg(h, gate: SecgGate) -> Tensor:
    return gate(h)


class MixtureGate(Module):
    """Softmax weights over submodels from the frame mean."""

    def __init__(self, prefix: str, feature_dim: int, submodels: int, rng: np.random.Generator):
        super().__init__(prefix)
        self.gate_w = self.uniform_param("gate_w", (feature_dim, submodels), rng)
        self.gate_b = self.uniform_param("gate_b", (submodels,), rng, fan_in=feature_dim)

    def weights(self, frame_mean) -> Tensor:
        return softmax(as_tensor(frame_mean) @ self.gate_w + self.gate_b, axis=-1)


def mix_logits(sub_logits: Sequence[Tensor], frame_mean, mixture: MixtureGate) -> Tensor:
    """z^e = sum_m alpha_m(x_bar) z^m."""
    if len(sub_logits) != mixture.gate_b.shape[0]:
        raise ShapeError(f"{len(sub_logits)} submodel logits for a {mixture.gate_b.shape[0]}-way mixture")
    alpha = mixture.weights(frame_mean)
    stacked = stack(sub_logits, axis=-1)
    return tsum(stacked * reshape(alpha, alpha.shape[:-1] + (1, alpha.shape[-1])), axis=-1)


class NeXtVladModel(VideoModel):
    family = "nextvlad"

    def __init__(self, visual_dim: int, audio_dim: int, num_classes: int, config: NeXtVladConfig,
                 rng: np.random.Generator, prefix: str = "nextvlad"):
        super().__init__(prefix, visual_dim, audio_dim, num_classes)
        self.config = config
        self.encoder = self.add_module("encoder", NeXtVladEncoder(prefix, self.feature_dim, config, rng))
        descriptor = self.encoder.group_dim * config.clusters
        H = config.hidden_size
        self.hidden_w = self.uniform_param("hidden_w", (descriptor, H), rng)
        self.hidden_b = self.uniform_param("hidden_b", (H,), rng, fan_in=descriptor)
        self.gate = self.add_module("gate", SecgGate(f"{prefix}/secg", H, config.gating_reduction, rng))
        self.head = self.add_module(
            "head", build_head(config.classifier, f"{prefix}/{config.classifier}", H, num_classes, config.num_experts, rng)
        )

    def video_vector(self, frames) -> Tensor:
        frames = self.check_frames(frames)
        descriptor = self.encoder.encode(frames)
        flat = reshape(descriptor, (descriptor.shape[0], -1))
        return self.gate(flat @ self.hidden_w + self.hidden_b)

    def logits(self, frames) -> Tensor:
        return self.head.logits(self.video_vector(frames))

    def config_dict(self) -> Dict[str, Any]:
        return self.config.model_dump()


class MixNeXtVladModel(VideoModel):
    """M NeXtVLAD submodels mixed by a frame-mean gate; trained with the distillation loss."""

    family = "nextvlad_mix"

    def __init__(self, visual_dim: int, audio_dim: int, num_classes: int, config: NeXtVladConfig, rng: np.random.Generator):
        super().__init__("mixture", visual_dim, audio_dim, num_classes)
        self.config = config
        self.distill = DistillConfig(temperature=config.temperature, submodels=config.submodels,
                                     detach_teacher=config.detach_teacher)
        self.submodels: List[NeXtVladModel] = []
        for m in range(config.submodels):
            sub = NeXtVladModel(visual_dim, audio_dim, num_classes, config, rng, prefix=f"nextvlad/{m}")
            self.submodels.append(self.add_module(f"sub{m}", sub))
        self.mixture = self.add_module("mixture", MixtureGate("mixture", self.feature_dim, config.submodels, rng))

    def forward_all(self, frames) -> Tuple[List[Tensor], Tensor]:
        frames = self.check_frames(frames)
        sub_logits = [sub.logits(frames) for sub in self.submodels]
        ensemble = mix_logits(sub_logits, mean(frames, axis=-2), self.mixture)
        return sub_logits, ensemble

    def logits(self, frames) -> Tensor:
        return self.forward_all(frames)[1]

    def loss(self, frames, labels, mask=None) -> Tensor:
        sub_logits, ensemble = self.forward_all(frames)
        return mixture_total_loss(sub_logits, ensemble, labels, self.distill.temperature, mask,
                                  detach_teacher=self.distill.detach_teacher)

    def config_dict(self) -> Dict[str, Any]:
        return self.config.model_dump()
