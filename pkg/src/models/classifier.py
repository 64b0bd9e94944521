"""
Classification heads and losses.

MoE head: for each class c, p_c = sum_e softmax(gate(v))_e * sigmoid(expert_e(v)).
Mixture loss: sum_m BCE(z^m) + BCE(z^e) + T^2 * sum_m KL(p^e || p^m) with
temperature-softened class distributions inside the KL terms only.
"""

from typing import Optional, Sequence

import numpy as np
from pydantic import BaseModel, Field

from src.tensor.core import Tensor, as_tensor, clip, log, reshape, sigmoid, softmax, tsum
from src.tensor.module import Module
from src.utils.config import KL_CLAMP, PROB_CLAMP
from src.utils.errors import ConfigError, ShapeError


class MoEConfig(BaseModel):
    """Mixture-of-experts head settings"""
    num_experts: int = Field(default=2, ge=1)


class DistillConfig(BaseModel):
    """Temperature and submodel count for on-the-fly distillation"""
    temperature: float = Field(default=3.0, gt=0)
    submodels: int = Field(default=3, ge=1)
    detach_teacher: bool = False


class MoEClassifier(Module):
    """Per-class gated combination of logistic experts."""

    def __init__(self, prefix: str, input_dim: int, num_classes: int, num_experts: int, rng: np.random.Generator):
        super().__init__(prefix)
        if num_experts < 1:
            raise ConfigError("MoE needs at least one expert")
        self.input_dim = input_dim
        self.num_classes = num_classes
        self.num_experts = num_experts
        width = num_classes * num_experts
        self.expert_w = self.uniform_param("expert_w", (input_dim, width), rng)
        self.expert_b = self.uniform_param("expert_b", (width,), rng, fan_in=input_dim)
        self.gate_w = self.uniform_param("gate_w", (input_dim, width), rng)
        self.gate_b = self.uniform_param("gate_b", (width,), rng, fan_in=input_dim)

    def _split(self, v: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
        out = v @ weight + bias
        return reshape(out, out.shape[:-1] + (self.num_classes, self.num_experts))

    def gates(self, v: Tensor) -> Tensor:
        return softmax(self._split(v, self.gate_w, self.gate_b), axis=-1)

    def __call__(self, v: Tensor) -> Tensor:
        v = as_tensor(v)
        if v.shape[-1] != self.input_dim:
            raise ShapeError(f"MoE expects {self.input_dim} inputs, got {v.shape[-1]}")
        experts = sigmoid(self._split(v, self.expert_w, self.expert_b))
        return tsum(self.gates(v) * experts, axis=-1)

    def logits(self, v: Tensor) -> Tensor:
        return moe_logits(self(v))


class LogisticClassifier(Module):
    """Independent logistic regression per class."""

    def __init__(self, prefix: str, input_dim: int, num_classes: int, rng: np.random.Generator):
        super().__init__(prefix)
        self.input_dim = input_dim
        self.num_classes = num_classes
        self.weight = self.uniform_param("weight", (input_dim, num_classes), rng)
        self.bias = self.uniform_param("bias", (num_classes,), rng, fan_in=input_dim)

    def logits(self, v: Tensor) -> Tensor:
        v = as_tensor(v)
        if v.shape[-1] != self.input_dim:
            raise ShapeError(f"logistic head expects {self.input_dim} inputs, got {v.shape[-1]}")
        return v @ self.weight + self.bias

    def __call__(self, v: Tensor) -> Tensor:
        return sigmoid(self.logits(v))


def build_head(kind: str, prefix: str, input_dim: int, num_classes: int, num_experts: int, rng: np.random.Generator):
    if kind == "moe":
        return MoEClassifier(prefix, input_dim, num_classes, num_experts, rng)
    if kind == "logistic":
        return LogisticClassifier(prefix, input_dim, num_classes, rng)
    raise ConfigError(f"unknown classifier head {kind!r}")


def moe_classify(v, head: MoEClassifier) -> Tensor:
    return head(v)


def moe_logits(probs: Tensor, eps: float = KL_CLAMP) -> Tensor:
    """Log-odds of a probability tensor, clamped away from 0 and 1."""
    p = clip(probs, eps, 1.0 - eps)
    return log(p) - log(1.0 - p)


def _batched(t: Tensor) -> Tensor:
    return reshape(t, (1,) + t.shape) if t.ndim == 1 else t


def bce_loss(probs, labels, mask=None, eps: float = PROB_CLAMP) -> Tensor:
    """
    Binary cross entropy, summed over classes and averaged over the batch.

    Probabilities are clamped to [eps, 1 - eps] before the logarithm. Entries
    with mask 0 do not contribute.
    """
    probs = _batched(as_tensor(probs))
    labels = np.asarray(labels.data if isinstance(labels, Tensor) else labels, dtype=np.float64).reshape(probs.shape)
    p = clip(probs, eps, 1.0 - eps)
    per_entry = -(labels * log(p) + (1.0 - labels) * log(1.0 - p))
    if mask is not None:
        per_entry = per_entry * np.asarray(mask, dtype=np.float64).reshape(probs.shape)
    return tsum(per_entry) / float(probs.shape[0])


def temp_softmax(logits, temperature: float) -> Tensor:
    if temperature <= 0:
        raise ConfigError(f"temperature must be positive, got {temperature}")
    return softmax(as_tensor(logits) / float(temperature), axis=-1)


def distill_kl(p_teacher, p_student, eps: float = KL_CLAMP, detach_teacher: bool = False) -> Tensor:
    """KL(p_teacher || p_student) over the class axis, averaged over the batch."""
    p_teacher = _batched(as_tensor(p_teacher))
    p_student = _batched(as_tensor(p_student))
    if detach_teacher:
        p_teacher = p_teacher.detach()
    per_example = tsum(p_teacher * (log(clip(p_teacher, eps, 1.0)) - log(clip(p_student, eps, 1.0))), axis=-1)
    return tsum(per_example) / float(p_teacher.shape[0])


def mixture_total_loss(
    sub_logits: Sequence[Tensor],
    ensemble_logits: Tensor,
    labels,
    temperature: float,
    mask=None,
    detach_teacher: bool = False,
) -> Tensor:
    if temperature <= 0:
        raise ConfigError(f"temperature must be positive, got {temperature}")
    if not sub_logits:
        raise ConfigError("mixture loss needs at least one submodel")

    total = bce_loss(sigmoid(ensemble_logits), labels, mask)
    teacher = temp_softmax(ensemble_logits, temperature)
    kl_sum: Optional[Tensor] = None
    for logits in sub_logits:
        total = total + bce_loss(sigmoid(logits), labels, mask)
        kl = distill_kl(teacher, temp_softmax(logits, temperature), detach_teacher=detach_teacher)
        kl_sum = kl if kl_sum is None else kl_sum + kl
    return total + (temperature ** 2) * kl_sum
