"""Model families by name, and rebuilding a model from checkpoint metadata."""

from typing import Any, Dict, Mapping, Optional

from pydantic import ValidationError

from src.models.base import VideoModel
from src.models.netvlad import GatedNetVladModel, NetVladConfig
from src.models.nextvlad import MixNeXtVladModel, NeXtVladConfig
from src.models.transformer import BertCrossModel, BertModel, TransformerConfig
from src.tensor.random import make_rng
from src.utils.errors import ConfigError
from src.utils.logging import logger

FAMILIES = {
    "netvlad": (GatedNetVladModel, NetVladConfig),
    "nextvlad_mix": (MixNeXtVladModel, NeXtVladConfig),
    "bert": (BertModel, TransformerConfig),
    "bert_cross": (BertCrossModel, TransformerConfig),
}


def family_config(family: str, overrides: Optional[Mapping[str, Any]] = None):
    """Validated config for ``family`` with ``overrides`` applied."""
    if family not in FAMILIES:
        raise ConfigError(f"unknown model family {family!r}; choose one of {sorted(FAMILIES)}")
    config_cls = FAMILIES[family][1]
    try:
        return config_cls(**dict(overrides or {}))
    except ValidationError as exc:
        raise ConfigError(f"invalid {family} config: {exc}") from exc


def build_model(
    family: str,
    visual_dim: int,
    audio_dim: int,
    num_classes: int,
    config: Optional[Mapping[str, Any]] = None,
    seed: int = 0,
) -> VideoModel:
    """Instantiate a model; parameters come from the seed's "init" stream."""
    model_cls = FAMILIES[family][0] if family in FAMILIES else None
    family_cfg = family_config(family, config)
    model = model_cls(visual_dim, audio_dim, num_classes, family_cfg, make_rng(seed, "init"))
    logger.debug(f"Built {family} model with {model.num_parameters()} parameters")
    return model


def build_from_meta(meta: Dict[str, Any]) -> VideoModel:
    """Rebuild an (uninitialized-equivalent) model from a checkpoint sidecar."""
    try:
        return build_model(
            meta["family"], int(meta["visual_dim"]), int(meta["audio_dim"]), int(meta["num_classes"]),
            meta.get("config", {}),
        )
    except KeyError as exc:
        raise ConfigError(f"checkpoint metadata is missing {exc}") from exc
