"""
Dataset manifest: a flat key=value file listing dimensions and per-split files.

    visual_dim=32
    audio_dim=8
    num_classes=20
    seed=42
    pretrain_features=pretrain.fvc
    finetune_features=finetune.fvc
    finetune_labels=finetune_labels.tsv
    ...

Feature entries may list several comma-separated files. Relative paths are
resolved against the manifest's directory.
"""

from pathlib import Path
from typing import Dict, List, Optional

from dotenv import dotenv_values
from pydantic import BaseModel, Field, ValidationError, model_validator

from src.data.features import FrameFeatureSequence, read_features
from src.data.labels import SegmentLabel, check_labels, read_labels
from src.utils.errors import ConfigError, FormatError
from src.utils.logging import logger

SPLITS = ("pretrain", "finetune", "holdout", "test")


class DatasetManifest(BaseModel):
    """Feature dimensions, class count and the files of every split"""
    visual_dim: int = Field(ge=1)
    audio_dim: int = Field(ge=0)
    num_classes: int = Field(ge=1)
    seed: int = 0
    features: Dict[str, List[str]] = Field(default_factory=dict)
    labels: Dict[str, str] = Field(default_factory=dict)
    root: str = "."

    @model_validator(mode="after")
    def _splits_disjoint(self):
        unknown = set(self.features) - set(SPLITS) | set(self.labels) - set(SPLITS)
        if unknown:
            raise ValueError(f"unknown splits {sorted(unknown)}")
        seen: Dict[str, str] = {}
        for split, files in self.features.items():
            for name in files:
                if name in seen:
                    raise ValueError(f"{name} listed in both {seen[name]} and {split}")
                seen[name] = split
        return self

    def feature_paths(self, split: str) -> List[Path]:
        return [Path(self.root) / name for name in self.features.get(split, [])]

    def label_path(self, split: str) -> Optional[Path]:
        name = self.labels.get(split)
        return Path(self.root) / name if name else None

    def load_features(self, split: str) -> List[FrameFeatureSequence]:
        sequences: List[FrameFeatureSequence] = []
        for path in self.feature_paths(split):
            sequences.extend(read_features(path, self.visual_dim, self.audio_dim))
        if not sequences:
            logger.warning(f"Split {split!r} has no videos")
        return sequences

    def load_labels(self, split: str, sequences: Optional[List[FrameFeatureSequence]] = None) -> List[SegmentLabel]:
        path = self.label_path(split)
        if path is None:
            raise ConfigError(f"manifest has no segment labels for split {split!r}")
        labels = read_labels(path)
        out_of_range = [l for l in labels if l.class_id >= self.num_classes]
        if out_of_range:
            raise FormatError(f"{path}: class {out_of_range[0].class_id} >= num_classes {self.num_classes}")
        if sequences is not None:
            check_labels(labels, {seq.video_id: seq for seq in sequences})
        return labels

    def to_text(self) -> str:
        lines = [
            f"visual_dim={self.visual_dim}",
            f"audio_dim={self.audio_dim}",
            f"num_classes={self.num_classes}",
            f"seed={self.seed}",
        ]
        for split in SPLITS:
            if split in self.features:
                lines.append(f"{split}_features={','.join(self.features[split])}")
            if split in self.labels:
                lines.append(f"{split}_labels={self.labels[split]}")
        return "\n".join(lines) + "\n"


def read_manifest(path) -> DatasetManifest:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"manifest not found: {path}")
    values = dotenv_values(path)
    features = {
        split: [name.strip() for name in values[f"{split}_features"].split(",") if name.strip()]
        for split in SPLITS
        if values.get(f"{split}_features")
    }
    labels = {split: values[f"{split}_labels"] for split in SPLITS if values.get(f"{split}_labels")}
    try:
        return DatasetManifest(
            visual_dim=values.get("visual_dim"),
            audio_dim=values.get("audio_dim"),
            num_classes=values.get("num_classes"),
            seed=values.get("seed") or 0,
            features=features,
            labels=labels,
            root=str(path.parent),
        )
    except ValidationError as exc:
        raise ConfigError(f"invalid manifest {path}: {exc}") from exc


def write_manifest(manifest: DatasetManifest, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(manifest.to_text())
    logger.info(f"Wrote manifest {path}")
    return path
