"""
Synthetic frame-feature datasets.

Every class has a Gaussian frame prototype and a weaker "context"
direction. A video carries one or more events; an event frame is its
class prototype plus background noise and spans the labeled 5-frame
window plus one frame on each side. The context direction of each of the
video's classes is present in all of its frames, so video-level labels
only loosely locate the class in time. Negative verdicts are windows of
the video's own classes placed away from every event.
"""

from pathlib import Path
from typing import Dict, List, Tuple

import numpy as np
from pydantic import BaseModel, Field, model_validator

from src.data.features import FrameFeatureSequence, write_features
from src.data.labels import SegmentLabel, write_labels
from src.data.manifest import SPLITS, DatasetManifest, write_manifest
from src.tensor.random import make_rng
from src.utils.config import AUDIO_DIM, SEGMENT_FRAMES, SYNTH_CLASSES, SYNTH_FRAMES, SYNTH_VIDEOS, VISUAL_DIM
from src.utils.logging import logger

EVENT_MARGIN = 1


class SynthConfig(BaseModel):
    """Knobs of the synthetic benchmark"""
    classes: int = Field(default=SYNTH_CLASSES, ge=1)
    videos: int = Field(default=SYNTH_VIDEOS, ge=4)
    frames: int = Field(default=SYNTH_FRAMES, ge=SEGMENT_FRAMES + 2 * EVENT_MARGIN)
    visual_dim: int = Field(default=VISUAL_DIM, ge=1)
    audio_dim: int = Field(default=AUDIO_DIM, ge=0)
    seed: int = 42
    max_events: int = Field(default=2, ge=1)
    signal: float = Field(default=3.0, gt=0)
    context: float = Field(default=1.0, ge=0)
    noise: float = Field(default=0.5, gt=0)
    label_noise: float = Field(default=0.05, ge=0, le=1)
    negatives_per_class: int = Field(default=1, ge=0)
    split_fractions: Tuple[float, float, float, float] = (0.6, 0.2, 0.1, 0.1)

    @model_validator(mode="after")
    def _fractions(self):
        if any(f < 0 for f in self.split_fractions) or abs(sum(self.split_fractions) - 1.0) > 1e-9:
            raise ValueError(f"split fractions must be non-negative and sum to 1, got {self.split_fractions}")
        return self

    @property
    def feature_dim(self) -> int:
        return self.visual_dim + self.audio_dim


class SynthDataset:
    """Generated videos, their segment labels, split membership and the true prototypes."""

    def __init__(self, config: SynthConfig, sequences: List[FrameFeatureSequence], labels: List[SegmentLabel],
                 splits: Dict[str, List[str]], prototypes: np.ndarray, contexts: np.ndarray):
        self.config = config
        self.sequences = sequences
        self.labels = labels
        self.splits = splits
        self.prototypes = prototypes
        self.contexts = contexts

    def split_sequences(self, split: str) -> List[FrameFeatureSequence]:
        members = set(self.splits[split])
        return [seq for seq in self.sequences if seq.video_id in members]

    def split_labels(self, split: str) -> List[SegmentLabel]:
        members = set(self.splits[split])
        return [label for label in self.labels if label.video_id in members]


def _unit_rows(rng: np.random.Generator, rows: int, dim: int) -> np.ndarray:
    matrix = rng.normal(size=(rows, dim))
    return matrix / np.linalg.norm(matrix, axis=1, keepdims=True)


def _place_events(rng: np.random.Generator, frames: int, count: int) -> List[int]:
    """Labeled-window starts whose margin-padded spans do not overlap."""
    span = SEGMENT_FRAMES + 2 * EVENT_MARGIN
    starts: List[int] = []
    for candidate in rng.permutation(np.arange(EVENT_MARGIN, frames - SEGMENT_FRAMES - EVENT_MARGIN + 1)):
        if len(starts) == count:
            break
        if all(abs(int(candidate) - other) >= span for other in starts):
            starts.append(int(candidate))
    return sorted(starts)


def _negative_starts(frames: int, events: List[int]) -> List[int]:
    """Window starts that stay clear of every padded event span."""
    free = []
    for start in range(frames - SEGMENT_FRAMES + 1):
        window = (start, start + SEGMENT_FRAMES)
        if all(window[1] <= e - EVENT_MARGIN or window[0] >= e + SEGMENT_FRAMES + EVENT_MARGIN for e in events):
            free.append(start)
    return free


def generate_dataset(config: SynthConfig) -> SynthDataset:
    rng = make_rng(config.seed, "synth")
    C, D = config.classes, config.feature_dim
    prototypes = config.signal * _unit_rows(rng, C, D)
    contexts = config.context * _unit_rows(rng, C, D)

    sequences: List[FrameFeatureSequence] = []
    labels: List[SegmentLabel] = []
    for index in range(config.videos):
        video_id = f"vid{index:05d}"
        frames = config.noise * rng.normal(size=(config.frames, D))
        wanted = int(rng.integers(1, config.max_events + 1))
        starts = _place_events(rng, config.frames, wanted)
        classes = rng.choice(C, size=len(starts), replace=len(starts) > C)

        for cls in sorted(set(int(c) for c in classes)):
            frames += contexts[cls]
        for start, cls in zip(starts, classes):
            frames[start - EVENT_MARGIN:start + SEGMENT_FRAMES + EVENT_MARGIN] += prototypes[cls]
            labels.append(SegmentLabel(video_id=video_id, start=start, class_id=int(cls), positive=True))

        free = _negative_starts(config.frames, starts)
        for cls in sorted(set(int(c) for c in classes)):
            if not free:
                break
            for start in rng.choice(free, size=min(config.negatives_per_class, len(free)), replace=False):
                labels.append(SegmentLabel(video_id=video_id, start=int(start), class_id=cls, positive=False))

        video_labels = set(int(c) for c in classes)
        if rng.random() < config.label_noise:
            video_labels.add(int(rng.integers(0, C)))

        # stored as float32 on disk; round now so in-memory data equals what is read back
        frames = frames.astype(np.float32).astype(np.float64)
        sequences.append(FrameFeatureSequence(video_id, frames[:, :config.visual_dim], frames[:, config.visual_dim:], video_labels))

    order = rng.permutation(config.videos)
    bounds = np.round(np.cumsum((0.0,) + config.split_fractions) * config.videos).astype(int)
    splits = {
        split: sorted(sequences[i].video_id for i in order[bounds[k]:bounds[k + 1]])
        for k, split in enumerate(SPLITS)
    }
    labels.sort(key=lambda l: (l.video_id, l.start, l.class_id))
    return SynthDataset(config, sequences, labels, splits, prototypes, contexts)


def synth_generate(config: SynthConfig, out_dir) -> DatasetManifest:
    """Write one feature file per split, segment labels for the labeled splits and the manifest."""
    out_dir = Path(out_dir)
    dataset = generate_dataset(config)
    features: Dict[str, List[str]] = {}
    label_files: Dict[str, str] = {}
    for split in SPLITS:
        name = f"{split}.fvc"
        write_features(dataset.split_sequences(split), out_dir / name)
        features[split] = [name]
        if split != "pretrain":
            label_name = f"{split}_labels.tsv"
            write_labels(dataset.split_labels(split), out_dir / label_name)
            label_files[split] = label_name

    manifest = DatasetManifest(
        visual_dim=config.visual_dim, audio_dim=config.audio_dim, num_classes=config.classes,
        seed=config.seed, features=features, labels=label_files, root=str(out_dir),
    )
    write_manifest(manifest, out_dir / "manifest.txt")
    logger.info(
        f"Generated {config.videos} videos, {len(dataset.labels)} segment labels, "
        f"{config.classes} classes in {out_dir}"
    )
    return manifest


def main():
    """Generate a small dataset into a temporary directory."""
    import tempfile

    with tempfile.TemporaryDirectory() as tmp:
        manifest = synth_generate(SynthConfig(videos=40, classes=5), tmp)
        print(manifest.to_text())


if __name__ == "__main__":
    main()
