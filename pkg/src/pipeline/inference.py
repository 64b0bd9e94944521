"""
Segment scoring with test-time shift augmentation.

The probability of a labeled window is the mean, over shifts a..b, of the
model's probability on the window moved by that many units. Windows are
scored in fixed-size chunks, optionally on a thread pool; chunks are
merged in input order so the output does not depend on the worker count.
"""

from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import List, Mapping, Optional, Sequence, Tuple

import numpy as np

from src.data.features import FrameFeatureSequence
from src.data.labels import SegmentLabel, segment_id, segment_locations
from src.data.manifest import DatasetManifest
from src.data.sampling import extract_segment
from src.evaluation.predictions import PredictionTable, write_predictions
from src.models.base import VideoModel
from src.models.registry import build_from_meta
from src.tensor.checkpoint import load_checkpoint, load_checkpoint_meta
from src.utils.config import MAP_TOP_K
from src.utils.errors import ConfigError, FormatError
from src.utils.logging import logger

CHUNK_SIZE = 256


def load_model(checkpoint) -> VideoModel:
    """Rebuild the model described by the checkpoint sidecar and load its parameters."""
    model = build_from_meta(load_checkpoint_meta(checkpoint))
    model.load_state_dict(load_checkpoint(checkpoint))
    return model


def check_model_dims(model: VideoModel, manifest: DatasetManifest) -> None:
    """Checkpoint feature split and class count must match the dataset."""
    found = (model.visual_dim, model.audio_dim, model.num_classes)
    expected = (manifest.visual_dim, manifest.audio_dim, manifest.num_classes)
    if found != expected:
        raise FormatError(
            f"checkpoint (visual, audio, classes) {found} does not match manifest {expected}"
        )


def tta_shifts(tta_min: int, tta_max: int) -> List[int]:
    if tta_min > tta_max:
        raise ConfigError(f"TTA range [{tta_min}, {tta_max}] is empty")
    return list(range(tta_min, tta_max + 1))


def _score_chunk(model: VideoModel, sequences: Mapping[str, FrameFeatureSequence],
                 chunk: Sequence[Tuple[str, int]], shifts: Sequence[int], unit: int) -> np.ndarray:
    total: Optional[np.ndarray] = None
    for shift in shifts:
        windows = np.stack([extract_segment(sequences[video], start, shift, unit) for video, start in chunk])
        probs = model.predict(windows)
        total = probs if total is None else total + probs
    return total / float(len(shifts))


def score_segments(
    model: VideoModel,
    sequences: Mapping[str, FrameFeatureSequence],
    locations: Sequence[Tuple[str, int]],
    shifts: Sequence[int] = (0,),
    unit: int = 1,
    workers: int = 1,
    chunk_size: int = CHUNK_SIZE,
) -> np.ndarray:
    """(len(locations), classes) TTA-averaged probabilities."""
    if not shifts:
        raise ConfigError("at least one shift is required")
    if not locations:
        return np.zeros((0, model.num_classes))
    chunks = [locations[i:i + chunk_size] for i in range(0, len(locations), chunk_size)]

    def run(chunk):
        return _score_chunk(model, sequences, chunk, shifts, unit)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(run, chunks))
    else:
        parts = [run(chunk) for chunk in chunks]
    return np.concatenate(parts, axis=0)


def predict_table(
    model: VideoModel,
    sequences: Sequence[FrameFeatureSequence],
    labels: Sequence[SegmentLabel],
    shifts: Sequence[int] = (0,),
    unit: int = 1,
    top_k: int = MAP_TOP_K,
    workers: int = 1,
) -> PredictionTable:
    """Score every labeled window location for every class and keep the top K per class."""
    locations = segment_locations(labels)
    scores = score_segments(model, {seq.video_id: seq for seq in sequences}, locations, shifts, unit, workers)
    return PredictionTable.from_scores([segment_id(video, start) for video, start in locations], scores, top_k)


def infer(
    checkpoint,
    manifest: DatasetManifest,
    out,
    split: str = "test",
    tta_min: int = 0,
    tta_max: int = 0,
    unit: int = 1,
    top_k: int = MAP_TOP_K,
    workers: int = 1,
) -> PredictionTable:
    shifts = tta_shifts(tta_min, tta_max)
    model = load_model(checkpoint)
    check_model_dims(model, manifest)
    sequences = manifest.load_features(split)
    labels = manifest.load_labels(split, sequences)
    logger.info(
        f"Inferring {len(segment_locations(labels))} segments of split {split!r} "
        f"with shifts {shifts} (unit {unit}) on {workers} worker(s)"
    )
    table = predict_table(model, sequences, labels, shifts, unit, top_k, workers)
    write_predictions(table, Path(out))
    return table
