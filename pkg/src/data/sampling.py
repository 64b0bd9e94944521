"""Training-time frame sampling and segment windows for test-time shifting."""

from typing import Literal, Union

import numpy as np

from src.data.features import FrameFeatureSequence
from src.utils.config import SEGMENT_FRAMES
from src.utils.errors import ConfigError, ShapeError
from src.utils.logging import logger

SamplingMode = Literal["with_replacement", "subsequence"]


def _frames(sequence: Union[FrameFeatureSequence, np.ndarray]) -> np.ndarray:
    frames = sequence.frames if isinstance(sequence, FrameFeatureSequence) else np.asarray(sequence, dtype=np.float64)
    if frames.ndim != 2 or frames.shape[0] == 0:
        raise ShapeError(f"expected a non-empty (frames, features) matrix, got {frames.shape}")
    return frames


def sample_frames(sequence, n: int, mode: SamplingMode, rng: Union[np.random.Generator, int]) -> np.ndarray:
    """
    N frames in temporal order.

    ``with_replacement`` draws N frame indices uniformly and sorts them;
    ``subsequence`` takes a random contiguous run of N frames, falling back
    to sampling with replacement when the video is shorter than N.
    """
    frames = _frames(sequence)
    if n < 1:
        raise ConfigError(f"sample length must be positive, got {n}")
    if not isinstance(rng, np.random.Generator):
        rng = np.random.Generator(np.random.PCG64(rng))
    count = frames.shape[0]
    if mode == "subsequence":
        if n <= count:
            start = int(rng.integers(0, count - n + 1))
            return frames[start:start + n].copy()
        mode = "with_replacement"
    if mode == "with_replacement":
        return frames[np.sort(rng.integers(0, count, size=n))]
    raise ConfigError(f"unknown sampling mode {mode!r}")


def extract_segment(sequence, start: int, shift: int = 0, unit: int = 1, length: int = SEGMENT_FRAMES) -> np.ndarray:
    """
    Window of ``length`` frames starting at start + shift * unit, moved back
    inside [0, I) when the shift would cross a boundary.
    """
    frames = _frames(sequence)
    count = frames.shape[0]
    if count < length:
        raise ShapeError(f"video has {count} frames, window needs {length}")
    if unit < 1:
        raise ConfigError(f"shift unit must be positive, got {unit}")
    begin = start + shift * unit
    clamped = min(max(begin, 0), count - length)
    if clamped != begin:
        logger.debug(f"Shift {shift} of window at {start} clamped to start {clamped}")
    return frames[clamped:clamped + length]
