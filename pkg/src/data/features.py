"""
Frame-feature files.

Layout (little-endian): magic ``FVC1``, version u16, then records until EOF:
id length u16, UTF-8 id, frame count I u32, D_v u16, D_a u16, visual
(I x D_v) then audio (I x D_a) as float32 row-major, label count u16 and
one u16 per class id. Values are float64 in memory; float32 values
promote exactly.
"""

import struct
from pathlib import Path
from typing import Iterable, List, Optional, Sequence

import numpy as np

from src.utils.errors import FormatError, ShapeError
from src.utils.logging import logger

MAGIC = b"FVC1"
VERSION = 1


class FrameFeatureSequence:
    """One video: per-frame visual and audio features plus video-level labels."""

    def __init__(self, video_id: str, visual, audio, labels: Iterable[int] = ()):
        visual = np.asarray(visual, dtype=np.float64)
        audio = np.asarray(audio, dtype=np.float64)
        if visual.ndim != 2 or audio.ndim != 2:
            raise ShapeError(f"{video_id}: visual and audio must be matrices")
        if visual.shape[0] != audio.shape[0]:
            raise ShapeError(f"{video_id}: {visual.shape[0]} visual frames vs {audio.shape[0]} audio frames")
        if visual.shape[0] < 1:
            raise ShapeError(f"{video_id}: a video needs at least one frame")
        self.video_id = video_id
        self.visual = visual
        self.audio = audio
        self.labels = tuple(sorted({int(c) for c in labels}))

    @property
    def num_frames(self) -> int:
        return self.visual.shape[0]

    @property
    def frames(self) -> np.ndarray:
        """(I, D_v + D_a) per-frame concatenation."""
        return np.concatenate([self.visual, self.audio], axis=1)

    def label_vector(self, num_classes: int) -> np.ndarray:
        vector = np.zeros(num_classes)
        vector[list(self.labels)] = 1.0
        return vector

    def __eq__(self, other) -> bool:
        if not isinstance(other, FrameFeatureSequence):
            return NotImplemented
        return (
            self.video_id == other.video_id
            and self.labels == other.labels
            and np.array_equal(self.visual, other.visual)
            and np.array_equal(self.audio, other.audio)
        )

    def __repr__(self):
        return f"FrameFeatureSequence({self.video_id!r}, frames={self.num_frames}, labels={list(self.labels)})"


def encode_features(sequences: Sequence[FrameFeatureSequence]) -> bytes:
    chunks = [MAGIC, struct.pack("<H", VERSION)]
    for seq in sequences:
        encoded = seq.video_id.encode("utf-8")
        chunks.append(struct.pack("<H", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack("<IHH", seq.num_frames, seq.visual.shape[1], seq.audio.shape[1]))
        chunks.append(np.ascontiguousarray(seq.visual, dtype="<f4").tobytes())
        chunks.append(np.ascontiguousarray(seq.audio, dtype="<f4").tobytes())
        chunks.append(struct.pack(f"<H{len(seq.labels)}H", len(seq.labels), *seq.labels))
    return b"".join(chunks)


def _take(payload: bytes, offset: int, size: int, what: str) -> bytes:
    if offset + size > len(payload):
        raise FormatError(f"feature file truncated while reading {what}")
    return payload[offset:offset + size]


def decode_features(
    payload: bytes,
    visual_dim: Optional[int] = None,
    audio_dim: Optional[int] = None,
) -> List[FrameFeatureSequence]:
    """Parse a feature file; dimensions are checked when given."""
    if payload[:4] != MAGIC:
        raise FormatError(f"bad feature-file magic {payload[:4]!r}")
    (version,) = struct.unpack("<H", _take(payload, 4, 2, "version"))
    if version != VERSION:
        raise FormatError(f"unsupported feature-file version {version}")

    sequences: List[FrameFeatureSequence] = []
    offset = 6
    while offset < len(payload):
        (id_len,) = struct.unpack("<H", _take(payload, offset, 2, "id length"))
        offset += 2
        try:
            video_id = _take(payload, offset, id_len, "video id").decode("utf-8")
        except UnicodeDecodeError as exc:
            raise FormatError("video id is not valid UTF-8") from exc
        offset += id_len
        frames, d_v, d_a = struct.unpack("<IHH", _take(payload, offset, 8, f"{video_id} header"))
        offset += 8
        if visual_dim is not None and d_v != visual_dim:
            raise FormatError(f"{video_id}: visual dim {d_v} != manifest {visual_dim}")
        if audio_dim is not None and d_a != audio_dim:
            raise FormatError(f"{video_id}: audio dim {d_a} != manifest {audio_dim}")

        visual_bytes = _take(payload, offset, 4 * frames * d_v, f"{video_id} visual")
        offset += len(visual_bytes)
        audio_bytes = _take(payload, offset, 4 * frames * d_a, f"{video_id} audio")
        offset += len(audio_bytes)
        (count,) = struct.unpack("<H", _take(payload, offset, 2, f"{video_id} label count"))
        offset += 2
        labels = struct.unpack(f"<{count}H", _take(payload, offset, 2 * count, f"{video_id} labels"))
        offset += 2 * count

        visual = np.frombuffer(visual_bytes, dtype="<f4").reshape(frames, d_v).astype(np.float64)
        audio = np.frombuffer(audio_bytes, dtype="<f4").reshape(frames, d_a).astype(np.float64)
        try:
            sequences.append(FrameFeatureSequence(video_id, visual, audio, labels))
        except ShapeError as exc:
            raise FormatError(str(exc)) from exc
    return sequences


def write_features(sequences: Sequence[FrameFeatureSequence], path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_features(sequences))
    logger.debug(f"Wrote {len(sequences)} videos to {path}")
    return path


def read_features(path, visual_dim: Optional[int] = None, audio_dim: Optional[int] = None) -> List[FrameFeatureSequence]:
    path = Path(path)
    if not path.exists():
        raise FormatError(f"feature file not found: {path}")
    sequences = decode_features(path.read_bytes(), visual_dim, audio_dim)
    logger.debug(f"Read {len(sequences)} videos from {path}")
    return sequences
