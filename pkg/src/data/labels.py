"""Segment labels: "video_id<TAB>start<TAB>class<TAB>{0,1}" rows."""

from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Sequence, Set, Tuple

import pandas as pd
from pydantic import BaseModel, Field

from src.data.features import FrameFeatureSequence
from src.utils.config import SEGMENT_FRAMES
from src.utils.errors import FormatError
from src.utils.logging import logger

COLUMNS = ["video_id", "start", "class_id", "verdict"]


def segment_id(video_id: str, start: int) -> str:
    return f"{video_id}:{start}"


def parse_segment_id(value: str) -> Tuple[str, int]:
    video_id, sep, start = value.rpartition(":")
    if not sep or not start.isdigit():
        raise FormatError(f"malformed segment id {value!r}")
    return video_id, int(start)


class SegmentLabel(BaseModel):
    """Verified (or rejected) class for a 5-frame window"""
    video_id: str
    start: int = Field(ge=0)
    class_id: int = Field(ge=0)
    positive: bool

    @property
    def segment_id(self) -> str:
        return segment_id(self.video_id, self.start)


def write_labels(labels: Sequence[SegmentLabel], path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame = pd.DataFrame(
        [(l.video_id, l.start, l.class_id, int(l.positive)) for l in labels], columns=COLUMNS
    )
    frame.to_csv(path, sep="\t", header=False, index=False)
    logger.debug(f"Wrote {len(labels)} segment labels to {path}")
    return path


def read_labels(path) -> List[SegmentLabel]:
    path = Path(path)
    if not path.exists():
        raise FormatError(f"label file not found: {path}")
    if path.stat().st_size == 0:
        return []
    try:
        frame = pd.read_csv(
            path, sep="\t", header=None, names=COLUMNS,
            dtype={"video_id": str, "start": "int64", "class_id": "int64", "verdict": "int64"},
            keep_default_na=False,
        )
    except (ValueError, pd.errors.ParserError) as exc:
        raise FormatError(f"malformed label file {path}: {exc}") from exc
    bad = frame[~frame["verdict"].isin([0, 1]) | (frame["start"] < 0) | (frame["class_id"] < 0)]
    if len(bad):
        raise FormatError(f"{path}: {len(bad)} invalid label rows, first: {bad.iloc[0].tolist()}")
    return [
        SegmentLabel(video_id=row.video_id, start=int(row.start), class_id=int(row.class_id), positive=bool(row.verdict))
        for row in frame.itertuples(index=False)
    ]


def check_labels(labels: Iterable[SegmentLabel], sequences: Mapping[str, FrameFeatureSequence],
                 length: int = SEGMENT_FRAMES) -> None:
    """Every label must point at a known video with start + length <= I."""
    for label in labels:
        seq = sequences.get(label.video_id)
        if seq is None:
            raise FormatError(f"label for unknown video {label.video_id!r}")
        if label.start + length > seq.num_frames:
            raise FormatError(
                f"segment {label.segment_id} runs past the end of a {seq.num_frames}-frame video"
            )


def ground_truth(labels: Iterable[SegmentLabel]) -> Dict[int, Set[str]]:
    """class id -> positive segment ids; classes seen only with negative verdicts map to empty sets."""
    truth: Dict[int, Set[str]] = {}
    for label in labels:
        positives = truth.setdefault(label.class_id, set())
        if label.positive:
            positives.add(label.segment_id)
    return truth


def segment_locations(labels: Iterable[SegmentLabel]) -> List[Tuple[str, int]]:
    """Unique (video id, start) pairs in sorted order."""
    return sorted({(label.video_id, label.start) for label in labels})
