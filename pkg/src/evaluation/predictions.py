"""Per-class ranked prediction tables and the tab-separated prediction file."""

from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from src.evaluation.metrics import map_at_k, rank_entries
from src.utils.errors import FormatError, ShapeError
from src.utils.logging import logger

COLUMNS = ["class_id", "segment_id", "score"]


class PredictionTable:
    """class id -> ranked (segment id, score) list, optionally truncated to K."""

    def __init__(self, rankings: Optional[Dict[int, List[Tuple[str, float]]]] = None):
        self.rankings: Dict[int, List[Tuple[str, float]]] = {
            int(c): rank_entries(entries) for c, entries in (rankings or {}).items()
        }

    @classmethod
    def from_scores(cls, segment_ids: Sequence[str], scores: np.ndarray, top_k: Optional[int] = None) -> "PredictionTable":
        """Build from a dense (segments x classes) score matrix."""
        scores = np.asarray(scores, dtype=np.float64)
        if scores.ndim != 2 or scores.shape[0] != len(segment_ids):
            raise ShapeError(f"score matrix {scores.shape} does not match {len(segment_ids)} segments")
        if len(set(segment_ids)) != len(segment_ids):
            raise FormatError("duplicate segment ids in score matrix")
        rankings = {
            class_id: list(zip(segment_ids, scores[:, class_id].tolist()))
            for class_id in range(scores.shape[1])
        }
        table = cls(rankings)
        return table.truncate(top_k) if top_k is not None else table

    @property
    def classes(self) -> List[int]:
        return sorted(self.rankings)

    def ranking(self, class_id: int) -> List[Tuple[str, float]]:
        return self.rankings.get(class_id, [])

    def truncate(self, k: int) -> "PredictionTable":
        return PredictionTable({c: entries[:k] for c, entries in self.rankings.items()})

    def map_at_k(self, truth, k: int) -> float:
        return map_at_k(self.rankings, truth, k)

    def __len__(self):
        return sum(len(entries) for entries in self.rankings.values())

    def to_frame(self) -> pd.DataFrame:
        rows = [
            (class_id, segment, score)
            for class_id in self.classes
            for segment, score in self.rankings[class_id]
        ]
        return pd.DataFrame(rows, columns=COLUMNS)


def write_predictions(table: PredictionTable, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    table.to_frame().to_csv(path, sep="\t", header=False, index=False, float_format="%.17g")
    logger.info(f"Wrote {len(table)} predictions for {len(table.classes)} classes to {path}")
    return path


def read_predictions(path) -> PredictionTable:
    path = Path(path)
    if not path.exists():
        raise FormatError(f"prediction file not found: {path}")
    if path.stat().st_size == 0:
        return PredictionTable()
    try:
        frame = pd.read_csv(
            path, sep="\t", header=None, names=COLUMNS,
            dtype={"class_id": np.int64, "segment_id": str, "score": np.float64},
            float_precision="round_trip", keep_default_na=False,
        )
    except (ValueError, pd.errors.ParserError) as exc:
        raise FormatError(f"malformed prediction file {path}: {exc}") from exc
    rankings: Dict[int, List[Tuple[str, float]]] = {}
    for class_id, group in frame.groupby("class_id", sort=True):
        rankings[int(class_id)] = list(zip(group["segment_id"].tolist(), group["score"].tolist()))
    return PredictionTable(rankings)


def iter_triples(table: PredictionTable) -> Iterable[Tuple[int, str, float]]:
    for class_id in table.classes:
        for segment, score in table.rankings[class_id]:
            yield class_id, segment, score
