"""
MAP@K over per-class segment rankings.

For one class with N_c positive segments,

    AP@K = sum_{k<=K} P(k) rel(k) / N_c,   P(k) = (#relevant in top k) / k

and MAP@K is the unweighted mean of AP@K over classes with N_c > 0.
"""

import heapq
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Set, Tuple, Union

import numpy as np

from src.utils.config import MAP_TOP_K
from src.utils.errors import ConfigError, FormatError
from src.utils.logging import logger

Ranking = Sequence[Tuple[str, float]]


def rank_entries(entries: Iterable[Tuple[str, float]]) -> List[Tuple[str, float]]:
    """Descending score, ties by ascending segment id."""
    return sorted(entries, key=lambda item: (-item[1], item[0]))


def _segment_ids(ranking: Sequence[Union[str, Tuple[str, float]]]) -> List[str]:
    return [item if isinstance(item, str) else item[0] for item in ranking]


def average_precision_at_k(ranking, positives: Set[str], k: int) -> Optional[float]:
    """
    AP@K of an already ordered ranking (segment ids or (segment id, score)
    pairs). Returns None when the class has no positive segments.
    """
    if k < 1:
        raise ConfigError(f"K must be at least 1, got {k}")
    if not positives:
        return None
    top = _segment_ids(ranking)[:k]
    if len(set(top)) != len(top):
        raise FormatError("ranking contains duplicate segment ids")
    if not top:
        return 0.0
    relevant = np.fromiter((segment in positives for segment in top), dtype=np.float64, count=len(top))
    precision = np.cumsum(relevant) / np.arange(1, len(top) + 1)
    return float(np.sum(precision * relevant) / len(positives))


def map_at_k(
    rankings: Mapping[int, Ranking],
    truth: Mapping[int, Set[str]],
    k: int = MAP_TOP_K,
) -> float:
    """Mean AP@K over classes with at least one positive; missing rankings score 0."""
    scores = per_class_ap(rankings, truth, k)
    if not scores:
        logger.warning("No class has a positive segment; MAP is 0")
        return 0.0
    return float(np.mean([scores[c] for c in sorted(scores)]))


def per_class_ap(rankings: Mapping[int, Ranking], truth: Mapping[int, Set[str]], k: int) -> Dict[int, float]:
    scores: Dict[int, float] = {}
    skipped = 0
    for class_id in sorted(truth):
        ap = average_precision_at_k(rankings.get(class_id, ()), truth[class_id], k)
        if ap is None:
            skipped += 1
            continue
        scores[class_id] = ap
    if skipped:
        logger.debug(f"Skipped {skipped} classes without positive segments")
    return scores


class _HeapItem:
    """Heap order: lowest score first, then the larger segment id."""

    __slots__ = ("score", "segment")

    def __init__(self, score: float, segment: str):
        self.score = score
        self.segment = segment

    def __lt__(self, other: "_HeapItem") -> bool:
        if self.score != other.score:
            return self.score < other.score
        return self.segment > other.segment


class StreamingMap:
    """Single-pass MAP@K: keeps only the current top K per class."""

    def __init__(self, k: int = MAP_TOP_K):
        if k < 1:
            raise ConfigError(f"K must be at least 1, got {k}")
        self.k = k
        self._heaps: Dict[int, List[_HeapItem]] = {}

    def add(self, class_id: int, segment: str, score: float) -> None:
        heap = self._heaps.setdefault(class_id, [])
        item = _HeapItem(float(score), segment)
        if len(heap) < self.k:
            heapq.heappush(heap, item)
        elif heap[0] < item:
            heapq.heapreplace(heap, item)

    def add_many(self, triples: Iterable[Tuple[int, str, float]]) -> None:
        for class_id, segment, score in triples:
            self.add(class_id, segment, score)

    def rankings(self) -> Dict[int, List[Tuple[str, float]]]:
        return {
            class_id: rank_entries((item.segment, item.score) for item in heap)
            for class_id, heap in self._heaps.items()
        }

    def result(self, truth: Mapping[int, Set[str]]) -> float:
        return map_at_k(self.rankings(), truth, self.k)
