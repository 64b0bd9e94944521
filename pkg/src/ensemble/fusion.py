"""
Rank fusion of per-model rankings.

A segment at (1-based) rank j in model i's list for class c contributes
w_i / j to its fused score; the fused list is sorted by score, ties by
ascending segment id.
"""

from collections import defaultdict
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from src.evaluation.metrics import Ranking, rank_entries
from src.evaluation.predictions import PredictionTable
from src.utils.errors import ConfigError, FormatError
from src.utils.logging import logger


def normalize_weights(weights) -> np.ndarray:
    """Project onto the non-negative orthant and rescale to sum 1."""
    weights = np.maximum(np.asarray(weights, dtype=np.float64), 0.0)
    total = weights.sum()
    if weights.size == 0 or total <= 0:
        raise ConfigError(f"need at least one positive weight, got {weights.tolist()}")
    return weights / total


def rank_fusion(rankings: Sequence[Ranking], weights) -> List[Tuple[str, float]]:
    if not rankings:
        raise ConfigError("rank fusion needs at least one ranking")
    weights = normalize_weights(weights)
    if len(weights) != len(rankings):
        raise ConfigError(f"{len(weights)} weights for {len(rankings)} rankings")

    scores: Dict[str, float] = defaultdict(float)
    for weight, ranking in zip(weights, rankings):
        if weight == 0:
            continue
        for position, (segment, _) in enumerate(ranking, start=1):
            scores[segment] += weight / position
    return rank_entries(scores.items())


def fuse_tables(tables: Sequence[PredictionTable], weights, top_k: Optional[int] = None) -> PredictionTable:
    """Fuse every class present in any table."""
    if not tables:
        raise ConfigError("fusion needs at least one prediction table")
    weights = normalize_weights(weights)
    classes = sorted({c for table in tables for c in table.classes})
    fused = PredictionTable()
    for class_id in classes:
        ranking = rank_fusion([table.ranking(class_id) for table in tables], weights)
        fused.rankings[class_id] = ranking[:top_k] if top_k is not None else ranking
    return fused


def write_weights_report(path, names: Sequence[str], weights) -> Path:
    """One "model<TAB>weight" line per model."""
    weights = normalize_weights(weights)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("".join(f"{name}\t{weight:.17g}\n" for name, weight in zip(names, weights)))
    for name, weight in zip(names, weights):
        logger.info(f"Ensemble weight {name}: {weight:.4f} ({100 * weight:.1f}%)")
    return path


def read_weights_report(path) -> Dict[str, float]:
    path = Path(path)
    if not path.exists():
        raise FormatError(f"weights report {path} does not exist")
    weights: Dict[str, float] = {}
    for number, line in enumerate(path.read_text().splitlines(), start=1):
        if not line.strip():
            continue
        name, sep, value = line.rpartition("\t")
        try:
            if not sep or not name:
                raise ValueError("expected model<TAB>weight")
            weights[name] = float(value)
        except ValueError as exc:
            raise FormatError(f"{path}:{number}: malformed weight line {line!r}: {exc}") from exc
    return weights


def report_weights(report: Dict[str, float], names: Sequence[str]) -> List[float]:
    """Weights for ``names`` in order; every name must be in the report."""
    missing = [name for name in names if name not in report]
    if missing:
        raise FormatError(f"weights report has no entry for {missing}")
    return [report[name] for name in names]
