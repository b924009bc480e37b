"""Post-hoc reports: motif lift, score exemplars, graph-diversity correlations, cross-city change."""
import logging
import math
from collections import Counter
from dataclasses import dataclass
from typing import Optional

import numpy as np
import pandas as pd
from scipy.stats import spearmanr

from src.graph_core import graph_stats, motifs, normalize_label, repeated_relation_share
from src.reporting import format_change, format_value, render_table

logger = logging.getLogger(__name__)

DEFAULT_QUANTILE = 0.25
DEFAULT_MIN_SUPPORT = 5
DEFAULT_EXEMPLARS = 3
ALL_SCENES = "all"
UNKNOWN_CITY = "unknown"
DIVERSITY_STATS = ("edge_count", "distinct_node_labels", "distinct_predicates", "label_entropy",
                   "repeated_relation_share")
CROSS_CITY_METRICS = (("Accuracy", "accuracy"), ("AUC", "auc"), ("Recall", "recall"),
                      ("F1", "f1"), ("Precision", "precision"))


@dataclass(frozen=True, order=True)
class MotifKey:
    subject_label: str
    predicate: str
    object_label: str

    def __post_init__(self):
        for part in (self.subject_label, self.predicate, self.object_label):
            if not normalize_label(part):
                raise ValueError("motif parts must be non-empty")

    def __str__(self):
        return f"({self.subject_label})-[{self.predicate}]-({self.object_label})"


@dataclass(frozen=True)
class MotifReportRow:
    motif: MotifKey
    low_freq: float
    high_freq: float
    log_odds: float
    support: int


@dataclass(frozen=True)
class CrossCityRow:
    metric: str
    source: float
    target: float
    change: Optional[float]


def _scores_for(scores, dimension):
    """{scene_id: score} for one dimension from PerceptionScore records."""
    selected = {s.scene_id: s.score for s in scores if s.dimension == dimension}
    if not selected:
        raise ValueError(f"no scores for dimension {getattr(dimension, 'value', dimension)}")
    return selected


def bucket_scenes(score_by_scene, q):
    """(bottom, top) scene_id lists of size floor(q*n); ties broken by scene_id."""
    if not 0.0 < q <= 0.5:
        raise ValueError(f"quantile must lie in (0, 0.5], got {q}")
    ordered = sorted(score_by_scene, key=lambda s: (score_by_scene[s], s))
    k = int(math.floor(q * len(ordered)))
    if k == 0:
        raise ValueError(f"quantile {q} of {len(ordered)} scenes leaves an empty bucket")
    return ordered[:k], ordered[-k:]


def _log_odds(count, total):
    smoothed = (count + 1.0) / (total + 2.0)
    return math.log(smoothed / (1.0 - smoothed))


def motif_lift(graphs, scores, dimension, q=DEFAULT_QUANTILE, min_support=DEFAULT_MIN_SUPPORT, swap=False):
    """Motifs ranked by how much more often they occur in low- than in high-scoring scenes.

    Presence is binary per scene. Support counts every scored scene containing
    the motif. With ``swap`` the bucket roles are exchanged.
    """
    score_by_scene = _scores_for(scores, dimension)
    by_id = {g.scene_id: g for g in graphs if g.scene_id in score_by_scene}
    score_by_scene = {s: v for s, v in score_by_scene.items() if s in by_id}
    low, high = bucket_scenes(score_by_scene, q)
    if swap:
        low, high = high, low

    presence = {scene_id: {MotifKey(*key) for key in motifs(g)} for scene_id, g in by_id.items()}
    support = Counter(key for keys in presence.values() for key in keys)
    low_counts = Counter(key for s in low for key in presence[s])
    high_counts = Counter(key for s in high for key in presence[s])

    rows = []
    for key, count in support.items():
        if count < min_support:
            continue
        c_low, c_high = low_counts.get(key, 0), high_counts.get(key, 0)
        rows.append(MotifReportRow(
            motif=key,
            low_freq=c_low / len(low),
            high_freq=c_high / len(high),
            log_odds=_log_odds(c_low, len(low)) - _log_odds(c_high, len(high)),
            support=count,
        ))
    rows.sort(key=lambda r: (-r.log_odds, r.motif))
    logger.info("motif lift for %s: %d motifs above support %d",
                getattr(dimension, "value", dimension), len(rows), min_support)
    return rows


def motif_frame(rows, dimension=None):
    frame = pd.DataFrame({
        "subject": [r.motif.subject_label for r in rows],
        "predicate": [r.motif.predicate for r in rows],
        "object": [r.motif.object_label for r in rows],
        "low_freq": [r.low_freq for r in rows],
        "high_freq": [r.high_freq for r in rows],
        "log_odds": [r.log_odds for r in rows],
        "support": [r.support for r in rows],
    })
    if dimension is not None:
        frame.insert(0, "dimension", getattr(dimension, "value", dimension))
    return frame


def render_motifs(rows, limit=20):
    body = [[str(r.motif), format_value(r.low_freq), format_value(r.high_freq),
             format_value(r.log_odds, 3), str(r.support)] for r in rows[:limit]]
    return render_table(["motif", "low_freq", "high_freq", "log_odds", "support"], body)


@dataclass(frozen=True)
class ExemplarRow:
    dimension: str
    group: str
    end: str
    position: int
    scene_id: str
    score: float


def scene_exemplars(graphs, scores, dimension, k=DEFAULT_EXEMPLARS, by_city=False):
    """The k lowest and k highest scoring scenes of each group, listed from low to high.

    Groups are cities when ``by_city`` is set (scenes without a city form the
    "unknown" group), otherwise one "all" group. The two ends never overlap:
    a group of n scenes contributes min(k, n // 2) scenes per end.
    """
    if k < 1:
        raise ValueError(f"exemplar count must be at least 1, got {k}")
    score_by_scene = _scores_for(scores, dimension)
    groups = {}
    for g in graphs:
        if g.scene_id in score_by_scene:
            name = (g.city or UNKNOWN_CITY) if by_city else ALL_SCENES
            groups.setdefault(name, []).append(g.scene_id)

    label = getattr(dimension, "value", dimension)
    rows = []
    for name in sorted(groups):
        ordered = sorted(groups[name], key=lambda s: (score_by_scene[s], s))
        per_end = min(k, len(ordered) // 2)
        if per_end == 0:
            logger.warning("%s: group %s has too few scenes for exemplars", label, name)
            continue
        picks = [("low", ordered[:per_end], 0), ("high", ordered[-per_end:], len(ordered) - per_end)]
        for end, scene_ids, offset in picks:
            for i, scene_id in enumerate(scene_ids):
                rows.append(ExemplarRow(label, name, end, offset + i + 1, scene_id, score_by_scene[scene_id]))
    return rows


def exemplar_frame(rows):
    return pd.DataFrame({
        "dimension": [r.dimension for r in rows],
        "group": [r.group for r in rows],
        "end": [r.end for r in rows],
        "position": [r.position for r in rows],
        "scene_id": [r.scene_id for r in rows],
        "score": [r.score for r in rows],
    })


def render_exemplars(rows):
    body = [[r.dimension, r.group, r.end, str(r.position), r.scene_id, format_value(r.score, 3)] for r in rows]
    return render_table(["dimension", "group", "end", "position", "scene_id", "score"], body)



def spearman(x, y):
    """Spearman rho with midranks, or None when either side is constant."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if np.ptp(x) == 0 or np.ptp(y) == 0:
        return None
    rho = spearmanr(x, y).correlation
    return float(min(1.0, max(-1.0, rho)))


def diversity_correlation(graphs, scores, dimension):
    """Spearman rho between each graph-diversity statistic and the dimension's scores."""
    score_by_scene = _scores_for(scores, dimension)
    selected = sorted((g for g in graphs if g.scene_id in score_by_scene), key=lambda g: g.scene_id)
    if len(selected) < 3:
        raise ValueError("diversity correlation needs at least 3 scored scenes")
    values = [score_by_scene[g.scene_id] for g in selected]
    table = {name: [] for name in DIVERSITY_STATS}
    for g in selected:
        stats = graph_stats(g)
        table["edge_count"].append(stats.edge_count)
        table["distinct_node_labels"].append(stats.distinct_node_labels)
        table["distinct_predicates"].append(stats.distinct_predicates)
        table["label_entropy"].append(stats.label_entropy)
        table["repeated_relation_share"].append(repeated_relation_share(g))
    return {name: spearman(column, values) for name, column in table.items()}


def diversity_frame(correlations_by_dimension):
    """{dimension: {stat: rho}} -> one row per dimension, one column per statistic."""
    rows = []
    for dimension, correlations in correlations_by_dimension.items():
        rows.append([getattr(dimension, "value", dimension)] + [correlations.get(s) for s in DIVERSITY_STATS])
    return pd.DataFrame(rows, columns=["dimension", *DIVERSITY_STATS])


def render_diversity(correlations_by_dimension):
    body = [[getattr(d, "value", d)] + [format_value(c.get(s), 3) for s in DIVERSITY_STATS]
            for d, c in correlations_by_dimension.items()]
    return render_table(["dimension", *DIVERSITY_STATS], body)


def relative_change(source, target):
    if source == 0:
        return None
    return (target - source) / source * 100.0


def cross_city_report(source, target):
    """One row per metric: source value, target value and relative change in percent."""
    rows = []
    for label, attribute in CROSS_CITY_METRICS:
        s = getattr(source, attribute)
        t = getattr(target, attribute)
        rows.append(CrossCityRow(label, s, t, relative_change(s, t)))
    return rows


def cross_city_frame(rows, source_name="source", target_name="target"):
    return pd.DataFrame({
        "Metric": [r.metric for r in rows],
        source_name: [r.source for r in rows],
        target_name: [r.target for r in rows],
        "Change": [format_change(r.change) for r in rows],
    })


def render_cross_city(rows, source_name="source", target_name="target"):
    body = [[r.metric, format_value(r.source), format_value(r.target), format_change(r.change)] for r in rows]
    return render_table(["Metric", source_name, target_name, "Change"], body)
