"""Bradley-Terry pairwise head over scene embeddings.

A per-dimension MLP scores each scene; P(left > right) = sigmoid(s_left - s_right)
and training minimizes cross-entropy against crowdsourced winners. Ties are
soft 0.5 targets during training and are left out of every metric. For
precision, recall and F1 the positive class is "left wins".
"""
import copy
import json
import logging
import math
from collections import defaultdict
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, List, Optional

import numpy as np
import pandas as pd
from scipy.special import expit
from scipy.stats import rankdata

from src import tensor_autodiff as ad
from src.errors import NonFiniteError, SceneDataError, ShapeError, TrainingDivergenceError
from src.graph_core import decode_line
from src.mgae import EMBEDDING_DIM, NEGATIVE_SLOPE, message_operators, scene_embedding
from src.reporting import format_value, render_table
from src.seeding import rng_stream

logger = logging.getLogger(__name__)

PROB_CLAMP = 1e-12
METRIC_COLUMNS = ("AUC", "accuracy", "recall", "f1", "precision")


class PerceptualDimension(str, Enum):
    SAFE = "safe"
    LIVELY = "lively"
    BORING = "boring"
    WEALTHY = "wealthy"
    DEPRESSING = "depressing"
    BEAUTIFUL = "beautiful"

    @classmethod
    def parse(cls, text):
        key = str(text).strip().lower()
        key = DIMENSION_ALIASES.get(key, key)
        try:
            return cls(key)
        except ValueError as exc:
            raise SceneDataError(f"unknown perceptual dimension {text!r}") from exc

    @property
    def table_header(self):
        return "safety" if self is PerceptualDimension.SAFE else self.value


DIMENSION_ALIASES = {
    "safety": "safe",
    "liveliness": "lively",
    "boredom": "boring",
    "wealth": "wealthy",
    "depression": "depressing",
    "beauty": "beautiful",
}

# Column order of the per-dimension accuracy table.
TABLE2_ORDER = (
    PerceptualDimension.BEAUTIFUL,
    PerceptualDimension.BORING,
    PerceptualDimension.DEPRESSING,
    PerceptualDimension.LIVELY,
    PerceptualDimension.SAFE,
    PerceptualDimension.WEALTHY,
)


class Winner(str, Enum):
    LEFT = "left"
    RIGHT = "right"
    TIE = "tie"


@dataclass(frozen=True)
class ComparisonRecord:
    left: str
    right: str
    dimension: PerceptualDimension
    winner: Winner

    def __post_init__(self):
        if self.left == self.right:
            raise SceneDataError(f"comparison of scene {self.left!r} with itself")

    @property
    def target(self):
        return {Winner.LEFT: 1.0, Winner.RIGHT: 0.0, Winner.TIE: 0.5}[self.winner]


@dataclass
class ScorerParams:
    W1: ad.Tensor
    b1: ad.Tensor
    W2: ad.Tensor
    b2: ad.Tensor

    @property
    def hidden(self):
        return self.W1.shape[1]

    def parameters(self):
        return {"scorer.W1": self.W1, "scorer.b1": self.b1, "scorer.W2": self.W2, "scorer.b2": self.b2}

    @classmethod
    def from_parameters(cls, params):
        return cls(params["scorer.W1"], params["scorer.b1"], params["scorer.W2"], params["scorer.b2"])


@dataclass(frozen=True)
class PerceptionScore:
    scene_id: str
    dimension: PerceptualDimension
    score: float


@dataclass(frozen=True)
class MetricReport:
    auc: float
    accuracy: float
    recall: float
    f1: float
    precision: float
    n_pairs: int
    dimension: str = "all"
    n_ties: int = 0

    def metric_values(self):
        """Metrics keyed in report column order."""
        return {"AUC": self.auc, "accuracy": self.accuracy, "recall": self.recall,
                "f1": self.f1, "precision": self.precision}


@dataclass
class RankerConfig:
    epochs: int = 100
    batch_size: int = 128
    lr: float = 1e-3
    hidden: int = 64
    seed: int = 0
    fine_tune: bool = False

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1 or self.hidden < 1 or self.lr <= 0:
            raise ValueError("ranker epochs must be >= 0, batch_size/hidden >= 1, lr > 0")


@dataclass
class TrainingLog:
    train_loss: List[float] = field(default_factory=list)
    val_loss: List[float] = field(default_factory=list)


@dataclass
class TrainedScorer:
    params: ScorerParams
    log: TrainingLog
    encoder: Optional[object] = None


@dataclass
class DimensionSummary:
    """Per-dimension reports plus pooled and dimension-mean aggregates."""
    per_dimension: Dict[PerceptualDimension, MetricReport]
    pooled: MetricReport
    dimension_mean: MetricReport

    @property
    def accuracies(self):
        return {dim: report.accuracy for dim, report in self.per_dimension.items()}

    @property
    def mean_accuracy(self):
        return self.dimension_mean.accuracy


# Comparisons I/O

def parse_comparisons_jsonl(stream):
    records = []
    for line_no, raw in enumerate(stream, start=1):
        line = decode_line(raw, line_no)
        if not line.strip():
            continue
        try:
            item = json.loads(line)
            record = ComparisonRecord(
                left=str(item["left"]),
                right=str(item["right"]),
                dimension=PerceptualDimension.parse(item["dimension"]),
                winner=Winner(str(item["winner"]).strip().lower()),
            )
        except SceneDataError as exc:
            raise SceneDataError(str(exc), line=line_no) from exc
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            raise SceneDataError(f"malformed comparison ({exc})", line=line_no) from exc
        records.append(record)
    logger.info("Parsed %d comparisons", len(records))
    return records


def serialize_comparisons_jsonl(comparisons):
    return "".join(
        json.dumps({"left": c.left, "right": c.right, "dimension": c.dimension.value,
                    "winner": c.winner.value}, separators=(",", ":")) + "\n"
        for c in comparisons
    )


def aggregate_majority(comparisons):
    """Collapse repeated votes on the same scene pair and dimension into one majority record."""
    votes = defaultdict(lambda: defaultdict(int))
    for c in comparisons:
        a, b = sorted((c.left, c.right))
        key = (c.dimension.value, a, b)
        if c.winner is Winner.TIE:
            votes[key]["tie"] += 1
        else:
            votes[key][c.left if c.winner is Winner.LEFT else c.right] += 1

    merged = []
    for dimension, a, b in sorted(votes):
        tally = votes[(dimension, a, b)]
        if tally[a] > tally[b]:
            winner = Winner.LEFT
        elif tally[b] > tally[a]:
            winner = Winner.RIGHT
        else:
            winner = Winner.TIE
        merged.append(ComparisonRecord(a, b, PerceptualDimension(dimension), winner))
    return merged


# Scoring

def init_scorer(rng, hidden=64, d_z=EMBEDDING_DIM):
    limit1 = math.sqrt(6.0 / (d_z + hidden))
    limit2 = math.sqrt(6.0 / (hidden + 1))
    return ScorerParams(
        W1=ad.Tensor.parameter(rng.uniform(-limit1, limit1, size=(d_z, hidden))),
        b1=ad.Tensor.parameter(np.zeros((1, hidden))),
        W2=ad.Tensor.parameter(rng.uniform(-limit2, limit2, size=(hidden, 1))),
        b2=ad.Tensor.parameter(np.zeros((1, 1))),
    )


def hidden_layer(Z, p, negative_slope=NEGATIVE_SLOPE):
    """Hidden activations of the scorer; negative_slope=1.0 gives the pre-activation."""
    Z = Z if isinstance(Z, ad.Tensor) else ad.Tensor.constant(Z)
    if Z.shape[1] != p.W1.shape[0]:
        raise ShapeError("score", Z.shape, p.W1.shape)
    return ad.leaky_relu(ad.add(ad.matmul(Z, p.W1), p.b1), negative_slope)


def score_rows(Z, p):
    """Scores (n×1) for a stack of embeddings; the same weights serve both pair members."""
    return ad.add(ad.matmul(hidden_layer(Z, p), p.W2), p.b2)


def score(z, p):
    with ad.no_grad():
        return score_rows(z, p).item()


def pair_prob(s_left, s_right):
    """sigmoid(s_left - s_right), computed so that pair_prob(a, b) + pair_prob(b, a) == 1."""
    d = float(s_left) - float(s_right)
    if d >= 0:
        return float(expit(d))
    return 1.0 - float(expit(-d))


def pair_loss(p, target):
    p = min(max(float(p), PROB_CLAMP), 1.0 - PROB_CLAMP)
    return -(target * math.log(p) + (1.0 - target) * math.log(1.0 - p))


def comparison_loss(Z, left, right, targets, p):
    """Mean cross-entropy of sigmoid(s_left - s_right) over index pairs into the rows of Z."""
    n = Z.shape[0]
    difference = np.zeros((len(left), n))
    difference[np.arange(len(left)), left] += 1.0
    difference[np.arange(len(right)), right] -= 1.0
    t = np.asarray(targets, dtype=np.float64).reshape(-1, 1)

    prob = ad.sigmoid(ad.matmul(difference, score_rows(Z, p)))
    log_p = ad.log(prob, PROB_CLAMP)
    log_q = ad.log(ad.shift(ad.scale(prob, -1.0), 1.0), PROB_CLAMP)
    ll = ad.add(ad.mul(t, log_p), ad.mul(1.0 - t, log_q))
    return ad.scale(ad.mean(ll), -1.0)


def _single_dimension(comparisons):
    dimensions = {c.dimension for c in comparisons}
    if len(dimensions) != 1:
        raise ValueError(f"expected comparisons of one dimension, got {sorted(d.value for d in dimensions)}")
    return dimensions.pop()


def _resolve(comparisons, embeddings):
    missing = sorted({s for c in comparisons for s in (c.left, c.right)} - set(embeddings))
    if missing:
        raise SceneDataError(f"unresolved scene ids: {', '.join(missing[:5])}")


def _index(comparisons, scene_ids):
    position = {s: i for i, s in enumerate(scene_ids)}
    left = np.array([position[c.left] for c in comparisons], dtype=int)
    right = np.array([position[c.right] for c in comparisons], dtype=int)
    targets = np.array([c.target for c in comparisons])
    return left, right, targets


def _stack(embeddings, scene_ids):
    return np.vstack([np.asarray(embeddings[s]).reshape(1, -1) for s in scene_ids])


def _full_loss(Z, comparisons, scene_ids, p):
    if not comparisons:
        return float("nan")
    left, right, targets = _index(comparisons, scene_ids)
    with ad.no_grad():
        return comparison_loss(Z, left, right, targets, p).item()


def train_dimension(comparisons, embeddings, cfg, validation=(), encoder=None, graphs=None):
    """Fit one dimension's scorer on frozen embeddings (or jointly fine-tune a copy of the encoder).

    ``graphs`` maps scene_id to FeaturizedGraph and is required when
    ``cfg.fine_tune`` is set.
    """
    if not comparisons:
        raise SceneDataError("no comparisons to train on")
    dimension = _single_dimension(comparisons)
    _resolve(list(comparisons) + list(validation), embeddings)
    fine_tune = cfg.fine_tune and encoder is not None
    if cfg.fine_tune and (encoder is None or graphs is None):
        raise ValueError("fine-tuning needs the encoder and featurized graphs")

    scene_ids = sorted({s for c in list(comparisons) + list(validation) for s in (c.left, c.right)})
    Z = ad.Tensor.constant(_stack(embeddings, scene_ids))
    params = init_scorer(rng_stream(cfg.seed, f"init.{dimension.value}"), cfg.hidden, Z.shape[1])
    named = params.parameters()
    if fine_tune:
        encoder = copy.deepcopy(encoder)
        named.update(encoder.parameters())
        operators = {s: message_operators(graphs[s]) for s in scene_ids}
    batch_rng = rng_stream(cfg.seed, f"batch.{dimension.value}")
    state = ad.AdamState(lr=cfg.lr)
    log = TrainingLog()
    comparisons = list(comparisons)

    def embed_all():
        return ad.Tensor.constant(np.vstack([
            scene_embedding(graphs[s], encoder, operators[s]).data for s in scene_ids]))

    logger.info("Training %s scorer on %d comparisons for %d epochs", dimension.value, len(comparisons), cfg.epochs)
    for epoch in range(cfg.epochs):
        order = batch_rng.permutation(len(comparisons))
        for start in range(0, len(order), cfg.batch_size):
            batch = [comparisons[i] for i in order[start:start + cfg.batch_size]]
            ad.current_tape().reset()
            try:
                if fine_tune:
                    local_ids = sorted({s for c in batch for s in (c.left, c.right)})
                    Zb = ad.concat_rows([scene_embedding(graphs[s], encoder, operators[s], track=True)
                                        for s in local_ids])
                    left, right, targets = _index(batch, local_ids)
                else:
                    Zb = Z
                    left, right, targets = _index(batch, scene_ids)
                loss = comparison_loss(Zb, left, right, targets, params)
            except NonFiniteError as exc:
                raise TrainingDivergenceError(f"{dimension.value} ranker diverged in epoch {epoch + 1}: {exc}") from exc
            logger.debug("%s epoch %d batch loss %.6f", dimension.value, epoch + 1, loss.item())
            grads = ad.backward(loss)
            ad.adam_step(named, ad.named_gradients(named, grads), state)

        Z_eval = embed_all() if fine_tune else Z
        train_loss = _full_loss(Z_eval, comparisons, scene_ids, params)
        if not math.isfinite(train_loss):
            raise TrainingDivergenceError(f"{dimension.value} ranker loss is non-finite in epoch {epoch + 1}")
        log.train_loss.append(train_loss)
        log.val_loss.append(_full_loss(Z_eval, list(validation), scene_ids, params))
        logger.info("%s epoch %d/%d train loss %.6f val loss %.6f", dimension.value, epoch + 1,
                    cfg.epochs, train_loss, log.val_loss[-1])

    return TrainedScorer(params=params, log=log, encoder=encoder if fine_tune else None)


# Metrics

def mann_whitney_auc(probs, positives):
    """AUC as the Mann-Whitney statistic with midranks; 0.5 when one class is absent."""
    probs = np.asarray(probs, dtype=np.float64)
    positives = np.asarray(positives, dtype=bool)
    n_pos = int(positives.sum())
    n_neg = len(positives) - n_pos
    if n_pos == 0 or n_neg == 0:
        return 0.5
    ranks = rankdata(probs, method="average")
    return float((ranks[positives].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def metrics_from_probabilities(probs, left_wins, dimension="all", n_ties=0):
    """Accuracy/precision/recall/F1/AUC with 'left wins' as the positive class."""
    probs = np.asarray(probs, dtype=np.float64)
    actual = np.asarray(left_wins, dtype=bool)
    if probs.size == 0:
        raise SceneDataError("no scoreable pairs")
    predicted = probs > 0.5
    tp = int(np.sum(predicted & actual))
    fp = int(np.sum(predicted & ~actual))
    fn = int(np.sum(~predicted & actual))
    tn = int(np.sum(~predicted & ~actual))
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision > 0 and recall > 0 else 0.0
    return MetricReport(
        auc=mann_whitney_auc(probs, actual),
        accuracy=(tp + tn) / probs.size,
        recall=recall,
        f1=f1,
        precision=precision,
        n_pairs=int(probs.size),
        dimension=dimension,
        n_ties=n_ties,
    )


def _embeddings_for(embeddings, dimension):
    """Embeddings may be shared or keyed per dimension (fine-tuned encoders)."""
    if embeddings and isinstance(next(iter(embeddings)), PerceptualDimension):
        return embeddings[dimension]
    return embeddings


def pair_probabilities(comparisons, embeddings, p):
    scene_ids = sorted({s for c in comparisons for s in (c.left, c.right)})
    _resolve(comparisons, embeddings)
    if not scene_ids:
        return np.zeros(0)
    with ad.no_grad():
        scores = score_rows(_stack(embeddings, scene_ids), p).data[:, 0]
    position = {s: i for i, s in enumerate(scene_ids)}
    return np.array([pair_prob(scores[position[c.left]], scores[position[c.right]]) for c in comparisons])


def evaluate(comparisons, embeddings, p, dimension="all"):
    if not comparisons:
        raise SceneDataError("no comparisons to evaluate")
    decided = [c for c in comparisons if c.winner is not Winner.TIE]
    ties = len(comparisons) - len(decided)
    if not decided:
        raise SceneDataError("no scoreable pairs")
    probs = pair_probabilities(decided, embeddings, p)
    return metrics_from_probabilities(probs, [c.winner is Winner.LEFT for c in decided], dimension, ties)


def evaluate_all(comparisons, embeddings, params):
    """Per-dimension reports, pooled-pair report and unweighted mean over dimensions."""
    by_dimension = defaultdict(list)
    for c in comparisons:
        by_dimension[c.dimension].append(c)
    missing = sorted(d.value for d in by_dimension if d not in params)
    if missing:
        raise ValueError(f"no trained scorer for dimensions: {', '.join(missing)}")
    if not by_dimension:
        raise SceneDataError("no comparisons to evaluate")

    per_dimension = {}
    pooled_probs, pooled_actual, pooled_ties = [], [], 0
    for dimension in TABLE2_ORDER:
        if dimension not in by_dimension:
            continue
        items = by_dimension[dimension]
        decided = [c for c in items if c.winner is not Winner.TIE]
        pooled_ties += len(items) - len(decided)
        if not decided:
            logger.warning("dimension %s has only ties; left out of the summary", dimension.value)
            continue
        dim_embeddings = _embeddings_for(embeddings, dimension)
        probs = pair_probabilities(decided, dim_embeddings, params[dimension])
        actual = [c.winner is Winner.LEFT for c in decided]
        per_dimension[dimension] = metrics_from_probabilities(
            probs, actual, dimension.value, len(items) - len(decided))
        pooled_probs.extend(probs)
        pooled_actual.extend(actual)

    pooled = metrics_from_probabilities(pooled_probs, pooled_actual, "all", pooled_ties)
    return DimensionSummary(per_dimension, pooled, mean_report(per_dimension.values()))


def mean_report(reports):
    reports = list(reports)
    if not reports:
        raise SceneDataError("no scoreable pairs")
    return MetricReport(
        auc=math.fsum(r.auc for r in reports) / len(reports),
        accuracy=math.fsum(r.accuracy for r in reports) / len(reports),
        recall=math.fsum(r.recall for r in reports) / len(reports),
        f1=math.fsum(r.f1 for r in reports) / len(reports),
        precision=math.fsum(r.precision for r in reports) / len(reports),
        n_pairs=sum(r.n_pairs for r in reports),
        dimension="mean",
        n_ties=sum(r.n_ties for r in reports),
    )


def score_dataset(scene_ids, embeddings, params, dimensions=None):
    """Continuous score for every (scene, dimension), ordered by scene_id then dimension."""
    dimensions = sorted(dimensions or params, key=lambda d: d.value)
    missing = [d.value for d in dimensions if d not in params]
    if missing:
        raise ValueError(f"no trained scorer for dimensions: {', '.join(missing)}")
    ids = sorted(scene_ids)
    columns = {}
    for dimension in dimensions:
        dim_embeddings = _embeddings_for(embeddings, dimension)
        missing_ids = [s for s in ids if s not in dim_embeddings]
        if missing_ids:
            raise SceneDataError(f"unresolved scene ids: {', '.join(missing_ids[:5])}")
        with ad.no_grad():
            columns[dimension] = score_rows(_stack(dim_embeddings, ids), params[dimension]).data[:, 0]
    return [PerceptionScore(scene_id, dimension, float(columns[dimension][i]))
            for i, scene_id in enumerate(ids) for dimension in dimensions]


def scores_frame(scores):
    return pd.DataFrame({
        "scene_id": [s.scene_id for s in scores],
        "dimension": [s.dimension.value for s in scores],
        "score": [s.score for s in scores],
    })


# Reports

def table1_frame(rows):
    """rows: {model label: MetricReport} -> frame with Model, AUC, accuracy, recall, f1, precision."""
    return pd.DataFrame(
        [[label] + [report.metric_values()[c] for c in METRIC_COLUMNS] for label, report in rows.items()],
        columns=["Model", *METRIC_COLUMNS],
    )


def render_table1(rows):
    body = [[label] + [format_value(report.metric_values()[c]) for c in METRIC_COLUMNS]
            for label, report in rows.items()]
    return render_table(["Model", *METRIC_COLUMNS], body)


def table2_frame(rows):
    """rows: {model label: {dimension: accuracy}} -> per-dimension columns plus average."""
    headers = ["Model"] + [d.table_header for d in TABLE2_ORDER] + ["average"]
    data = []
    for label, accuracies in rows.items():
        values = [accuracies.get(d) for d in TABLE2_ORDER]
        present = [v for v in values if v is not None]
        average = math.fsum(present) / len(present) if present else None
        data.append([label] + values + [average])
    return pd.DataFrame(data, columns=headers)


def render_table2(rows):
    frame = table2_frame(rows)
    body = []
    for record in frame.itertuples(index=False):
        label, *values = record
        body.append([label] + ["-" if v is None or pd.isna(v) else format_value(v) for v in values])
    return render_table(list(frame.columns), body)


def save_scorer(path, params, header=None):
    ad.save_checkpoint(path, params.parameters(), header)


def load_scorer(path):
    params, header = ad.load_checkpoint(path)
    return ScorerParams.from_parameters(params), header
