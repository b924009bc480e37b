"""End-to-end orchestration: ingest, split, featurize, pretrain, embed, train, evaluate, score, motifs."""
import hashlib
import json
import logging
import re
from contextlib import contextmanager
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np
import pandas as pd

from src import analysis, mgae
from src import pairwise_ranker as ranker
from src.errors import ConfigError, PipelineError, SceneDataError
from src.graph_core import export_dot, graph_stats, parse_scene_jsonl, validate_graph
from src.mgae import PretrainConfig
from src.pairwise_ranker import PerceptualDimension, RankerConfig
from src.reporting import render_table, tsv_text, write_report, write_text
from src.seeding import rng_stream
from src.text_features import DEFAULT_HASH_DIM, TextEmbedder, featurize_graph, load_embedding_table

logger = logging.getLogger(__name__)

SPLITS = ("train", "val", "test")
STAGES = ("ingest", "split", "featurize", "pretrain", "embed", "train", "evaluate", "score", "motifs")
FAILED_MARKER = "FAILED"


@dataclass
class MotifConfig:
    q: float = analysis.DEFAULT_QUANTILE
    min_support: int = analysis.DEFAULT_MIN_SUPPORT
    exemplars: int = analysis.DEFAULT_EXEMPLARS
    exemplars_by_city: bool = True


@dataclass
class RunConfig:
    scenes: Optional[str] = None
    comparisons: Optional[str] = None
    embeddings: Optional[str] = None
    out: str = "artifacts"
    target_scenes: Optional[str] = None
    target_comparisons: Optional[str] = None
    split: Tuple[int, int, int] = (6, 3, 1)
    seed: int = 0
    hash_dim: int = DEFAULT_HASH_DIM
    hash_seed: int = 0
    aggregate_votes: bool = False
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    ranker: RankerConfig = field(default_factory=RankerConfig)
    motifs: MotifConfig = field(default_factory=MotifConfig)

    def canonical(self):
        """Every documented key rendered as text."""
        return {key: _render(getattr(_section(self, section), attr)) for key, (section, attr, _) in CONFIG_KEYS.items()}

    def config_hash(self):
        text = "\n".join(f"{k}={v}" for k, v in sorted(self.canonical().items()))
        return hashlib.sha256(text.encode("utf-8")).hexdigest()[:16]


def _render(value):
    if isinstance(value, tuple):
        return ":".join(str(v) for v in value)
    if isinstance(value, bool):
        return "true" if value else "false"
    return "" if value is None else str(value)


def parse_ratio(text):
    try:
        parts = tuple(int(p) for p in str(text).split(":"))
    except ValueError as exc:
        raise ConfigError(f"split ratio must look like 6:3:1, got {text!r}") from exc
    if len(parts) != 3 or any(p <= 0 for p in parts):
        raise ConfigError(f"split ratio needs three positive integers, got {text!r}")
    return parts


def _parse_bool(text):
    value = str(text).strip().lower()
    if value in ("1", "true", "yes", "on"):
        return True
    if value in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {text!r}")


def _optional_path(text):
    return str(text) if str(text).strip() else None


# key -> (section, attribute, parser); section None means RunConfig itself
CONFIG_KEYS = {
    "scenes": (None, "scenes", _optional_path),
    "comparisons": (None, "comparisons", _optional_path),
    "embeddings": (None, "embeddings", _optional_path),
    "out": (None, "out", str),
    "target_scenes": (None, "target_scenes", _optional_path),
    "target_comparisons": (None, "target_comparisons", _optional_path),
    "split": (None, "split", parse_ratio),
    "seed": (None, "seed", int),
    "hash_dim": (None, "hash_dim", int),
    "hash_seed": (None, "hash_seed", int),
    "aggregate_votes": (None, "aggregate_votes", _parse_bool),
    "hidden": ("pretrain", "hidden", int),
    "layers": ("pretrain", "layers", int),
    "mask_rate": ("pretrain", "mask_rate", float),
    "gamma": ("pretrain", "gamma", float),
    "pretrain_epochs": ("pretrain", "epochs", int),
    "pretrain_batch_size": ("pretrain", "batch_size", int),
    "pretrain_lr": ("pretrain", "lr", float),
    "ranker_epochs": ("ranker", "epochs", int),
    "ranker_batch_size": ("ranker", "batch_size", int),
    "ranker_lr": ("ranker", "lr", float),
    "ranker_hidden": ("ranker", "hidden", int),
    "fine_tune": ("ranker", "fine_tune", _parse_bool),
    "motif_q": ("motifs", "q", float),
    "motif_min_support": ("motifs", "min_support", int),
    "exemplars": ("motifs", "exemplars", int),
    "exemplars_by_city": ("motifs", "exemplars_by_city", _parse_bool),
}


def _section(cfg, section):
    return cfg if section is None else getattr(cfg, section)


def read_config_file(path):
    """Flat key=value file -> {key: text}; '#' starts a comment."""
    values = {}
    with open(path, "r", encoding="utf-8") as handle:
        for line_no, raw in enumerate(handle, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{line_no}: expected key=value")
            key, value = (part.strip() for part in line.split("=", 1))
            if key not in CONFIG_KEYS:
                raise ConfigError(f"{path}:{line_no}: unknown key {key!r}")
            values[key] = value
    return values


def build_config(values):
    """RunConfig from {key: text-or-value}; the run seed also seeds pretraining and the ranker."""
    cfg = RunConfig()
    pretrain, ranker_cfg, motif_cfg = {}, {}, {}
    sections = {"pretrain": pretrain, "ranker": ranker_cfg, "motifs": motif_cfg}
    for key, value in values.items():
        if key not in CONFIG_KEYS:
            raise ConfigError(f"unknown configuration key {key!r}")
        section, attr, parse = CONFIG_KEYS[key]
        try:
            parsed = parse(value) if isinstance(value, str) else value
        except ValueError as exc:
            raise ConfigError(f"bad value for {key}: {value!r}") from exc
        if section is None:
            setattr(cfg, attr, parsed)
        else:
            sections[section][attr] = parsed
    try:
        cfg.pretrain = PretrainConfig(seed=cfg.seed, **pretrain)
        cfg.ranker = RankerConfig(seed=cfg.seed, **ranker_cfg)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    cfg.motifs = MotifConfig(**motif_cfg)
    if cfg.motifs.exemplars < 1:
        raise ConfigError("exemplars must be at least 1")
    if cfg.seed < 0:
        raise ConfigError("seed must be non-negative")
    return cfg


def load_config(path, overrides=None):
    values = read_config_file(path) if path else {}
    values.update({k: v for k, v in (overrides or {}).items() if v is not None})
    return build_config(values)


@dataclass
class DatasetSplit:
    train: List[str]
    val: List[str]
    test: List[str]
    comparisons: Dict[str, list] = field(default_factory=dict)
    dropped: int = 0

    def scenes(self, name):
        return getattr(self, name)

    def split_of(self):
        return {s: name for name in SPLITS for s in self.scenes(name)}


def split_sizes(n, ratio):
    total = sum(ratio)
    test = n * ratio[2] // total
    val = n * ratio[1] // total
    return n - val - test, val, test


def split_dataset(scene_ids, ratio=(6, 3, 1), seed=0):
    """Seeded shuffle, then test = floor(n*r_test/sum), val = floor(n*r_val/sum), train = rest."""
    ids = list(scene_ids)
    if len(ids) < sum(ratio):
        raise SceneDataError(f"need at least {sum(ratio)} scenes to split {ratio}, got {len(ids)}")
    if len(set(ids)) != len(ids):
        raise SceneDataError("scene ids must be unique")
    rng = rng_stream(seed, "split")
    shuffled = [ids[i] for i in rng.permutation(len(ids))]
    n_train, n_val, n_test = split_sizes(len(ids), ratio)
    return DatasetSplit(
        train=shuffled[n_test + n_val:],
        val=shuffled[n_test:n_test + n_val],
        test=shuffled[:n_test],
    )


def assign_comparisons(split, comparisons):
    """A comparison belongs to a split iff both scenes do; straddling ones are dropped."""
    where = split.split_of()
    assigned = {name: [] for name in SPLITS}
    dropped = 0
    for c in comparisons:
        a, b = where.get(c.left), where.get(c.right)
        if a is not None and a == b:
            assigned[a].append(c)
        else:
            dropped += 1
    if dropped:
        logger.warning("Dropped %d comparisons straddling splits", dropped)
    split.comparisons = assigned
    split.dropped = dropped
    return split


def audit_leakage(split):
    """Number of assigned comparisons touching a scene outside their split (0 when sound)."""
    leaks = 0
    for name in SPLITS:
        members = set(split.scenes(name))
        leaks += sum(1 for c in split.comparisons.get(name, []) if c.left not in members or c.right not in members)
    return leaks


def build_embedder(cfg):
    if cfg.embeddings:
        with open(cfg.embeddings, "rb") as handle:
            return load_embedding_table(handle, seed=cfg.hash_seed)
    return TextEmbedder(mode="hashed", d_t=cfg.hash_dim, seed=cfg.hash_seed)


def read_scenes(path):
    with open(path, "rb") as handle:
        return parse_scene_jsonl(handle)


def read_comparisons(path):
    with open(path, "rb") as handle:
        return ranker.parse_comparisons_jsonl(handle)


def _file_stem(scene_id):
    return re.sub(r"[^A-Za-z0-9._-]", "_", scene_id)


def _report_to_dict(report):
    return {"auc": report.auc, "accuracy": report.accuracy, "recall": report.recall, "f1": report.f1,
            "precision": report.precision, "n_pairs": report.n_pairs, "dimension": report.dimension,
            "n_ties": report.n_ties}


class Pipeline:
    """Runs the stages against one output directory; later stages reload earlier checkpoints."""

    def __init__(self, cfg):
        self.cfg = cfg
        self.out = Path(cfg.out)
        self.out.mkdir(parents=True, exist_ok=True)
        self.graphs = None
        self.comparisons = None
        self.dataset_split = None
        self.embedder = None
        self.featurized = None
        self.encoder = None
        self.tuned_encoders = {}
        self.embeddings = None
        self.scorers = None
        self.summary = None
        self.scores = None
        self.exemplars = None

    @property
    def meta(self):
        return {"config_hash": self.cfg.config_hash(), "seed": self.cfg.seed}

    def path(self, name):
        return self.out / name

    @contextmanager
    def stage(self, name):
        logger.info("stage %s: start", name)
        try:
            yield
        except PipelineError:
            raise
        except Exception as exc:
            write_text(self.path(FAILED_MARKER), f"stage={name}\ncause={type(exc).__name__}: {exc}\n")
            raise PipelineError(name, exc) from exc
        logger.info("stage %s: done", name)

    # stages

    def ingest(self):
        with self.stage("ingest"):
            if not self.cfg.scenes or not self.cfg.comparisons:
                raise SceneDataError("both scenes and comparisons paths are required")
            graphs = read_scenes(self.cfg.scenes)
            comparisons = read_comparisons(self.cfg.comparisons)
            known = {g.scene_id for g in graphs}
            unknown = sorted({s for c in comparisons for s in (c.left, c.right)} - known)
            if unknown:
                raise SceneDataError(f"comparisons reference unknown scenes: {', '.join(unknown[:5])}")
            if self.cfg.aggregate_votes:
                before = len(comparisons)
                comparisons = ranker.aggregate_majority(comparisons)
                logger.info("Aggregated %d votes into %d majority comparisons", before, len(comparisons))
            self.graphs = sorted(graphs, key=lambda g: g.scene_id)
            self.comparisons = comparisons

            rows = []
            for g in self.graphs:
                stats = graph_stats(g)
                rows.append([g.scene_id, g.city or "", stats.node_count, stats.edge_count,
                             stats.distinct_node_labels, stats.distinct_predicates, stats.label_entropy,
                             len(validate_graph(g).warnings)])
            frame = pd.DataFrame(rows, columns=["scene_id", "city", "node_count", "edge_count",
                                                "distinct_node_labels", "distinct_predicates",
                                                "label_entropy", "warnings"])
            counts = pd.Series([c.dimension.value for c in comparisons]).value_counts().sort_index()
            text = render_table(["item", "count"], [["scenes", len(graphs)], ["comparisons", len(comparisons)]]
                                + [[f"comparisons:{dim}", int(n)] for dim, n in counts.items()])
            write_report(str(self.path("dataset_summary")), frame, text, self.meta)
        return self.graphs, self.comparisons

    def split(self):
        if self.graphs is None:
            self.ingest()
        with self.stage("split"):
            result = split_dataset([g.scene_id for g in self.graphs], self.cfg.split, self.cfg.seed)
            assign_comparisons(result, self.comparisons)
            leaks = audit_leakage(result)
            if leaks:
                raise SceneDataError(f"leakage audit found {leaks} comparisons outside their split")
            self.dataset_split = result
            where = result.split_of()
            frame = pd.DataFrame({"scene_id": sorted(where), "split": [where[s] for s in sorted(where)]})
            meta = dict(self.meta, dropped_comparisons=result.dropped, leakage=leaks,
                        **{f"{name}_comparisons": len(result.comparisons[name]) for name in SPLITS})
            write_text(self.path("split_manifest.tsv"), tsv_text(frame, meta))
        return self.dataset_split

    def featurize(self):
        if self.graphs is None:
            self.ingest()
        with self.stage("featurize"):
            self.embedder = build_embedder(self.cfg)
            self.featurized = {g.scene_id: featurize_graph(self.embedder, g) for g in self.graphs}
            if self.embedder.mode == "table" and self.embedder.misses:
                logger.warning("%d labels were missing from the embedding table", self.embedder.misses)
        return self.featurized

    def pretrain(self):
        if self.dataset_split is None:
            self.split()
        if self.featurized is None:
            self.featurize()
        with self.stage("pretrain"):
            train = [self.featurized[s] for s in sorted(self.dataset_split.train)]
            result = mgae.pretrain(train, self.cfg.pretrain)
            self.encoder = result.encoder
            mgae.save_encoder(self.path("encoder.json"), self.encoder, self.cfg.pretrain,
                              dict(self.meta, embedder=self.embedder.describe()))
            frame = pd.DataFrame({"epoch": range(1, len(result.epoch_losses) + 1), "loss": result.epoch_losses})
            write_text(self.path("pretrain_log.tsv"), tsv_text(frame, self.meta, float_format=None))
        return self.encoder

    def _load_encoder(self):
        if self.encoder is None:
            checkpoint = self.path("encoder.json")
            if not checkpoint.exists():
                raise FileNotFoundError(f"{checkpoint} missing; run pretrain first")
            self.encoder, _ = mgae.load_encoder(checkpoint)
        return self.encoder

    def embed(self):
        if self.featurized is None:
            self.featurize()
        with self.stage("embed"):
            self.embeddings = mgae.embed_dataset(list(self.featurized.values()), self._load_encoder())
            ids = sorted(self.embeddings)
            matrix = np.vstack([self.embeddings[s] for s in ids])
            frame = pd.DataFrame(matrix, columns=[f"z{i}" for i in range(matrix.shape[1])])
            frame.insert(0, "scene_id", ids)
            write_text(self.path("scene_embeddings.tsv"), tsv_text(frame, self.meta, float_format=None))
        return self.embeddings

    def train(self):
        if self.dataset_split is None:
            self.split()
        if self.embeddings is None:
            self.embed()
        with self.stage("train"):
            train = self.dataset_split.comparisons["train"]
            val = self.dataset_split.comparisons["val"]
            self.scorers = {}
            log_rows = []
            for dimension in PerceptualDimension:
                items = [c for c in train if c.dimension is dimension]
                if not items:
                    continue
                validation = [c for c in val if c.dimension is dimension]
                trained = ranker.train_dimension(items, self.embeddings, self.cfg.ranker, validation,
                                                 encoder=self.encoder, graphs=self.featurized)
                self.scorers[dimension] = trained.params
                header = dict(self.meta, dimension=dimension.value, hidden=trained.params.hidden,
                              fine_tune=self.cfg.ranker.fine_tune)
                ranker.save_scorer(self.path(f"scorer_{dimension.value}.json"), trained.params, header)
                if trained.encoder is not None:
                    self.tuned_encoders[dimension] = trained.encoder
                    mgae.save_encoder(self.path(f"encoder_{dimension.value}.json"), trained.encoder,
                                      self.cfg.pretrain, dict(self.meta, dimension=dimension.value))
                for epoch, (tl, vl) in enumerate(zip(trained.log.train_loss, trained.log.val_loss), start=1):
                    log_rows.append([dimension.value, epoch, tl, vl])
            if not self.scorers:
                raise SceneDataError("no training comparisons in any dimension")
            frame = pd.DataFrame(log_rows, columns=["dimension", "epoch", "train_loss", "val_loss"])
            write_text(self.path("ranker_log.tsv"), tsv_text(frame, self.meta, float_format=None))
        return self.scorers

    def _load_scorers(self):
        if self.scorers is None:
            self.scorers = {}
            for dimension in PerceptualDimension:
                checkpoint = self.path(f"scorer_{dimension.value}.json")
                if checkpoint.exists():
                    self.scorers[dimension], _ = ranker.load_scorer(checkpoint)
                tuned = self.path(f"encoder_{dimension.value}.json")
                if tuned.exists():
                    self.tuned_encoders[dimension], _ = mgae.load_encoder(tuned)
            if not self.scorers:
                raise FileNotFoundError("no scorer checkpoints; run train first")
        return self.scorers

    def scoring_embeddings(self, featurized=None):
        """Shared embeddings, or per-dimension ones when encoders were fine-tuned."""
        featurized = featurized if featurized is not None else self.featurized
        if featurized is self.featurized and self.embeddings is not None:
            shared = self.embeddings
        else:
            shared = mgae.embed_dataset(list(featurized.values()), self._load_encoder())
        if not self.tuned_encoders:
            return shared
        per_dimension = {}
        for dimension in self.scorers:
            encoder = self.tuned_encoders.get(dimension)
            per_dimension[dimension] = (mgae.embed_dataset(list(featurized.values()), encoder)
                                        if encoder is not None else shared)
        return per_dimension

    def evaluate(self):
        if self.dataset_split is None:
            self.split()
        if self.embeddings is None:
            self.embed()
        with self.stage("evaluate"):
            self._load_scorers()
            test = [c for c in self.dataset_split.comparisons["test"] if c.dimension in self.scorers]
            self.summary = ranker.evaluate_all(test, self.scoring_embeddings(), self.scorers)
            self._write_metric_tables(self.summary, self.meta)
            with open(self.path("test_metrics.json"), "w", encoding="utf-8") as handle:
                json.dump(dict(self.meta, pooled=_report_to_dict(self.summary.pooled),
                               dimension_mean=_report_to_dict(self.summary.dimension_mean)),
                          handle, sort_keys=True, separators=(",", ":"))
                handle.write("\n")
        return self.summary

    def _write_metric_tables(self, summary, meta, prefix="metrics"):
        meta = dict(meta, positive_class="left_wins", n_pairs=summary.pooled.n_pairs, n_ties=summary.pooled.n_ties)
        table1 = {"scene-graph (pooled)": summary.pooled, "scene-graph (dimension mean)": summary.dimension_mean}
        write_report(str(self.path(f"{prefix}_table1")), ranker.table1_frame(table1), ranker.render_table1(table1), meta)
        table2 = {"scene-graph": summary.accuracies}
        write_report(str(self.path(f"{prefix}_table2")), ranker.table2_frame(table2), ranker.render_table2(table2), meta)

    def score(self):
        if self.embeddings is None:
            self.embed()
        with self.stage("score"):
            self._load_scorers()
            self.scores = ranker.score_dataset(sorted(self.featurized), self.scoring_embeddings(), self.scorers)
            write_text(self.path("scores.tsv"),
                       tsv_text(ranker.scores_frame(self.scores), self.meta, float_format="%.10f"))
        return self.scores

    def motifs(self):
        if self.scores is None:
            self.score()
        with self.stage("motifs"):
            frames, sections, correlations = [], [], {}
            for dimension in sorted(self.scorers, key=lambda d: d.value):
                try:
                    rows = analysis.motif_lift(self.graphs, self.scores, dimension,
                                               self.cfg.motifs.q, self.cfg.motifs.min_support)
                except ValueError as exc:
                    logger.warning("skipping motif lift for %s: %s", dimension.value, exc)
                    continue
                frames.append(analysis.motif_frame(rows, dimension))
                sections.append(f"[{dimension.value}]\n" + analysis.render_motifs(rows))
                if len(self.graphs) >= 3:
                    correlations[dimension] = analysis.diversity_correlation(self.graphs, self.scores, dimension)
            columns = ["dimension", "subject", "predicate", "object", "low_freq", "high_freq", "log_odds", "support"]
            frame = pd.concat(frames, ignore_index=True) if frames else pd.DataFrame(columns=columns)
            write_report(str(self.path("motifs")), frame, "\n".join(sections), self.meta)
            if correlations:
                write_report(str(self.path("diversity")), analysis.diversity_frame(correlations),
                             analysis.render_diversity(correlations), self.meta, float_format="%.6f")
            self.exemplars = self.write_exemplars(self.graphs, self.scores, "exemplars")
        return frame

    def write_exemplars(self, graphs, scores, name):
        """<name>.tsv/.txt listing low and high scoring scenes, plus one DOT file per listed scene."""
        rows = []
        for dimension in sorted({s.dimension for s in scores}, key=lambda d: d.value):
            rows.extend(analysis.scene_exemplars(graphs, scores, dimension, self.cfg.motifs.exemplars,
                                                 self.cfg.motifs.exemplars_by_city))
        write_report(str(self.path(name)), analysis.exemplar_frame(rows), analysis.render_exemplars(rows),
                     self.meta, float_format="%.10f")
        thumbnails = self.path(f"{name}_dot")
        thumbnails.mkdir(exist_ok=True)
        by_id = {g.scene_id: g for g in graphs}
        for scene_id in sorted({r.scene_id for r in rows}):
            write_text(thumbnails / f"{_file_stem(scene_id)}.dot", export_dot(by_id[scene_id]))
        return rows

    def run(self):
        """All stages in order; any failure leaves a FAILED marker in the output directory."""
        marker = self.path(FAILED_MARKER)
        if marker.exists():
            marker.unlink()
        self.ingest()
        self.split()
        self.featurize()
        self.pretrain()
        self.embed()
        self.train()
        self.evaluate()
        self.score()
        self.motifs()
        logger.info("Pipeline finished; artifacts in %s", self.out)
        return self.out


def run_pipeline(cfg):
    return Pipeline(cfg).run()


def cross_city(cfg, artifacts=None, target_scenes=None, target_comparisons=None):
    """Apply trained encoder and scorers to another city's scenes without retraining."""
    pipeline = Pipeline(replace(cfg, out=str(artifacts or cfg.out)))
    target_scenes = target_scenes or cfg.target_scenes
    target_comparisons = target_comparisons or cfg.target_comparisons
    with pipeline.stage("cross-city"):
        if not target_scenes or not target_comparisons:
            raise SceneDataError("cross-city needs target scenes and comparisons")
        source_file = pipeline.path("test_metrics.json")
        if not source_file.exists():
            raise FileNotFoundError(f"{source_file} missing; run evaluate first")
        with open(source_file, "r", encoding="utf-8") as handle:
            stored = json.load(handle)["pooled"]
        source = ranker.MetricReport(**stored)

        scorers = pipeline._load_scorers()
        graphs = read_scenes(target_scenes)
        comparisons = read_comparisons(target_comparisons)
        if cfg.aggregate_votes:
            comparisons = ranker.aggregate_majority(comparisons)
        untrained = sorted({c.dimension.value for c in comparisons} - {d.value for d in scorers})
        if untrained:
            raise SceneDataError(f"target dimensions without a trained scorer: {', '.join(untrained)}")

        embedder = build_embedder(cfg)
        featurized = {g.scene_id: featurize_graph(embedder, g) for g in graphs}
        embeddings = pipeline.scoring_embeddings(featurized)
        summary = ranker.evaluate_all(comparisons, embeddings, scorers)
        rows = analysis.cross_city_report(source, summary.pooled)
        write_report(str(pipeline.path("cross_city")), analysis.cross_city_frame(rows),
                     analysis.render_cross_city(rows), pipeline.meta)
        pipeline._write_metric_tables(summary, dict(pipeline.meta, split="target"), prefix="cross_city_metrics")
        scores = ranker.score_dataset(sorted(featurized), embeddings, scorers)
        pipeline.write_exemplars(graphs, scores, "cross_city_exemplars")
    return rows
