"""Label text -> unit feature vectors, from a precomputed table or seeded 3-gram hashing."""
import hashlib
import json
import logging
import threading
from dataclasses import dataclass

import numpy as np

from src.errors import SceneDataError
from src.graph_core import SceneGraph, decode_line, normalize_label

logger = logging.getLogger(__name__)

DEFAULT_HASH_DIM = 64
MIN_HASH_DIM = 8
NGRAM = 3
PAD_LEFT = "^"
PAD_RIGHT = "$"

# Vectors already within this distance of unit norm are stored as read.
_RENORM_TOLERANCE = 1e-12


def padded_ngrams(text):
    """Character 3-grams of text with two boundary pad characters on each side."""
    if len(text) < 1:
        raise SceneDataError("cannot embed empty text")
    padded = PAD_LEFT * (NGRAM - 1) + text + PAD_RIGHT * (NGRAM - 1)
    return [padded[i:i + NGRAM] for i in range(len(padded) - NGRAM + 1)]


def ngram_buckets(text, d_t, seed):
    """(bucket, sign) for every padded 3-gram under a keyed 64-bit BLAKE2b hash."""
    key = int(seed).to_bytes(8, "little")
    buckets = []
    for gram in padded_ngrams(text):
        digest = hashlib.blake2b(gram.encode("utf-8"), digest_size=8, key=key).digest()
        value = int.from_bytes(digest, "little")
        sign = -1.0 if value >> 63 else 1.0
        buckets.append((value % d_t, sign))
    return buckets


def hashed_embed(text, d_t=DEFAULT_HASH_DIM, seed=0):
    """Signed bag of hashed 3-grams, L2-normalized."""
    if d_t < MIN_HASH_DIM:
        raise ValueError(f"hash dimension must be at least {MIN_HASH_DIM}, got {d_t}")
    if seed < 0 or seed >= 2 ** 64:
        raise ValueError("hash seed must be an unsigned 64-bit integer")
    buckets = ngram_buckets(text, d_t, seed)
    vector = np.zeros(d_t)
    for bucket, sign in buckets:
        vector[bucket] += sign
    if not vector.any():
        # Signs cancelled everywhere; fall back to unsigned counts.
        for bucket, _ in buckets:
            vector[bucket] += 1.0
    return vector / np.linalg.norm(vector)


class TextEmbedder:
    """Shared encoder for node labels and edge predicates."""

    def __init__(self, mode="hashed", d_t=DEFAULT_HASH_DIM, seed=0, table=None):
        if mode not in ("table", "hashed"):
            raise ValueError(f"Unknown embedder mode: {mode}")
        if mode == "table":
            if not table:
                raise ValueError("Table mode requires a non-empty table")
            widths = {len(v) for v in table.values()}
            if len(widths) != 1:
                raise SceneDataError(f"embedding table has inconsistent widths {sorted(widths)}")
            d_t = widths.pop()
        elif d_t < MIN_HASH_DIM:
            raise ValueError(f"hash dimension must be at least {MIN_HASH_DIM}, got {d_t}")
        self.mode = mode
        self.d_t = int(d_t)
        self.seed = int(seed)
        self.table = dict(table or {})
        self._misses = 0
        self._lock = threading.Lock()

    @property
    def misses(self):
        return self._misses

    def describe(self):
        """Header fields identifying this embedder in artifacts."""
        return {"mode": self.mode, "d_t": self.d_t, "seed": self.seed, "table_size": len(self.table)}

    def embed(self, text):
        key = normalize_label(text)
        if not key:
            raise SceneDataError("cannot embed empty text")
        if self.mode == "table":
            vector = self.table.get(key)
            if vector is not None:
                return vector.copy()
            with self._lock:
                self._misses += 1
            logger.debug("embedding table miss for %r, using hashed fallback", key)
        return hashed_embed(key, self.d_t, self.seed)


def embed_text(e, text):
    return e.embed(text)


def load_embedding_table(stream, seed=0):
    """Read {"text", "vector"} JSONL lines into a table-mode TextEmbedder."""
    table = {}
    width = None
    for line_no, raw in enumerate(stream, start=1):
        line = decode_line(raw, line_no)
        if not line.strip():
            continue
        try:
            record = json.loads(line)
            text = normalize_label(record["text"])
            vector = np.asarray(record["vector"], dtype=np.float64)
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            raise SceneDataError(f"malformed embedding record ({exc})", line=line_no) from exc

        if not text:
            raise SceneDataError("empty embedding text", line=line_no)
        if vector.ndim != 1 or vector.size == 0:
            raise SceneDataError("vector must be a non-empty list of numbers", line=line_no)
        if width is None:
            width = vector.size
        elif vector.size != width:
            raise SceneDataError(f"vector width {vector.size} differs from {width}", line=line_no)
        if text in table:
            raise SceneDataError(f"duplicate text {text!r}", line=line_no)
        if not np.all(np.isfinite(vector)):
            raise SceneDataError("vector has non-finite entries", line=line_no)
        norm = np.linalg.norm(vector)
        if norm == 0.0:
            raise SceneDataError(f"zero vector for {text!r}", line=line_no)
        if abs(norm - 1.0) > _RENORM_TOLERANCE:
            vector = vector / norm
        table[text] = vector

    if not table:
        raise SceneDataError("embedding table is empty")
    logger.info("Loaded embedding table with %d texts, width %d", len(table), width)
    return TextEmbedder(mode="table", seed=seed, table=table)


def save_embedding_table(embedder):
    """Render a table-mode embedder as JSONL in insertion order."""
    if embedder.mode != "table":
        raise ValueError("Only table-mode embedders can be saved")
    return "".join(
        json.dumps({"text": text, "vector": [float(x) for x in vector]}, separators=(",", ":")) + "\n"
        for text, vector in embedder.table.items()
    )


@dataclass(frozen=True, eq=False)
class FeaturizedGraph:
    graph: SceneGraph
    node_features: np.ndarray
    edge_features: np.ndarray

    @property
    def d_t(self):
        return self.node_features.shape[1]


def featurize_graph(e, g):
    """Embed every node label and edge predicate of a scene."""
    node_features = np.array([e.embed(n.label) for n in g.nodes]).reshape(len(g.nodes), e.d_t)
    edge_features = np.array([e.embed(x.predicate) for x in g.edges]).reshape(len(g.edges), e.d_t)
    node_features.setflags(write=False)
    edge_features.setflags(write=False)
    return FeaturizedGraph(graph=g, node_features=node_features, edge_features=edge_features)
