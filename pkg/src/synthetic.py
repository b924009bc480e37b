"""Synthetic street scenes with a planted quality signal, for fixtures and acceptance runs."""
import logging
from dataclasses import dataclass, field
from typing import Dict, List

import numpy as np
from scipy.special import expit

from src.graph_core import from_triplets
from src.pairwise_ranker import ComparisonRecord, PerceptualDimension, Winner
from src.seeding import rng_stream

logger = logging.getLogger(__name__)

AMENITY_MOTIFS = (
    ("person", "sitting on", "bench"),
    ("tree", "along", "sidewalk"),
    ("lamp", "beside", "building"),
    ("plant", "growing along", "wall"),
    ("bicycle", "parked beside", "building"),
    ("pedestrian", "walking on", "sidewalk"),
)

NEGATIVE_MOTIFS = (
    ("graffiti", "on", "wall"),
    ("trash", "beside", "road"),
    ("car", "parked on", "sidewalk"),
)

NEUTRAL_MOTIFS = (
    ("car", "on", "road"),
    ("sky", "above", "building"),
    ("car", "near", "car"),
    ("road", "beside", "road"),
)

# Label variants used to simulate another city's parser vocabulary.
SYNONYMS = {
    "car": "automobile",
    "sidewalk": "pavement",
    "building": "facade",
    "road": "street",
    "person": "man",
    "tree": "sapling",
    "trash": "litter",
    "wall": "fence",
    "lamp": "streetlight",
}


@dataclass
class SyntheticCorpus:
    graphs: List = field(default_factory=list)
    quality: Dict[str, float] = field(default_factory=dict)
    comparisons: List[ComparisonRecord] = field(default_factory=list)


def _shifted(label, rng, vocabulary_shift):
    if vocabulary_shift > 0 and label in SYNONYMS and rng.random() < vocabulary_shift:
        return SYNONYMS[label]
    return label


def generate_scenes(n, seed=0, quality_range=3.0, planted=8, max_neutral=2,
                    vocabulary_shift=0.0, city=None, prefix="scene"):
    """Scenes whose share of amenity versus negative motifs tracks a uniform quality u."""
    rng = rng_stream(seed, "synthetic.scenes")
    graphs, quality = [], {}
    width = len(str(max(n - 1, 0)))
    for i in range(n):
        u = float(rng.uniform(-quality_range, quality_range))
        share = (u + quality_range) / (2 * quality_range)
        positives = int(np.floor(share * planted + 0.5))
        chosen = [AMENITY_MOTIFS[k] for k in rng.integers(len(AMENITY_MOTIFS), size=positives)]
        chosen += [NEGATIVE_MOTIFS[k] for k in rng.integers(len(NEGATIVE_MOTIFS), size=planted - positives)]
        chosen += [NEUTRAL_MOTIFS[k] for k in rng.integers(len(NEUTRAL_MOTIFS), size=rng.integers(0, max_neutral + 1))]
        order = rng.permutation(len(chosen))

        triplets = []
        for k, index in enumerate(order):
            subject, predicate, obj = chosen[index]
            triplets.append((_shifted(subject, rng, vocabulary_shift), predicate,
                             _shifted(obj, rng, vocabulary_shift), 2 * k, 2 * k + 1))
        scene_id = f"{prefix}{i:0{width}d}"
        graphs.append(from_triplets(scene_id, triplets, city=city))
        quality[scene_id] = u
    logger.info("Generated %d synthetic scenes", n)
    return graphs, quality


def sample_comparisons(quality, per_dimension, seed=0, dimensions=None):
    """Random pairs per dimension with winner ~ Bernoulli(sigmoid(u_left - u_right))."""
    rng = rng_stream(seed, "synthetic.comparisons")
    scene_ids = sorted(quality)
    if len(scene_ids) < 2:
        raise ValueError("need at least two scenes to compare")
    dimensions = dimensions or list(PerceptualDimension)
    records = []
    for dimension in dimensions:
        for _ in range(per_dimension):
            i, j = rng.choice(len(scene_ids), size=2, replace=False)
            left, right = scene_ids[i], scene_ids[j]
            p_left = expit(quality[left] - quality[right])
            winner = Winner.LEFT if rng.random() < p_left else Winner.RIGHT
            records.append(ComparisonRecord(left, right, dimension, winner))
    return records


def generate_corpus(n_scenes, comparisons_per_dimension, seed=0, **scene_options):
    graphs, quality = generate_scenes(n_scenes, seed=seed, **scene_options)
    comparisons = sample_comparisons(quality, comparisons_per_dimension, seed=seed)
    return SyntheticCorpus(graphs=graphs, quality=quality, comparisons=comparisons)


def bayes_accuracy(comparisons, quality):
    """Expected accuracy of predicting each pair with the generator's own probabilities."""
    p = np.array([expit(quality[c.left] - quality[c.right]) for c in comparisons if c.winner is not Winner.TIE])
    if p.size == 0:
        raise ValueError("no decided comparisons")
    return float(np.mean(np.maximum(p, 1.0 - p)))
