import io
import json
import threading

import numpy as np
import pytest

from src.errors import SceneDataError
from src.graph_core import make_graph
from src.text_features import (
    TextEmbedder,
    embed_text,
    featurize_graph,
    hashed_embed,
    load_embedding_table,
    ngram_buckets,
    padded_ngrams,
    save_embedding_table,
)

WORDS = [
    "car", "road", "sidewalk", "building", "tree", "person", "bench", "lamp", "wall", "graffiti",
    "trash", "sky", "plant", "bicycle", "pedestrian", "fence", "sign", "pole", "bus", "truck",
    "parked on", "beside", "along", "near", "on", "above", "sitting on", "walking on", "growing along",
    "window", "door", "roof", "umbrella", "dog", "cat", "bird", "cloud", "grass", "flower", "hydrant",
    "bridge", "river", "train", "rail", "tunnel", "stairs", "railing", "balcony", "awning", "shop",
    "market", "stall", "crosswalk", "curb", "gutter", "manhole", "bollard", "cone", "barrier", "scaffold",
    "crane", "container", "bin", "bag", "box", "pallet", "cart", "scooter", "motorcycle", "van",
    "taxi", "ambulance", "police car", "traffic light", "street sign", "billboard", "poster", "mural",
    "statue", "fountain", "park", "playground", "swing", "slide", "field", "track", "court", "net",
    "goal", "tent", "canopy", "kiosk", "booth", "antenna", "chimney", "garage", "gate", "hedge",
    "mailbox", "lantern",
]


def _table_stream(rows):
    return io.BytesIO("".join(json.dumps({"text": t, "vector": v}) + "\n" for t, v in rows).encode("utf-8"))


def test_padded_ngrams():
    assert padded_ngrams("a") == ["^^a", "^a$", "a$$"]
    assert len(padded_ngrams("car")) == 5


def test_hashed_embed_deterministic_and_unit():
    a = hashed_embed("sidewalk", 64, 0)
    b = hashed_embed("sidewalk", 64, 0)
    assert np.array_equal(a, b)
    assert np.linalg.norm(a) == pytest.approx(1.0, abs=1e-6)


def test_hashed_embed_single_char_buckets():
    vector = hashed_embed("a", 8, 0)
    buckets = ngram_buckets("a", 8, 0)
    assert len(buckets) == 3
    totals = {}
    for bucket, sign in buckets:
        totals[bucket] = totals.get(bucket, 0.0) + sign
    expected = {b for b, total in totals.items() if total != 0} or set(totals)
    assert set(np.flatnonzero(vector)) == expected


def test_hashed_embed_rejects_small_dim():
    with pytest.raises(ValueError):
        hashed_embed("car", 4, 0)


def test_hashed_embed_seed_changes_vectors():
    differing = sum(not np.array_equal(hashed_embed(w, 64, 0), hashed_embed(w, 64, 1)) for w in WORDS[:100])
    assert differing >= 99


def test_distinct_words_distinct_directions():
    e = TextEmbedder(d_t=64)
    cosine = float(embed_text(e, "car") @ embed_text(e, "building"))
    assert cosine != pytest.approx(1.0)


def test_embed_text_normalizes_and_rejects_empty():
    e = TextEmbedder(d_t=16, seed=3)
    assert np.array_equal(embed_text(e, " Car "), embed_text(e, "car"))
    with pytest.raises(SceneDataError):
        embed_text(e, "   ")


def test_load_embedding_table():
    e = load_embedding_table(_table_stream([("car", [1.0, 0.0, 0.0, 0.0]), ("road", [0.0, 3.0, 4.0, 0.0])]))
    assert e.mode == "table"
    assert e.d_t == 4
    assert np.allclose(embed_text(e, "road"), [0.0, 0.6, 0.8, 0.0])


def test_load_embedding_table_width_mismatch():
    with pytest.raises(SceneDataError):
        load_embedding_table(_table_stream([("car", [1.0, 0, 0, 0]), ("road", [1.0, 0, 0, 0, 0])]))


def test_load_embedding_table_zero_vector():
    with pytest.raises(SceneDataError, match="zero vector"):
        load_embedding_table(_table_stream([("car", [0.0, 0.0, 0.0, 0.0])]))


def test_load_embedding_table_duplicate_text():
    with pytest.raises(SceneDataError, match="duplicate"):
        load_embedding_table(_table_stream([("car", [1.0, 0, 0, 0]), ("Car", [0, 1.0, 0, 0])]))


def test_load_embedding_table_invalid_utf8_reports_line():
    data = b'{"text":"car","vector":[1.0,0.0]}\n{"text":"\xc3(","vector":[0.0,1.0]}\n'
    with pytest.raises(SceneDataError, match="invalid UTF-8") as info:
        load_embedding_table(io.BytesIO(data))
    assert info.value.line == 2


def test_table_hit_never_counts_a_miss():
    rng = np.random.default_rng(0)
    rows = [(w, list(rng.normal(size=16))) for w in WORDS[:10]]
    e = load_embedding_table(_table_stream(rows))
    for w in WORDS[:10]:
        embed_text(e, w)
    assert e.misses == 0
    vector = embed_text(e, "unseen label")
    assert e.misses == 1
    assert np.array_equal(vector, hashed_embed("unseen label", 16, 0))


def test_miss_counter_is_thread_safe():
    e = TextEmbedder(mode="table", table={"car": np.eye(8)[0]})

    def work():
        for _ in range(200):
            e.embed("not in table")

    threads = [threading.Thread(target=work) for _ in range(4)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert e.misses == 800


def test_embedding_table_round_trip():
    rng = np.random.default_rng(7)
    rows = [(w, list(rng.normal(size=12))) for w in WORDS[:20]]
    first = save_embedding_table(load_embedding_table(_table_stream(rows)))
    second = save_embedding_table(load_embedding_table(io.BytesIO(first.encode("utf-8"))))
    assert first == second


def test_featurize_graph_shapes():
    e = TextEmbedder(d_t=32)
    g = make_graph("s", [(0, "car"), (1, "car")], [(0, 1, "near")])
    fg = featurize_graph(e, g)
    assert fg.node_features.shape == (2, 32)
    assert fg.edge_features.shape == (1, 32)
    assert np.array_equal(fg.node_features[0], fg.node_features[1])
    assert np.allclose(np.linalg.norm(fg.node_features, axis=1), 1.0, atol=1e-6)
    assert fg.d_t == 32


def test_featurize_zero_edge_graph():
    e = TextEmbedder(d_t=16)
    fg = featurize_graph(e, make_graph("s", [(0, "tree")], []))
    assert fg.edge_features.shape == (0, 16)


def test_featurize_is_pure():
    e = TextEmbedder(d_t=16, seed=5)
    g = make_graph("s", [(0, "car"), (1, "road")], [(0, 1, "parked on")])
    a, b = featurize_graph(e, g), featurize_graph(e, g)
    assert a.node_features.tobytes() == b.node_features.tobytes()
    assert a.edge_features.tobytes() == b.edge_features.tobytes()
    with pytest.raises(ValueError):
        a.node_features[0, 0] = 1.0
