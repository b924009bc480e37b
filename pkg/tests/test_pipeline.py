import json

import pytest

from src.errors import ConfigError, PipelineError, SceneDataError
from src.graph_core import serialize_scene_jsonl
from src.pairwise_ranker import ComparisonRecord, PerceptualDimension, Winner, serialize_comparisons_jsonl
from src.pipeline import (
    FAILED_MARKER,
    Pipeline,
    assign_comparisons,
    audit_leakage,
    build_config,
    cross_city,
    load_config,
    parse_ratio,
    run_pipeline,
    split_dataset,
    split_sizes,
)
from src.synthetic import generate_scenes

DIMENSIONS = (PerceptualDimension.SAFE, PerceptualDimension.LIVELY)
OUTPUTS = (
    "dataset_summary.tsv",
    "split_manifest.tsv",
    "encoder.json",
    "scene_embeddings.tsv",
    "scorer_safe.json",
    "scorer_lively.json",
    "metrics_table1.tsv",
    "metrics_table2.tsv",
    "scores.tsv",
    "motifs.tsv",
    "exemplars.tsv",
)


def _all_pairs(quality, dimensions=DIMENSIONS):
    ids = sorted(quality)
    records = []
    for dimension in dimensions:
        for i, left in enumerate(ids):
            for right in ids[i + 1:]:
                winner = Winner.LEFT if quality[left] > quality[right] else Winner.RIGHT
                records.append(ComparisonRecord(left, right, dimension, winner))
    return records


@pytest.fixture
def fixture_files(tmp_path):
    graphs, quality = generate_scenes(20, seed=11)
    scenes = tmp_path / "scenes.jsonl"
    comparisons = tmp_path / "comparisons.jsonl"
    scenes.write_text(serialize_scene_jsonl(graphs), encoding="utf-8")
    comparisons.write_text(serialize_comparisons_jsonl(_all_pairs(quality)), encoding="utf-8")
    return tmp_path, scenes, comparisons


def _config(tmp_path, scenes, comparisons, **extra):
    values = {
        "scenes": str(scenes),
        "comparisons": str(comparisons),
        "out": str(tmp_path / "out"),
        "split": "2:1:1",
        "seed": 3,
        "hash_dim": 16,
        "hidden": 16,
        "pretrain_epochs": 2,
        "pretrain_batch_size": 8,
        "ranker_epochs": 3,
        "ranker_hidden": 8,
        "motif_min_support": 2,
    }
    values.update(extra)
    return build_config(values)


@pytest.mark.parametrize("n,expected", [(10, (6, 3, 1)), (17, (11, 5, 1)), (1000, (600, 300, 100))])
def test_split_sizes(n, expected):
    assert split_sizes(n, (6, 3, 1)) == expected
    split = split_dataset([f"s{i}" for i in range(n)], (6, 3, 1), seed=0)
    assert (len(split.train), len(split.val), len(split.test)) == expected


def test_split_is_a_partition_and_deterministic():
    ids = [f"s{i:03d}" for i in range(57)]
    split = split_dataset(ids, (6, 3, 1), seed=9)
    parts = [set(split.train), set(split.val), set(split.test)]
    assert sum(len(p) for p in parts) == len(ids)
    assert set().union(*parts) == set(ids)
    assert split_dataset(ids, (6, 3, 1), seed=9) == split
    assert split_dataset(ids, (6, 3, 1), seed=10).test != split.test


def test_split_errors():
    with pytest.raises(SceneDataError):
        split_dataset(["a", "b"], (6, 3, 1))
    with pytest.raises(SceneDataError):
        split_dataset(["a"] * 10, (6, 3, 1))


def test_assign_comparisons_drops_straddling_pairs():
    ids = [f"s{i}" for i in range(20)]
    split = split_dataset(ids, (6, 3, 1), seed=1)
    comparisons = [ComparisonRecord(a, b, PerceptualDimension.SAFE, Winner.LEFT)
                   for i, a in enumerate(ids) for b in ids[i + 1:]]
    assign_comparisons(split, comparisons)
    kept = sum(len(v) for v in split.comparisons.values())
    assert kept + split.dropped == len(comparisons)
    assert len(split.comparisons["train"]) == 12 * 11 // 2
    assert audit_leakage(split) == 0


def test_parse_ratio():
    assert parse_ratio("6:3:1") == (6, 3, 1)
    for bad in ("6:3", "6:0:1", "a:b:c"):
        with pytest.raises(ConfigError):
            parse_ratio(bad)


def test_load_config_and_overrides(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("# demo\nseed = 7\nsplit=3:1:1\nhidden=32  # wide\nfine_tune=yes\n", encoding="utf-8")
    cfg = load_config(path, {"seed": "9", "out": None})
    assert cfg.seed == 9
    assert cfg.split == (3, 1, 1)
    assert cfg.pretrain.hidden == 32
    assert cfg.pretrain.seed == 9
    assert cfg.ranker.seed == 9
    assert cfg.ranker.fine_tune is True
    assert cfg.out == "artifacts"


def test_load_config_unknown_key(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("learning_rate=0.1\n", encoding="utf-8")
    with pytest.raises(ConfigError, match="learning_rate"):
        load_config(path)


def test_build_config_bad_values():
    with pytest.raises(ConfigError):
        build_config({"mask_rate": "1.5"})
    with pytest.raises(ConfigError):
        build_config({"seed": "many"})
    with pytest.raises(ConfigError):
        build_config({"seed": "-1"})
    with pytest.raises(ConfigError):
        build_config({"exemplars": "0"})


def test_exemplar_config_keys():
    cfg = build_config({"exemplars": "5", "exemplars_by_city": "no"})
    assert cfg.motifs.exemplars == 5
    assert cfg.motifs.exemplars_by_city is False
    assert build_config({}).motifs.exemplars_by_city is True


def test_config_hash_is_stable():
    a = build_config({"seed": "1", "hidden": "32"})
    b = build_config({"hidden": 32, "seed": 1})
    assert a.config_hash() == b.config_hash()
    assert len(a.config_hash()) == 16
    assert build_config({"seed": "2", "hidden": "32"}).config_hash() != a.config_hash()


def test_run_writes_every_output(fixture_files):
    tmp_path, scenes, comparisons = fixture_files
    cfg = _config(tmp_path, scenes, comparisons)
    out = run_pipeline(cfg)
    for name in OUTPUTS:
        assert (out / name).exists(), name
    assert not (out / FAILED_MARKER).exists()
    header = (out / "metrics_table1.tsv").read_text(encoding="utf-8").splitlines()[0]
    assert f"config_hash={cfg.config_hash()}" in header
    assert "seed=3" in header
    metrics = json.loads((out / "test_metrics.json").read_text(encoding="utf-8"))
    assert metrics["pooled"]["n_pairs"] > 0
    score_lines = (out / "scores.tsv").read_text(encoding="utf-8").splitlines()
    assert len(score_lines) == 2 + 20 * len(DIMENSIONS)


def test_run_writes_exemplars_with_thumbnails(fixture_files):
    tmp_path, scenes, comparisons = fixture_files
    out = run_pipeline(_config(tmp_path, scenes, comparisons, exemplars=2))
    lines = (out / "exemplars.tsv").read_text(encoding="utf-8").splitlines()
    assert lines[1].split("\t") == ["dimension", "group", "end", "position", "scene_id", "score"]
    body = [line.split("\t") for line in lines[2:]]
    assert len(body) == 2 * 2 * len(DIMENSIONS)
    assert {row[1] for row in body} == {"unknown"}
    for dimension in ("lively", "safe"):
        rows = [row for row in body if row[0] == dimension]
        assert [row[2] for row in rows] == ["low", "low", "high", "high"]
        assert [int(row[3]) for row in rows] == [1, 2, 19, 20]
        assert [float(row[5]) for row in rows] == sorted(float(row[5]) for row in rows)
    thumbnails = sorted((out / "exemplars_dot").iterdir())
    assert [p.stem for p in thumbnails] == sorted({row[4] for row in body})
    first = thumbnails[0]
    assert first.read_text(encoding="utf-8").startswith(f'digraph "{first.stem}" {{')


def test_run_is_byte_reproducible(fixture_files):
    tmp_path, scenes, comparisons = fixture_files
    cfg = _config(tmp_path, scenes, comparisons)
    out = run_pipeline(cfg)
    names = ("metrics_table1.tsv", "metrics_table2.tsv", "scores.tsv", "scene_embeddings.tsv", "encoder.json")
    first = {name: (out / name).read_bytes() for name in names}
    run_pipeline(cfg)
    assert {name: (out / name).read_bytes() for name in names} == first


def test_missing_comparisons_fails_in_ingest(fixture_files):
    tmp_path, scenes, _ = fixture_files
    cfg = _config(tmp_path, scenes, tmp_path / "absent.jsonl")
    with pytest.raises(PipelineError) as info:
        run_pipeline(cfg)
    assert info.value.stage == "ingest"
    marker = (tmp_path / "out" / FAILED_MARKER).read_text(encoding="utf-8")
    assert marker.startswith("stage=ingest\n")
    assert not (tmp_path / "out" / "encoder.json").exists()


def test_unknown_scene_in_comparisons(fixture_files):
    tmp_path, scenes, _ = fixture_files
    stray = tmp_path / "stray.jsonl"
    stray.write_text('{"left":"scene00","right":"elsewhere","dimension":"safe","winner":"left"}\n', encoding="utf-8")
    with pytest.raises(PipelineError, match="unknown scenes"):
        Pipeline(_config(tmp_path, scenes, stray)).ingest()


def test_split_manifest_records_audit(fixture_files):
    tmp_path, scenes, comparisons = fixture_files
    pipeline = Pipeline(_config(tmp_path, scenes, comparisons))
    pipeline.split()
    text = (tmp_path / "out" / "split_manifest.tsv").read_text(encoding="utf-8")
    assert "leakage=0" in text.splitlines()[0]
    assert text.splitlines()[1] == "scene_id\tsplit"
    assert len(text.splitlines()) == 22


def test_cross_city_on_the_source_test_set(fixture_files):
    tmp_path, scenes, comparisons = fixture_files
    cfg = _config(tmp_path, scenes, comparisons)
    pipeline = Pipeline(cfg)
    pipeline.run()
    target = tmp_path / "target_comparisons.jsonl"
    target.write_text(serialize_comparisons_jsonl(pipeline.dataset_split.comparisons["test"]), encoding="utf-8")

    rows = cross_city(cfg, target_scenes=str(scenes), target_comparisons=str(target))
    for row in rows:
        assert row.target == row.source
        assert row.change in (0.0, None)
    assert (tmp_path / "out" / "cross_city.txt").exists()
    assert (tmp_path / "out" / "cross_city_metrics_table1.tsv").exists()
    assert (tmp_path / "out" / "cross_city_exemplars.tsv").exists()
    assert any((tmp_path / "out" / "cross_city_exemplars_dot").iterdir())


def test_cross_city_ignores_scene_ids(fixture_files):
    tmp_path, scenes, comparisons = fixture_files
    cfg = _config(tmp_path, scenes, comparisons)
    pipeline = Pipeline(cfg)
    pipeline.run()
    graphs, _ = generate_scenes(20, seed=11, prefix="renamed")
    renamed_scenes = tmp_path / "renamed.jsonl"
    renamed_scenes.write_text(serialize_scene_jsonl(graphs), encoding="utf-8")
    test = pipeline.dataset_split.comparisons["test"]
    plain = tmp_path / "plain.jsonl"
    plain.write_text(serialize_comparisons_jsonl(test), encoding="utf-8")
    renamed = tmp_path / "renamed_comparisons.jsonl"
    renamed.write_text(serialize_comparisons_jsonl(
        [ComparisonRecord(c.left.replace("scene", "renamed"), c.right.replace("scene", "renamed"),
                          c.dimension, c.winner) for c in test]), encoding="utf-8")

    a = cross_city(cfg, target_scenes=str(scenes), target_comparisons=str(plain))
    b = cross_city(cfg, target_scenes=str(renamed_scenes), target_comparisons=str(renamed))
    assert [r.target for r in a] == [r.target for r in b]


def test_cross_city_rejects_untrained_dimension(fixture_files):
    tmp_path, scenes, comparisons = fixture_files
    cfg = _config(tmp_path, scenes, comparisons)
    run_pipeline(cfg)
    _, quality = generate_scenes(20, seed=11)
    wealthy = tmp_path / "wealthy.jsonl"
    wealthy.write_text(serialize_comparisons_jsonl(_all_pairs(quality, [PerceptualDimension.WEALTHY])[:5]),
                       encoding="utf-8")
    with pytest.raises(PipelineError, match="wealthy"):
        cross_city(cfg, target_scenes=str(scenes), target_comparisons=str(wealthy))
