import pandas as pd

from src.reporting import format_change, format_value, read_tsv, render_table, round_half_up, tsv_text, write_report


def test_round_half_up():
    assert round_half_up(0.865) == "0.87"
    assert round_half_up(0.125) == "0.13"
    assert round_half_up(-3.448, 1) == "-3.4"


def test_format_value_and_change():
    assert format_value(None) == "undefined"
    assert format_value(-0.001) == "0.00"
    assert format_change(1.04) == "+1.0%"
    assert format_change(-5.95) == "-6.0%"
    assert format_change(0.0) == "0.0%"


def test_render_table_alignment():
    assert render_table(["name", "value"], [["a", "1.00"], ["long name", "10.00"]]) == (
        "name       value\n"
        "a           1.00\n"
        "long name  10.00\n"
    )


def test_tsv_text_header_line():
    frame = pd.DataFrame({"scene_id": ["a"], "score": [0.5]})
    text = tsv_text(frame, {"seed": 1, "config_hash": "abc"})
    assert text == "# config_hash=abc seed=1\nscene_id\tscore\na\t0.500000\n"


def test_write_report_round_trip(tmp_path):
    frame = pd.DataFrame({"metric": ["AUC"], "value": [0.25]})
    write_report(str(tmp_path / "table"), frame, "metric  value\n", {"seed": 0})
    assert read_tsv(tmp_path / "table.tsv").equals(frame)
    assert (tmp_path / "table.txt").read_text(encoding="utf-8") == "# seed=0\nmetric  value\n"
