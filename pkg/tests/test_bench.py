import csv
import json
from dataclasses import replace

import pytest

from selfres.bench import (ResultRow, RunRequest, load_request, main, parse_seeds,
                           request_from_dict, run_benchmark, sweep, sweep_requests)
from selfres.errors import ConfigError, RequestError
from selfres.model import init_weights
from selfres.oracle import baseline_run
from selfres.bench import _video_for

from conftest import SMALL

SMALL_VIDEO = {"num_frames": 16, "patches_per_frame": 4,
               "event": {"frame_range": [4, 7], "patch_range": [1, 2],
                         "direction": "aligned", "bias": 3.0}}
BASE = RunRequest(model=SMALL, video=SMALL_VIDEO, T=8, S=4, max_new=3)


def read_csv(path):
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.reader(fh))


def test_ten_seeds_ten_rows(tmp_path, small_weights):
    out = tmp_path / "r.csv"
    run_benchmark(replace(BASE, seeds=tuple(range(10))), out, small_weights)
    rows = read_csv(out)
    assert rows[0] == ResultRow.header() and len(rows) == 11
    assert b"\r" not in out.read_bytes()


def test_rerun_is_identical_except_clock(tmp_path, small_weights):
    req = replace(BASE, seeds=(0, 1, 2))
    run_benchmark(req, tmp_path / "a.csv", small_weights)
    run_benchmark(req, tmp_path / "b.csv")
    a, b = read_csv(tmp_path / "a.csv"), read_csv(tmp_path / "b.csv")
    clock = a[0].index("wall_clock_ms")
    strip = lambda rows: [r[:clock] + r[clock + 1:] for r in rows]
    assert strip(a) == strip(b)


def test_appending_keeps_one_header(tmp_path, small_weights):
    out = tmp_path / "r.csv"
    run_benchmark(BASE, out, small_weights)
    run_benchmark(BASE, out, small_weights)
    rows = read_csv(out)
    assert len(rows) == 3 and rows[1] == rows[2][:15] + [rows[1][15]] + rows[2][16:]


def test_single_path_row_matches_baseline(tmp_path, small_weights):
    req = replace(BASE, T=8, S=8, mode="smooth", seeds=(4,))
    (row,) = run_benchmark(req, tmp_path / "r.csv", small_weights)
    video = _video_for(req, small_weights, 4)
    base = baseline_run(video, req.prompt, small_weights, 8, max_new=3)
    assert row.R == 1
    assert row.attention_macs == base.counters.attention_macs
    assert row.output_ids == " ".join(map(str, base.output_ids))


def test_config_hash_ignores_seeds():
    assert BASE.config_hash() == replace(BASE, seeds=(5, 6)).config_hash()
    assert BASE.config_hash() != replace(BASE, mode="smooth").config_hash()


def test_layer_sweep_rows(tmp_path):
    base = RunRequest(max_new=1)
    reqs = sweep_requests("layer", "1..8", base)
    assert len(reqs) == 16
    assert [(r.layer, r.mode) for r in reqs[:2]] == [(1, "regular"), (1, "smooth")]


@pytest.mark.slow
def test_layer_sweep_writes_sixteen_rows(tmp_path):
    out = tmp_path / "layers.csv"
    rows = sweep("layer", "1..8", RunRequest(max_new=1), out)
    assert len(rows) == 16 and len(read_csv(out)) == 17


def test_context_grid_path_counts(tmp_path, small_weights):
    video = {"num_frames": 128, "patches_per_frame": 1,
             "event": {"frame_range": [40, 60], "patch_range": [0, 0],
                       "direction": "aligned", "bias": 3.0}}
    base = replace(BASE, video=video, max_new=1)
    rows = sweep("context", "32x64,32x96,32x128,64x128", base, tmp_path / "c.csv",
                 small_weights)
    assert [(r.S, r.T, r.R) for r in rows] == [(32, 64, 2), (32, 96, 3), (32, 128, 4),
                                              (64, 128, 2)]


def test_strategy_sweep_recall_is_identical(tmp_path, small_weights):
    rows = sweep("strategy", "reassigned,dup,inc,single", replace(BASE, seeds=(0, 1)),
                 tmp_path / "s.csv", small_weights)
    assert len(rows) == 8
    assert "reassigned" in {r.position_strategy for r in rows}
    by_seed = {}
    for r in rows:
        by_seed.setdefault(r.seed, set()).add(r.planted_recall)
    assert all(len(v) == 1 for v in by_seed.values())


@pytest.mark.parametrize("dim,grid,needle", [
    ("layer", "0,3", "0"), ("layer", [9], "9"),
    ("context", "32x100", "T=100"), ("strategy", "diagonal", "diagonal"),
])
def test_bad_grid_value_is_named(dim, grid, needle):
    with pytest.raises(ConfigError, match=needle):
        sweep_requests(dim, grid, RunRequest())


def test_empty_grid():
    with pytest.raises(ConfigError):
        sweep_requests("layer", "", RunRequest())


def test_malformed_json(tmp_path):
    p = tmp_path / "bad.json"
    p.write_text('{\n  "T": 16,\n  "S": 8\n  "mode": "smooth"\n}\n')
    with pytest.raises(RequestError, match="line 4"):
        load_request(p)


@pytest.mark.parametrize("data,field", [
    ({"T": "16"}, "T"), ({"mode": 3}, "mode"), ({"colour": 1}, "colour"),
    ({"model": {"num_layers": 0}}, "model"), ({"prompt": {"system": [1]}}, "prompt"),
])
def test_bad_fields_are_named(data, field):
    with pytest.raises(RequestError, match=field):
        request_from_dict(data)


def test_request_round_trip(tmp_path):
    p = tmp_path / "req.json"
    p.write_text(json.dumps(BASE.to_dict()))
    assert load_request(p).config_hash() == BASE.config_hash()


def test_parse_seeds():
    assert parse_seeds("0..3") == (0, 1, 2, 3)
    assert parse_seeds("4,7") == (4, 7)
    assert parse_seeds(2) == (2,)
    with pytest.raises(RequestError):
        parse_seeds("5..1")


def test_cli_run_and_overrides(tmp_path, capsys):
    cfg = tmp_path / "req.json"
    cfg.write_text(json.dumps({**BASE.to_dict(), "K": None}))
    out = tmp_path / "cli.csv"
    code = main(["run", "--config", str(cfg), "--seeds", "0..1", "--mode", "smooth",
                 "--keep", "5", "--out", str(out)])
    assert code == 0
    rows = read_csv(out)
    assert len(rows) == 3
    h = rows[0]
    assert {r[h.index("mode")] for r in rows[1:]} == {"smooth"}
    assert {r[h.index("K")] for r in rows[1:]} == {"5"}


def test_cli_reports_errors(tmp_path, capsys):
    code = main(["sweep", "--dim", "layer", "--grid", "0..2", "--out", str(tmp_path / "x.csv")])
    assert code == 2
    assert "layer grid value 0" in capsys.readouterr().err
