import json
import subprocess
import sys

import numpy as np
import pytest

from heviper.cli import main
from heviper.metrics import EvalReport
from heviper.retrieval import QueryResult

CONFIG = """seed = 5
[partition]
range_min_m = 100.0
range_max_m = 300.0
[adapter]
blocks = 2
dim = 32
bottleneck = 8
[synthetic]
places = 6
image_size = 56
base_size = 96
"""


def run(argv, capsys):
    code = main([str(a) for a in argv])
    out = capsys.readouterr()
    return code, out.out, out.err


@pytest.fixture
def corpus(tmp_path, capsys):
    cfg = tmp_path / "c.toml"
    cfg.write_text(CONFIG)
    root = tmp_path / "syn"
    assert run(["--config", cfg, "gen-synthetic", "--out", root], capsys)[0] == 0
    return cfg, root


def build(cfg, root, capsys, injected=True):
    d = root / "descriptors"
    extra = ["--descriptors", d / "db_place.hevd"] if injected else []
    assert run(["--config", cfg, "build-db", "--manifest", root / "db_manifest.csv", "--out", root / "p.hevb", *extra], capsys)[0] == 0
    extra = ["--descriptors", d / "db_height.hevd"] if injected else []
    code, out, _ = run(
        ["--config", cfg, "--json", "build-height-db", "--manifest", root / "db_manifest.csv",
         "--out", root / "h.hevh", "--db", root / "p.hevb", *extra],
        capsys,
    )
    assert code == 0
    return json.loads(out)


def evaluate_args(cfg, root, out, *flags):
    d = root / "descriptors"
    return [
        "--config", cfg, *flags, "evaluate", "--queries", root / "query_manifest.csv",
        "--db", root / "p.hevb", "--height-db", root / "h.hevh",
        "--query-height-descriptors", d / "query_height.hevd", "--query-place-descriptors", d / "query_place.hevd",
        "--out", out,
    ]


def test_build_summaries(corpus, capsys):
    cfg, root = corpus
    code, out, _ = run(["--config", cfg, "--json", "build-db", "--manifest", root / "db_manifest.csv", "--out", root / "p.hevb"], capsys)
    assert code == 0
    summary = json.loads(out)
    assert summary["sizes"] == [6, 6, 6, 6] and summary["rejected_ids"] == []
    hsum = build(cfg, root, capsys, injected=False)
    assert hsum["entries"] <= 5 * 4 and hsum["compact"]


def test_rebuild_is_bit_identical(corpus, capsys):
    cfg, root = corpus
    build(cfg, root, capsys, injected=False)
    first = (root / "p.hevb").read_bytes(), (root / "h.hevh").read_bytes()
    build(cfg, root, capsys, injected=False)
    assert ((root / "p.hevb").read_bytes(), (root / "h.hevh").read_bytes()) == first


def test_evaluate_report(corpus, capsys, tmp_path):
    cfg, root = corpus
    build(cfg, root, capsys)
    code, out, _ = run(evaluate_args(cfg, root, tmp_path / "r.json", "--json") + ["--csv", tmp_path / "r.csv", "--text", tmp_path / "r.txt"], capsys)
    assert code == 0
    doc = json.loads(out)
    assert doc == json.loads((tmp_path / "r.json").read_text())
    assert EvalReport.from_dict(doc).to_dict() == doc
    assert doc["height"]["he"]["recall"]["50"]["1"] == 100.0
    assert doc["height"]["he"]["recall"]["100"]["1"] == 100.0
    full = doc["methods"]["full"]
    assert full["memory_usage_pct"] == 100.0 and full["performance_ratio_pct"] == 100.0
    assert full["performance_delta"] == "+0.00"
    assert doc["methods"]["he-vpr(1)"]["memory_usage_pct"] == 25.0
    assert (tmp_path / "r.csv").read_text().startswith("kind,method,n,threshold_m,recall_pct")
    assert "Performance Ratio" in (tmp_path / "r.txt").read_text()


def test_evaluate_deterministic_across_threads(corpus, capsys, tmp_path):
    cfg, root = corpus
    build(cfg, root, capsys)
    outs = []
    for i, threads in enumerate([1, 1, 8]):
        assert run(evaluate_args(cfg, root, tmp_path / f"r{i}.json", "--threads", threads), capsys)[0] == 0
        outs.append((tmp_path / f"r{i}.json").read_bytes())
    assert outs[0] == outs[1] == outs[2]


def test_query_verbs(corpus, capsys):
    cfg, root = corpus
    build(cfg, root, capsys, injected=False)
    image = root / "images" / "q_00007.pgm"
    code, out, _ = run(["--config", cfg, "query", image, "--db", root / "p.hevb", "--height-db", root / "h.hevh", "--k-height", 2], capsys)
    assert code == 0 and "selected levels" in out and "searched entries" in out
    base = ["--config", cfg, "--json", "query", image, "--db", root / "p.hevb", "--height-db", root / "h.hevh", "--k-place", 4]
    full = QueryResult.from_dict(json.loads(run(base + ["--full"], capsys)[1]))
    assert full.searched_count == 24 and len(full.height_candidates) == 0
    doc = json.loads(run(base + ["--k-height", 20], capsys)[1])
    exhaustive = QueryResult.from_dict(doc)
    assert exhaustive.place_ranking == full.place_ranking
    assert QueryResult.from_dict(exhaustive.to_dict()).to_dict() == doc


def test_query_by_id(corpus, capsys):
    cfg, root = corpus
    build(cfg, root, capsys)
    d = root / "descriptors"
    code, out, _ = run(
        ["--config", cfg, "--json", "query", "--id", 7, "--db", root / "p.hevb", "--height-db", root / "h.hevh",
         "--height-descriptors", d / "query_height.hevd", "--place-descriptors", d / "query_place.hevd", "--k-place", 1],
        capsys,
    )
    assert code == 0
    result = json.loads(out)
    assert result["place_ranking"]["ids"] == [7] and result["searched_count"] == 6


def test_exit_codes(corpus, capsys, tmp_path):
    cfg, root = corpus
    build(cfg, root, capsys)
    bad_cfg = tmp_path / "bad.toml"
    bad_cfg.write_text("[partition]\ninterval_m = 70\n")
    assert run(["--config", bad_cfg, "build-db", "--manifest", root / "db_manifest.csv", "--out", tmp_path / "x"], capsys)[0] == 2
    assert run(["--threads", 0, "--config", cfg, "build-db", "--manifest", root / "db_manifest.csv", "--out", tmp_path / "x"], capsys)[0] == 2
    empty = tmp_path / "empty.csv"
    empty.write_text("id,path,height_m,east_m,north_m\n")
    code, _, err = run(["--config", cfg, "build-db", "--manifest", empty, "--out", tmp_path / "e.hevb"], capsys)
    assert code == 3 and "empty" in err and not (tmp_path / "e.hevb").exists()
    missing_col = tmp_path / "m.csv"
    missing_col.write_text("id,path,height_m\n1,a.pgm,150\n")
    assert run(["--config", cfg, "evaluate", "--queries", missing_col, "--db", root / "p.hevb", "--height-db", root / "h.hevh"], capsys)[0] == 3
    corrupt = tmp_path / "c.hevb"
    corrupt.write_bytes(b"NOPE" + (root / "p.hevb").read_bytes()[4:])
    code, _, err = run(["--config", cfg, "query", root / "images" / "q_00001.pgm", "--db", corrupt, "--height-db", root / "h.hevh"], capsys)
    assert code == 3 and "magic" in err
    assert run(["--config", cfg, "query", tmp_path / "none.pgm", "--db", root / "p.hevb", "--height-db", root / "h.hevh"], capsys)[0] == 3


def test_empty_search_space_exit_code(tmp_path, capsys):
    cfg = tmp_path / "c.toml"
    cfg.write_text(CONFIG)
    root = tmp_path / "syn"
    run(["--config", cfg, "gen-synthetic", "--out", root, "--no-images"], capsys)
    # place database only covers the top level; the height database covers all four
    rows = (root / "db_manifest.csv").read_text().splitlines()
    (root / "top.csv").write_text("\n".join([rows[0]] + [r for r in rows[1:] if float(r.split(",")[2]) > 250]) + "\n")
    d = root / "descriptors"
    run(["--config", cfg, "build-db", "--manifest", root / "top.csv", "--out", root / "p.hevb", "--descriptors", d / "db_place.hevd"], capsys)
    run(["--config", cfg, "build-height-db", "--manifest", root / "db_manifest.csv", "--out", root / "h.hevh", "--descriptors", d / "db_height.hevd"], capsys)
    code, _, err = run(
        ["--config", cfg, "query", "--id", 1, "--db", root / "p.hevb", "--height-db", root / "h.hevh",
         "--height-descriptors", d / "query_height.hevd", "--place-descriptors", d / "query_place.hevd"],
        capsys,
    )
    assert code == 4 and "no entries" in err


def test_module_entry_point_and_log_env(tmp_path):
    env = {"HEVIPER_LOG": "debug", "PATH": "/usr/bin:/bin"}
    proc = subprocess.run([sys.executable, "-m", "heviper", "--help"], capture_output=True, text=True, env=env)
    assert proc.returncode == 0 and "gen-synthetic" in proc.stdout
    proc = subprocess.run([sys.executable, "-m", "heviper", "frobnicate"], capture_output=True, text=True)
    assert proc.returncode == 2


def test_gen_synthetic_writes_config(corpus):
    cfg, root = corpus
    from heviper.config import RunConfig

    written = RunConfig.load(root / "config.toml")
    assert written == RunConfig.load(cfg)
    assert np.all([(root / "images" / f"db_{i:05d}.pgm").exists() for i in range(1, 25)])
