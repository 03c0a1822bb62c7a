import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).resolve().parent))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def synthetic_setup(out_dir, *, places=25, levels=8, seed=7):
    """Seeded corpus with separable descriptors, its databases and a ready query system."""
    from heviper import pipeline, synthetic
    from heviper.config import RunConfig

    config = RunConfig.from_dict(
        {
            "seed": seed,
            "partition": {"range_min_m": 100.0, "range_max_m": 100.0 + 50.0 * levels},
            "synthetic": {"places": places},
        }
    )
    corpus = synthetic.generate(config, out_dir, images=False)
    sets = synthetic.separable_descriptors(config, corpus)
    db_rows = pipeline.read_manifest(corpus.db_manifest)
    query_rows = pipeline.read_manifest(corpus.query_manifest)
    db, _ = pipeline.build_place_db(db_rows, config, sets["db_place"])
    hdb = pipeline.build_height_db(db_rows, config, sets["db_height"])
    system = pipeline.make_system(config, db, hdb)
    return config, corpus, sets, query_rows, system


@pytest.fixture(scope="session")
def synthetic_corpus(tmp_path_factory):
    return synthetic_setup(tmp_path_factory.mktemp("synthetic"))


_ACCEPTANCE_KEY = pytest.StashKey[list]()


@pytest.fixture
def acceptance(request):
    """Record one pass/fail line per criterion; printed in the terminal summary."""
    lines = request.config.stash.setdefault(_ACCEPTANCE_KEY, [])

    def record(label: str, ok: bool, detail: str) -> None:
        lines.append(f"[{'PASS' if ok else 'FAIL'}] {label}: {detail}")
        print(lines[-1])
        assert ok, detail

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_ACCEPTANCE_KEY, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: s[7:]):
            terminalreporter.write_line(line)
