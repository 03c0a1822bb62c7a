import math

import numpy as np
import pytest

from heviper.database import HeightDatabase, Partition, PlaceEntry, build_partitioned_db, height_to_level
from heviper.descriptor import l2_normalize
from heviper.errors import ConfigError, EmptyPoolError, EmptySearchSpaceError, InputError, RangeError, SchemaError
from heviper.retrieval import (
    HEVPRSystem,
    QueryDescriptors,
    QueryResult,
    RankedList,
    cosine_scores,
    estimate_height,
    full_query,
    he_vpr_query,
    knn,
    oracle_query,
    search_levels,
    select_subdatabases,
)


def sort_oracle(query, ids, vectors, k):
    """Score every row with fsum, sort all (score desc, id asc), keep k."""
    q = [float(v) for v in np.float32(query)]
    scored = []
    for i, row in zip(ids, np.float32(vectors)):
        scored.append((math.fsum(float(a) * b for a, b in zip(row, q)), int(i)))
    scored.sort(key=lambda t: (-t[0], t[1]))
    return scored[:k]


def random_pool(rng, n, dim, dup_fraction=0.1):
    vecs = l2_normalize(rng.standard_normal((n, dim)))
    dups = rng.choice(n, size=int(n * dup_fraction), replace=False)
    vecs[dups] = vecs[rng.integers(0, n, len(dups))]
    ids = rng.choice(10 * n + 10, size=n, replace=False).astype(np.uint64)
    return ids, vecs


class TestKnn:
    def test_hand_example(self):
        r = knn(np.array([1.0, 0.0]), [1, 2, 3], np.array([[1, 0], [0, 1], [0.6, 0.8]]), 3)
        np.testing.assert_array_equal(r.ids, [1, 3, 2])
        np.testing.assert_allclose(r.scores, [1.0, 0.6, 0.0], atol=1e-7)

    def test_self_match_and_short_pool(self, rng):
        ids, vecs = random_pool(rng, 20, 8, 0)
        r = knn(vecs[5], ids, vecs, 50)
        assert len(r) == 20 and r.ids[0] == ids[5] and abs(r.scores[0] - 1) <= 1e-6

    def test_ties_broken_by_id(self):
        vecs = np.array([[1.0, 0.0]] * 4 + [[0.0, 1.0]])
        r = knn(np.array([1.0, 0.0]), [9, 4, 7, 1, 2], vecs, 3)
        np.testing.assert_array_equal(r.ids, [1, 4, 7])

    @pytest.mark.parametrize("seed", range(10))
    def test_matches_full_sort(self, seed):
        rng = np.random.default_rng(seed)
        n, dim = int(rng.integers(1, 3000)), int(rng.integers(1, 129))
        ids, vecs = random_pool(rng, n, dim)
        query = vecs[0] if seed % 2 else l2_normalize(rng.standard_normal(dim))
        k = int(rng.integers(1, n + 5))
        r = knn(query, ids, vecs, k)
        ref = sort_oracle(query, ids, vecs, k)
        assert [int(i) for i in r.ids] == [i for _, i in ref]
        np.testing.assert_allclose(r.scores, [s for s, _ in ref], rtol=0, atol=1e-12)

    def test_parallel_scan_bit_identical(self, rng):
        ids, vecs = random_pool(rng, 9000, 32)
        q = l2_normalize(rng.standard_normal(32))
        assert cosine_scores(q, vecs, 1).tobytes() == cosine_scores(q, vecs, 8).tobytes()
        assert knn(q, ids, vecs, 25, workers=1) == knn(q, ids, vecs, 25, workers=4)

    def test_errors(self):
        with pytest.raises(EmptyPoolError):
            knn(np.ones(2), [], np.empty((0, 2)), 1)
        with pytest.raises(ConfigError):
            knn(np.ones(2), [1], np.ones((1, 2)), 0)
        with pytest.raises(ConfigError):
            knn(np.ones(3), [1], np.ones((1, 2)), 1)
        with pytest.raises(InputError):
            knn(np.ones(2), [1, 2], np.ones((1, 2)), 1)


class TestStageOne:
    @pytest.fixture
    def hdb(self):
        part = Partition(100, 300, 50)
        vecs = np.eye(4, dtype=np.float32)
        return HeightDatabase(part, [1, 2, 3, 4], np.zeros((4, 2)), vecs, [150, 160, 210, 120])

    def test_estimate(self, hdb):
        r = estimate_height(np.array([0, 0, 1.0, 0]), hdb, 1)
        assert r.labels.tolist() == [210.0]
        assert len(estimate_height(np.ones(4) / 2, hdb, 4).labels) == 4

    def test_select_dedups(self):
        part = Partition(100, 1200, 50)
        ranking = RankedList(np.array([1, 2, 3], np.uint64), np.array([0.9, 0.8, 0.7]), np.array([150, 150, 200], np.float32))
        assert select_subdatabases(ranking, 3, part) == {2, 3}
        assert select_subdatabases(ranking, 1, part) == {2}
        with pytest.raises(ConfigError):
            select_subdatabases(ranking, 0, part)
        bad = RankedList(ranking.ids, ranking.scores, np.array([1300, 150, 150], np.float32))
        with pytest.raises(RangeError):
            select_subdatabases(bad, 1, part)

    def test_empty_height_db(self):
        part = Partition(100, 300, 50)
        empty = HeightDatabase(part, [], np.empty((0, 2)), np.empty((0, 4)), [])
        with pytest.raises(EmptyPoolError):
            estimate_height(np.ones(4), empty, 1)


class TestTwoStage:
    def test_exhaustive_selection_equals_full(self, synthetic_corpus):
        config, corpus, sets, rows, system = synthetic_corpus
        for row in rows[::7]:
            q = QueryDescriptors(sets["query_height"].get(row.id), sets["query_place"].get(row.id))
            full = full_query(q, system, 10)
            he = he_vpr_query(q, system, len(system.hdb), 10)
            assert he.selected_levels == full.selected_levels
            assert he.place_ranking == full.place_ranking
            assert full.searched_count == system.db.total_count

    def test_oracle_equals_brute_force(self, synthetic_corpus):
        config, corpus, sets, rows, system = synthetic_corpus
        for row in rows[::5]:
            q = QueryDescriptors(None, sets["query_place"].get(row.id))
            level = height_to_level(row.height_m, system.db.partition)
            sub = system.db.level(level)
            assert oracle_query(q, system, row.height_m, 10).place_ranking == knn(q.place, sub.ids, sub.descriptors, 10)

    def test_searched_count_monotone_and_accounted(self, synthetic_corpus):
        config, corpus, sets, rows, system = synthetic_corpus
        for row in rows[::9]:
            q = QueryDescriptors(sets["query_height"].get(row.id), sets["query_place"].get(row.id))
            counts = []
            for k in range(1, len(system.hdb) + 1):
                r = he_vpr_query(q, system, k, 5)
                assert r.searched_count == sum(system.db.sizes[l - 1] for l in r.selected_levels)
                counts.append(r.searched_count)
            assert counts == sorted(counts)

    def test_subset_consistency(self, synthetic_corpus):
        config, corpus, sets, rows, system = synthetic_corpus
        row = rows[3]
        q = QueryDescriptors(sets["query_height"].get(row.id), sets["query_place"].get(row.id))
        he = he_vpr_query(q, system, 10, 10)
        allowed = set(int(i) for i in system.db.union(he.selected_levels)[0])
        full = full_query(q, system, system.db.total_count)
        filtered = [int(i) for i in full.place_ranking.ids if int(i) in allowed][:10]
        assert [int(i) for i in he.place_ranking.ids] == filtered

    def test_repeatable(self, synthetic_corpus):
        config, corpus, sets, rows, system = synthetic_corpus
        q = QueryDescriptors(sets["query_height"].get(rows[0].id), sets["query_place"].get(rows[0].id))
        assert he_vpr_query(q, system, 2, 10) == he_vpr_query(q, system, 2, 10)

    def test_single_level_database(self, rng):
        part = Partition(100, 150, 50)
        vecs = l2_normalize(rng.standard_normal((6, 4)))
        db, _ = build_partitioned_db([PlaceEntry(i, vecs[i], 0, 0, 120) for i in range(6)], part)
        hdb = HeightDatabase(part, [0, 1], np.zeros((2, 2)), vecs[:2], [120, 130])
        system = HEVPRSystem(db, hdb)
        q = QueryDescriptors(vecs[3], vecs[4])
        a, b = full_query(q, system, 3), he_vpr_query(q, system, 1, 3)
        assert a.place_ranking == b.place_ranking and a.searched_count == b.searched_count

    def test_empty_search_space(self, rng):
        part = Partition(100, 200, 50)
        vecs = l2_normalize(rng.standard_normal((3, 4)))
        db, _ = build_partitioned_db([PlaceEntry(i, vecs[i], 0, 0, 170) for i in range(3)], part)
        hdb = HeightDatabase(part, [9], [[0, 0]], vecs[:1], [120])
        system = HEVPRSystem(db, hdb)
        with pytest.raises(EmptySearchSpaceError):
            he_vpr_query(QueryDescriptors(vecs[0], vecs[0]), system, 1, 3)
        with pytest.raises(EmptySearchSpaceError):
            search_levels(vecs[0], db, [], 3)
        empty_db, _ = build_partitioned_db([], part)
        with pytest.raises(EmptySearchSpaceError):
            full_query(QueryDescriptors(None, vecs[0]), HEVPRSystem(empty_db, hdb), 3)

    def test_images_need_a_backbone(self, rng):
        part = Partition(100, 150, 50)
        db, _ = build_partitioned_db([], part)
        system = HEVPRSystem(db, HeightDatabase(part, [], np.empty((0, 2)), np.empty((0, 4)), []))
        with pytest.raises(ConfigError):
            system.describe(np.zeros((28, 28), np.uint8))
        with pytest.raises(InputError):
            system.describe(QueryDescriptors(None, np.ones(4)))


def test_query_result_round_trip(synthetic_corpus):
    config, corpus, sets, rows, system = synthetic_corpus
    q = QueryDescriptors(sets["query_height"].get(rows[1].id), sets["query_place"].get(rows[1].id))
    result = he_vpr_query(q, system, 3, 5)
    assert QueryResult.from_dict(result.to_dict()) == result
    with pytest.raises(SchemaError):
        QueryResult.from_dict({"selected_levels": []})
