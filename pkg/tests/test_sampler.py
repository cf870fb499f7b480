"""
Тесты сэмплера триплетов.
"""

from collections import Counter
from itertools import islice

import numpy as np
import pytest

from config import BatchConfig
from errors import BatchCompositionError, ConfigurationError
from models import PositivePair, Relation, Triplet
from services.sampler_service import SamplerService


def _pairs(edges):
    return [PositivePair.of(u, v, Relation.INTER) for u, v in edges]


def _flatten(stream):
    return [triplet for batch in stream for triplet in batch]


@pytest.fixture
def five_parent_pairs():
    """1000 пар внутри 5 родительских кластеров (parent = node % 5)."""
    rng = np.random.default_rng(17)
    parent_of = {node: node % 5 for node in range(500)}
    pairs = []
    while len(pairs) < 1000:
        u, v = rng.integers(0, 500, size=2).tolist()
        if u != v and u % 5 == v % 5:
            pairs.append(PositivePair.of(u, v, Relation.INTER))
    return pairs, parent_of


# -------------------------------------------------------------------------------------------------
# Поток триплетов
# -------------------------------------------------------------------------------------------------


@pytest.mark.unit
class TestSampleTriplets:
    """Состав батчей и ограничение на негатив."""

    def test_two_pairs_use_each_other(self):
        pairs = _pairs([(0, 1), (2, 3)])
        parent_of = {0: 0, 1: 0, 2: 1, 3: 1}
        for seed in range(10):
            config = BatchConfig(batch_size=2, seed=seed)
            batch = next(SamplerService.sample_triplets(pairs, parent_of, config))
            for triplet in batch:
                other = {2, 3} if triplet.anchor in (0, 1) else {0, 1}
                assert triplet.negative in other

    def test_negative_parent_always_differs(self, five_parent_pairs):
        pairs, parent_of = five_parent_pairs
        config = BatchConfig(batch_size=20, epochs=100, seed=3)
        triplets = _flatten(SamplerService.sample_triplets(pairs, parent_of, config))
        assert len(triplets) == 100_000
        for triplet in triplets:
            assert parent_of[triplet.negative] != parent_of[triplet.anchor]
            assert triplet.negative not in (triplet.anchor, triplet.positive)

    def test_each_pair_once_per_epoch(self, five_parent_pairs):
        pairs, parent_of = five_parent_pairs
        stream = SamplerService.sample_triplets(pairs, parent_of, BatchConfig(batch_size=64, epochs=2))
        batches = list(stream)
        per_epoch = -(-len(pairs) // 64)
        assert len(batches) == 2 * per_epoch
        for epoch in range(2):
            seen = Counter(
                (min(t.anchor, t.positive), max(t.anchor, t.positive))
                for batch in batches[epoch * per_epoch:(epoch + 1) * per_epoch]
                for t in batch
            )
            assert seen == Counter((p.a, p.b) for p in pairs)

    def test_same_seed_same_stream(self, five_parent_pairs):
        pairs, parent_of = five_parent_pairs
        config = BatchConfig(batch_size=50, epochs=3, seed=9)
        first = list(SamplerService.sample_triplets(pairs, parent_of, config))
        second = list(SamplerService.sample_triplets(pairs, parent_of, config))
        assert first == second

    def test_both_roles_are_used(self, five_parent_pairs):
        pairs, parent_of = five_parent_pairs
        batch = next(SamplerService.sample_triplets(pairs, parent_of, BatchConfig(batch_size=200)))
        assert any(t.anchor > t.positive for t in batch)
        assert any(t.anchor < t.positive for t in batch)

    def test_negative_parents_follow_availability(self, five_parent_pairs):
        pairs, parent_of = five_parent_pairs
        config = BatchConfig(batch_size=20, epochs=10, seed=1)
        observed = Counter()
        expected = np.zeros(5)
        variance = np.zeros(5)
        for batch in SamplerService.sample_triplets(pairs, parent_of, config):
            for index, triplet in enumerate(batch):
                others = {
                    node
                    for position, t in enumerate(batch)
                    if position != index
                    for node in (t.anchor, t.positive)
                } - {triplet.anchor, triplet.positive}
                candidates = [n for n in others if parent_of[n] != parent_of[triplet.anchor]]
                share = np.bincount([parent_of[n] for n in candidates], minlength=5) / len(candidates)
                expected += share
                variance += share * (1.0 - share)
                observed[parent_of[triplet.negative]] += 1
        for parent in range(5):
            assert abs(observed[parent] - expected[parent]) < 4 * np.sqrt(variance[parent])

    def test_single_parent_is_rejected(self):
        pairs = _pairs([(0, 1), (2, 3)])
        with pytest.raises(ConfigurationError, match="минимум 2"):
            next(SamplerService.sample_triplets(pairs, {0: 0, 1: 0, 2: 0, 3: 0}, BatchConfig()))

    def test_impossible_batch_fails_after_retries(self):
        pairs = _pairs([(0, 1), (2, 3), (4, 5), (6, 7)])
        parent_of = {0: 0, 1: 0, 2: 0, 3: 0, 4: 0, 5: 0, 6: 1, 7: 1}
        log = []
        config = BatchConfig(batch_size=2, max_retries=3)
        with pytest.raises(BatchCompositionError):
            list(SamplerService.sample_triplets(pairs, parent_of, config, resample_log=log))
        assert len(log) >= 3

    def test_single_pair_batch_uses_global_pool(self):
        pairs = _pairs([(0, 1), (2, 3), (4, 5)])
        parent_of = {0: 0, 1: 0, 2: 1, 3: 1, 4: 2, 5: 2, 6: 3}
        batches = list(SamplerService.sample_triplets(pairs, parent_of, BatchConfig(batch_size=2)))
        assert [len(batch) for batch in batches] == [2, 1]
        for triplet in _flatten(batches):
            assert parent_of[triplet.negative] != parent_of[triplet.anchor]

    def test_unassigned_anchor_uses_global_pool(self):
        pairs = _pairs([(0, 1), (2, 3)])
        parent_of = {1: 0, 2: 1, 3: 1, 4: 2}
        stream = SamplerService.sample_triplets(pairs, parent_of, BatchConfig(batch_size=2, epochs=20))
        for batch in islice(stream, 20):
            for triplet in batch:
                if triplet.anchor == 0:
                    assert parent_of[triplet.negative] != parent_of[1]

    def test_epochs_for(self):
        assert SamplerService.epochs_for(10, 3, 10) == 3
        assert SamplerService.epochs_for(10, 3, 2) == 1
        assert SamplerService.epochs_for(0, 3, 10, minimum=2) == 2


# -------------------------------------------------------------------------------------------------
# Триплеты (A, A', B')
# -------------------------------------------------------------------------------------------------


@pytest.mark.unit
class TestOrderingTriplets:
    """Дополнительное отношение D(A, A') < D(A, B')."""

    @pytest.fixture
    def graph(self, make_graph):
        return make_graph(
            5,
            clusters=[(0, 2)],
            tracks=[(0, 1), (2, 3)],
            parent_of={0: 0, 1: 0, 2: 0, 3: 1, 4: 1},
        )

    def test_pool_skips_same_parent_negatives(self, graph):
        assert SamplerService.ordering_pool(graph) == [Triplet(0, 1, 3, Relation.ORDERING)]

    def test_extra_triplets_per_batch(self, graph):
        pairs = _pairs([(0, 2), (3, 4)])
        pool = SamplerService.ordering_pool(graph)
        config = BatchConfig(batch_size=2, ordering_fraction=0.5)
        batch = next(SamplerService.sample_triplets(pairs, graph.parent_of, config, ordering_pool=pool))
        assert len(batch) == 3
        assert batch[-1] == Triplet(0, 1, 3, Relation.ORDERING)

    def test_no_quadruples_gives_empty_sample(self, make_graph):
        graph = make_graph(4, clusters=[(0, 1, 2, 3)])
        assert SamplerService.ordering_triplets(graph, seed=0, count=5) == []


# -------------------------------------------------------------------------------------------------
# Файл триплетов
# -------------------------------------------------------------------------------------------------


@pytest.mark.unit
class TestTripletFile:
    """Хранение батчей."""

    def test_round_trip_keeps_batches(self, tmp_path, five_parent_pairs):
        pairs, parent_of = five_parent_pairs
        batches = list(SamplerService.sample_triplets(pairs, parent_of, BatchConfig(batch_size=300)))
        count = SamplerService.save_batches(iter(batches), tmp_path / "triplets.jsonl")
        assert count == len(pairs)
        assert SamplerService.load_batches(tmp_path / "triplets.jsonl") == batches

    def test_ordering_tag_survives_file(self, tmp_path, make_graph):
        graph = make_graph(
            5,
            clusters=[(0, 2)],
            tracks=[(0, 1), (2, 3)],
            parent_of={0: 0, 1: 0, 2: 0, 3: 1, 4: 1},
        )
        pool = SamplerService.ordering_pool(graph)
        config = BatchConfig(batch_size=2, ordering_fraction=0.5)
        batches = list(
            SamplerService.sample_triplets(_pairs([(0, 2), (3, 4)]), graph.parent_of, config, ordering_pool=pool)
        )
        SamplerService.save_batches(iter(batches), tmp_path / "triplets.jsonl")
        loaded = SamplerService.load_batches(tmp_path / "triplets.jsonl")
        assert loaded[0][-1].relation is Relation.ORDERING
