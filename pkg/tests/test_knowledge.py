"""Tests for the knowledge library and improvement summaries."""

import math

import numpy as np
import pytest
from pydantic import ValidationError

from app.embeddings import NOISE, Embedding, LocalHashEmbedder
from app.knowledge import (
    KnowledgeLibrary,
    KnowledgePiece,
    KnowledgeSource,
    LibraryRecord,
    snapshot_pieces,
    summarize_improvement,
)
from app.prompt_book import PromptBook
from tests.helpers import make_piece, make_solution, scripted_gateway, summary_response, unit


def angled(piece_id, angle, improvement=0.5):
    return make_piece(piece_id, unit(angle), score_before=1.0, score_after=1.0 - improvement)


class TestKnowledgePiece:
    """Pieces only come from strict improvements."""

    def test_worse_score_rejected(self):
        with pytest.raises(ValidationError):
            make_piece("k", [1.0, 0.0], score_before=0.5, score_after=0.5)

    def test_infinite_baseline_rejected(self):
        with pytest.raises(ValidationError):
            make_piece("k", [1.0, 0.0], score_before=math.inf, score_after=0.5)

    def test_zero_embedding_rejected(self):
        with pytest.raises(ValidationError):
            make_piece("k", [0.0, 0.0])

    def test_corrupted_record_rejected(self):
        record = LibraryRecord(pieces=[make_piece("k", [1.0, 0.0])]).model_dump(mode="json")
        record["pieces"][0]["embedding"] = [0.0, float("nan")]
        with pytest.raises(ValidationError):
            LibraryRecord.model_validate(record)

    def test_improvement_and_text(self):
        piece = make_piece("k", [1.0, 0.0], score_before=0.8, score_after=0.3)
        assert piece.improvement == pytest.approx(0.5)
        assert piece.text == "insight k"


class TestInsert:
    """Admission: append, merge near-duplicates, evict over capacity."""

    def setup_method(self):
        self.library = KnowledgeLibrary(capacity=30, tau=0.85, dedup_threshold=0.95)

    def test_first_insert(self):
        report = self.library.insert(angled("a", 0.0))
        assert report.action == "added"
        assert report.evicted == []
        assert self.library.ids == ["a"]
        assert self.library.cluster_of("a") == 0

    def test_near_duplicate_merges(self):
        self.library.insert(angled("a", 0.0, improvement=0.1))
        report = self.library.insert(angled("b", 0.14, improvement=0.4))
        assert report.action == "merged"
        assert report.merged_into == "a"
        assert len(self.library) == 1
        assert self.library.pieces[0].id == "b"

    def test_merge_keeps_larger_improvement_and_sums_uses(self):
        self.library.insert(make_piece("a", unit(0.0), score_after=0.2, uses=2))
        self.library.insert(make_piece("b", unit(0.05), score_after=0.9, uses=3))
        assert self.library.ids == ["a"]
        assert self.library.pieces[0].uses == 5

    def test_distinct_pieces_append(self):
        self.library.insert(angled("a", 0.0))
        report = self.library.insert(angled("b", 0.4))
        assert report.action == "added"
        assert self.library.ids == ["a", "b"]
        assert self.library.cluster_of("a") == self.library.cluster_of("b")

    def test_eviction_from_largest_cluster(self):
        library = KnowledgeLibrary(capacity=3)
        library.insert(angled("a", 0.0, improvement=0.5))
        library.insert(angled("b", 0.4, improvement=0.1))
        library.insert(angled("far", 2.5, improvement=0.01))
        report = library.insert(angled("c", 0.8, improvement=0.3))
        assert report.action == "added"
        assert report.evicted == ["b"]
        assert sorted(library.ids) == ["a", "c", "far"]

    def test_eviction_tie_goes_to_oldest(self):
        library = KnowledgeLibrary(capacity=2)
        library.insert(angled("a", 0.0, improvement=0.2))
        library.insert(angled("b", 0.4, improvement=0.2))
        report = library.insert(angled("c", 0.8, improvement=0.2))
        assert report.evicted == ["a"]

    def test_capacity_holds_under_random_inserts(self):
        rng = np.random.default_rng(0)
        library = KnowledgeLibrary(capacity=30)
        for i in range(500):
            vector = rng.normal(size=8)
            improvement = float(rng.uniform(0.01, 0.9))
            library.insert(make_piece(f"k{i}", vector, score_after=1.0 - improvement))
            assert len(library) <= 30
            assert library.clustering.ids == library.ids
        assert len(library) == 30
        assert len(set(library.ids)) == 30


class TestReuse:
    """Random per-cluster reuse and similarity reuse."""

    def setup_method(self):
        self.library = KnowledgeLibrary(capacity=30, seed=4)
        for piece_id, angle in [("a", 0.0), ("b", 0.4), ("c", 2.0), ("d", 4.0), ("e", 4.4)]:
            self.library.insert(angled(piece_id, angle))

    def test_one_piece_per_cluster(self):
        assert self.library.clustering.n_clusters == 3
        chosen = self.library.reuse_random()
        assert len(chosen) == 3
        assert {self.library.cluster_of(p.id) for p in chosen} == {0, 1, 2}

    def test_reuse_bumps_uses(self):
        chosen = self.library.reuse_random()
        by_id = {p.id: p for p in self.library.pieces}
        for piece in chosen:
            assert piece.uses == 1
            assert by_id[piece.id].uses == 1

    def test_random_reuse_is_deterministic(self):
        record = self.library.to_record()
        first = KnowledgeLibrary.from_record(record)
        second = KnowledgeLibrary.from_record(record)
        for _ in range(5):
            assert [p.id for p in first.reuse_random()] == [p.id for p in second.reuse_random()]

    def test_random_reuse_varies_between_calls(self):
        draws = {tuple(p.id for p in self.library.reuse_random()) for _ in range(20)}
        assert len(draws) > 1

    def test_empty_library(self):
        assert KnowledgeLibrary().reuse_random() == []
        assert KnowledgeLibrary().reuse_similar(Embedding([1.0, 0.0]), 2) == []

    def test_similar_ordering(self):
        chosen = self.library.reuse_similar(Embedding(unit(0.3)), 2)
        assert [p.id for p in chosen] == ["b", "a"]

    def test_similar_ties_go_to_smaller_id(self):
        library = KnowledgeLibrary()
        library.insert(angled("z", 0.5))
        library.insert(angled("y", -0.5))
        assert [p.id for p in library.reuse_similar(Embedding([1.0, 0.0]), 1)] == ["y"]

    def test_similar_needs_positive_k(self):
        with pytest.raises(ValueError):
            self.library.reuse_similar(Embedding([1.0, 0.0]), 0)


class TestSnapshotAndRecord:
    """DBSCAN snapshots and serialization."""

    def test_two_groups_and_noise(self):
        pieces = [angled("a", 0.0), angled("b", 0.1), angled("c", 2.0), angled("d", 2.1), angled("e", 4.0)]
        snapshot = snapshot_pieces(pieces, eps=0.3, min_pts=2)
        assert snapshot.clustering.labels == [0, 0, 1, 1, NOISE]
        assert [r.cluster for r in snapshot.records] == [0, 0, 1, 1, NOISE]
        assert snapshot.records[0].solution_id == "s-a"
        assert snapshot.records[0].improvement == pytest.approx(0.5)

    def test_empty_snapshot(self):
        snapshot = KnowledgeLibrary().snapshot()
        assert snapshot.clustering.n_clusters == 0
        assert snapshot.records == []

    def test_record_round_trip(self):
        library = KnowledgeLibrary(capacity=5, seed=9)
        for piece_id, angle in [("a", 0.0), ("b", 0.4), ("c", 2.0)]:
            library.insert(angled(piece_id, angle))
        library.reuse_random()
        record = LibraryRecord.model_validate_json(library.to_record().model_dump_json())
        restored = KnowledgeLibrary.from_record(record)
        assert restored.ids == library.ids
        assert restored.clustering.labels == library.clustering.labels
        assert restored.reuse_counter == 1
        assert restored.insert_counter == 3
        assert [p.uses for p in restored.pieces] == [p.uses for p in library.pieces]

    def test_copy_is_independent(self):
        library = KnowledgeLibrary()
        library.insert(angled("a", 0.0))
        clone = library.copy()
        clone.insert(angled("b", 2.0))
        assert library.ids == ["a"]
        assert clone.ids == ["a", "b"]


class TestSummarizeImprovement:
    """Turning an improvement into a knowledge piece."""

    def setup_method(self):
        self.parent = make_solution("p", score=0.5)
        self.child = make_solution("c", score=0.1, canonical="c0 * x + c1")
        self.embedder = LocalHashEmbedder()
        self.prompts = PromptBook()

    def summarize(self, gateway):
        return summarize_improvement(self.parent, self.child, gateway, self.embedder, self.prompts,
                                     problem="Find y.", iteration=7)

    def test_builds_piece(self):
        gateway = scripted_gateway([summary_response("Add an offset", "A constant term shifts the line.")])
        piece = self.summarize(gateway)
        assert isinstance(piece, KnowledgePiece)
        assert piece.id == "k-c"
        assert piece.definition == "Add an offset"
        assert piece.source == KnowledgeSource(solution_id="c", iteration=7, score_before=0.5, score_after=0.1)
        assert piece.vector.norm == pytest.approx(1.0)

        request = gateway.transcript.entries[0].request
        assert request.tag == "summarize"
        assert request.contains("c0 * x + c1")
        assert request.contains("Find y.")

    def test_definition_whitespace_collapsed_and_capped(self):
        long_definition = "word\n  " * 100
        gateway = scripted_gateway([summary_response(long_definition)])
        piece = self.summarize(gateway)
        assert "\n" not in piece.definition
        assert len(piece.definition) <= 200

    def test_only_for_improvements(self):
        with pytest.raises(ValueError):
            summarize_improvement(self.child, self.parent, scripted_gateway([]), self.embedder,
                                  self.prompts, problem="", iteration=0)

    def test_missing_definition(self):
        assert self.summarize(scripted_gateway(["no fences at all"])) is None

    def test_empty_response(self):
        assert self.summarize(scripted_gateway([""])) is None

    def test_nothing_to_embed(self):
        assert self.summarize(scripted_gateway([summary_response("!!!")])) is None


if __name__ == "__main__":
    pytest.main([__file__])
