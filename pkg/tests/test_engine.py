"""Tests for the evolutionary loop."""

import math
from collections import Counter

import pytest
from pydantic import ValidationError

from app.embeddings import LocalHashEmbedder
from app.engine import DEFAULT_OPERATOR_MIX, Engine, EngineConfig, RunState
from app.errors import BackendUnavailable
from app.idea_tree import TreeConfig
from app.knowledge import KnowledgeLibrary
from app.prompt_book import PromptBook
from app.rng import stream
from app.solution import OPERATORS, compare
from tests.helpers import (
    FAST_FIT,
    idea_response,
    linear_dataset,
    make_piece,
    scripted_gateway,
    solve_response,
    summary_response,
)

SEQUENCE_FIELDS = {
    "generation", "iteration", "samples", "population", "library",
    "best_series", "valid_series", "offspring_series", "gateway_state",
}


def cycling_fixture(equations, summaries=("Shift the offset",)):
    """Every generation tag answers with an idea; solve walks through `equations`."""
    idea = [idea_response("an idea")]
    return {
        "cycle": True,
        "by_tag": {
            "inspire": idea,
            "crossover": idea,
            "mutation": idea,
            "think": idea,
            "solve": [solve_response(eq) for eq in equations],
            "summarize": [summary_response(s) for s in summaries],
        },
    }


def offset_equations(count=200):
    return [f"x + {k}" for k in range(1, count + 1)]


class TestEngineConfig:
    """Run configuration validation."""

    def test_defaults(self):
        config = EngineConfig()
        assert (config.population_size, config.generations, config.samples_per_generation) == (10, 100, 20)
        assert config.operator_mix == DEFAULT_OPERATOR_MIX
        assert config.total_samples == 2000

    def test_mix_must_sum_to_one(self):
        with pytest.raises(ValidationError):
            EngineConfig(operator_mix={"pos_mutation": 0.5})

    def test_unknown_operator(self):
        with pytest.raises(ValidationError):
            EngineConfig(operator_mix={"teleport": 1.0})

    def test_crossover_needs_two_solutions(self):
        with pytest.raises(ValidationError):
            EngineConfig(population_size=1)
        EngineConfig(population_size=1, operator_mix={"pos_mutation": 1.0})

    def test_immediate_insert_is_sequential(self):
        with pytest.raises(ValidationError):
            EngineConfig(immediate_knowledge_insert=True, concurrent_offspring=True)


class EngineTestBase:
    def setup_method(self):
        self.dataset = linear_dataset(n=10, slope=2.0)
        self.embedder = LocalHashEmbedder()
        self.prompts = PromptBook()

    def engine(self, fixture, **overrides):
        values = {
            "population_size": 3,
            "generations": 2,
            "samples_per_generation": 4,
            "tree": TreeConfig(widths=[1]),
            "fit": FAST_FIT,
        }
        values.update(overrides)
        gateway = scripted_gateway(fixture)
        return Engine(EngineConfig(**values), self.dataset, gateway, self.embedder, self.prompts)


class TestInitialize(EngineTestBase):
    """Initial population."""

    def test_population_sorted_and_counted(self):
        engine = self.engine(cycling_fixture(["c0 * x + 5", "c0 * x", "c0 * x ^ 2"]))
        state = engine.initialize()

        assert state.generation == 0
        assert state.samples == 3
        assert state.iteration == 6
        assert [s.id for s in state.population][0] == "i001.0"
        assert sorted(s.id for s in state.population) == ["i000.0", "i001.0", "i002.0"]
        assert all(compare(a, b) < 0 for a, b in zip(state.population, state.population[1:]))
        assert len(state.best_series) == 1
        assert state.best_series[0].best_nmse == state.population[0].score
        assert state.offspring_series == []
        assert state.solutions_logged == 3
        assert state.transcript_length == 6

    def test_seeded_library_feeds_inspiration(self):
        library = KnowledgeLibrary()
        vector = self.embedder.embed("Proportional response").to_list()
        library.insert(make_piece("k1", vector, definition="Proportional response"))
        engine = self.engine(cycling_fixture(["c0 * x"]))
        state = engine.initialize(library)

        inspire = [r for r in engine.gateway.transcript.entries if r.request.tag == "inspire"]
        assert len(inspire) == 3
        assert all(r.request.contains("Proportional response") for r in inspire)
        assert library.pieces[0].uses == 0
        assert state.library.pieces[0].uses == 3

    def test_all_invalid(self):
        engine = self.engine(cycling_fixture(["not an equation ("]))
        state = engine.initialize()
        assert all(not s.valid for s in state.population)
        assert state.best_series[0].best_nmse == math.inf
        restored = RunState.model_validate_json(state.model_dump_json())
        assert restored.best_series[0].best_nmse == math.inf
        assert restored.population[0].score == math.inf

    def test_zero_generations(self):
        engine = self.engine(cycling_fixture(["c0 * x"]), generations=0)
        state = engine.run()
        assert state.generation == 0
        assert state.valid_series == []
        assert state.samples == 3


class TestStepGeneration(EngineTestBase):
    """Offspring, population update and metric series."""

    def test_counts_and_series(self):
        engine = self.engine(cycling_fixture(offset_equations()), population_size=4,
                             samples_per_generation=5, generations=3)
        state = engine.run()

        assert state.generation == 3
        assert state.samples == 4 + 15
        assert state.offspring_count == 15
        assert len(state.population) == 4
        assert all(compare(a, b) < 0 for a, b in zip(state.population, state.population[1:]))
        assert [p.generation for p in state.valid_series] == [1, 2, 3]
        assert len(state.best_series) == 16
        assert [p.samples for p in state.best_series] == list(range(4, 20))
        scores = [p.best_nmse for p in state.best_series]
        assert all(b <= a for a, b in zip(scores, scores[1:]))
        assert scores[-1] == state.population[0].score
        iterations = [p.iteration for p in state.best_series]
        assert all(b > a for a, b in zip(iterations, iterations[1:]))
        assert iterations[-1] == state.iteration

    def test_valid_ratio_matches_offspring(self):
        equations = []
        for k in range(1, 60):
            equations += [f"x + {k}", "log(-1 - x ^ 2)"]
        engine = self.engine(cycling_fixture(equations), samples_per_generation=4, generations=3)
        state = engine.run()
        for point in state.valid_series:
            scores = [o.score for o in state.offspring_series if o.generation == point.generation]
            valid = sum(1 for score in scores if math.isfinite(score))
            assert point.valid == valid
            assert point.total == 4
            assert point.valid_ratio == valid / 4
        assert 0 < sum(p.valid for p in state.valid_series) < 12

    def test_all_invalid_offspring(self):
        engine = self.engine(cycling_fixture(["("]), generations=1)
        state = engine.run()
        assert state.valid_series[0].valid_ratio == 0.0
        assert state.best_series[-1].best_nmse == math.inf

    def test_parents_and_operators(self):
        engine = self.engine(cycling_fixture(offset_equations()), population_size=5)
        state = engine.initialize()
        for operator, parents in engine.plan_generation(state):
            assert operator in OPERATORS
            if operator.endswith("crossover"):
                assert len(parents) == 2
                assert parents[0].id != parents[1].id
            else:
                assert len(parents) == 1
            assert all(p in state.population for p in parents)

    def test_lineage_recorded(self):
        engine = self.engine(cycling_fixture(offset_equations()), generations=1)
        state = engine.run()
        initial = {"i000.0", "i001.0", "i002.0"}
        offspring = [s for s in state.population if s.lineage.operator != "init"]
        for child in offspring:
            assert set(child.lineage.parents) <= initial
            assert child.born_at >= 3

    def test_operator_frequencies(self):
        engine = self.engine(cycling_fixture(["c0 * x"]))
        rng = stream(0, "operator-frequency")
        counts = Counter(engine._draw_operator(rng) for _ in range(10_000))
        for operator, probability in DEFAULT_OPERATOR_MIX.items():
            assert abs(counts[operator] / 10_000 - probability) < 0.02

    def test_duplicate_offspring_regenerated_once(self):
        fixture = cycling_fixture(["c0 * x", "c0 * x", "c0 * x + 1"])
        fixture["cycle"] = False
        fixture["by_tag"]["inspire"] = [idea_response("an idea")]
        fixture["by_tag"]["mutation"] = [idea_response("an idea"), idea_response("another idea")]
        fixture["by_tag"]["summarize"] = [summary_response("Slope"), summary_response("Slope")]
        engine = self.engine(fixture, population_size=1, samples_per_generation=1, generations=1,
                             operator_mix={"pos_mutation": 1.0})
        state = engine.run()
        assert state.offspring_series[0].solution_id == "g0001-000r.0"
        assert state.iteration == 6
        assert [s.canonical for s in state.population] == ["c0 * x"]

    def test_backend_failure_propagates(self):
        fixture = cycling_fixture(["x + 1", "x + 2", "x + 3"])
        fixture["cycle"] = False
        fixture["by_tag"]["inspire"] = [idea_response("idea")] * 3
        engine = self.engine(fixture)
        state = engine.initialize()
        with pytest.raises(BackendUnavailable):
            engine.step_generation(state)
        assert state.generation == 0
        assert state.offspring_series == []

    def test_runs_are_deterministic(self):
        first = self.engine(cycling_fixture(offset_equations()), generations=3).run()
        second = self.engine(cycling_fixture(offset_equations()), generations=3).run()
        assert first.model_dump_json() == second.model_dump_json()

    def test_resume_matches_uninterrupted_run(self):
        full = self.engine(cycling_fixture(offset_equations()), generations=3).run()

        partial = self.engine(cycling_fixture(offset_equations()), generations=1).run()
        checkpoint = RunState.model_validate_json(partial.model_dump_json())
        resumed_engine = self.engine(cycling_fixture(offset_equations()), generations=3)
        resumed_engine.gateway.restore(checkpoint.gateway_state)
        resumed = resumed_engine.run(checkpoint)

        assert resumed.model_dump(mode="json", include=SEQUENCE_FIELDS) == \
            full.model_dump(mode="json", include=SEQUENCE_FIELDS)

    def test_concurrent_offspring_matches_sequential_counts(self):
        def responder(request):
            if request.tag == "solve":
                return solve_response("c0 * x + c1")
            if request.tag == "summarize":
                return summary_response("Offset term")
            return idea_response("an idea")

        engine = self.engine(responder, concurrent_offspring=True, max_workers=4, generations=2)
        state = engine.run()
        assert state.offspring_count == 8
        assert len(engine.gateway.transcript) == state.transcript_length
        assert sorted(r.sequence for r in engine.gateway.transcript.entries) == \
            list(range(len(engine.gateway.transcript)))

    def test_knowledge_accumulates(self):
        # Offsets shrink towards the best constant, so every offspring beats its parents.
        equations = [f"x + {k}" for k in range(60, 6, -1)]
        engine = self.engine(cycling_fixture(equations, summaries=("Smaller offset", "Shift down", "Less bias")),
                             generations=2, immediate_knowledge_insert=True)
        state = engine.run()
        assert len(state.library.pieces) >= 1
        assert len([r for r in engine.gateway.transcript.entries if r.request.tag == "summarize"]) == 8
        assert all(p.source.score_after < p.source.score_before for p in state.library.pieces)


class TestKnowledgeEffect(EngineTestBase):
    """Knowledge in the inspiring prompt reaches the offspring it helps."""

    def fixture(self, mutation):
        initial = ["x + 50", "x + 40", "x + 30"]
        return {
            "cycle": True,
            "by_tag": {
                "inspire": [idea_response("an idea")],
                "mutation": [mutation],
                "solve": [solve_response(eq) for eq in initial + [f"x + {k}" for k in range(20, 0, -1)]],
                "summarize": [summary_response("Offset shrinkage", "Lower constants fit better.")],
            },
        }

    def mean_scores(self, state, generation):
        scores = [p.score for p in state.offspring_series if p.generation == generation]
        return sum(scores) / len(scores)

    def test_knowledge_aided_offspring_improve(self):
        mutation = {
            "when_prompt_contains": "Offset shrinkage",
            "response": idea_response("Remove the offset entirely.", "2 * x"),
            "otherwise": idea_response("Tweak the offset."),
        }
        engine = self.engine(self.fixture(mutation), operator_mix={"pos_mutation": 1.0})
        state = engine.run()

        first = [p for p in state.offspring_series if p.generation == 1]
        second = [p for p in state.offspring_series if p.generation == 2]
        assert not any(p.used_knowledge for p in first)
        assert all(p.used_knowledge for p in second)
        assert self.mean_scores(state, 2) < self.mean_scores(state, 1)
        assert state.best_score == 0.0

    def test_no_gap_without_knowledge(self):
        fixture = self.fixture(idea_response("Tweak the offset."))
        fixture["by_tag"]["solve"] = [solve_response(eq) for eq in ["x + 50", "x + 40", "x + 30"] + ["x + 20"] * 40]
        engine = self.engine(fixture, operator_mix={"pos_mutation": 1.0})
        state = engine.run()
        assert self.mean_scores(state, 2) == self.mean_scores(state, 1)


class TestLongRun(EngineTestBase):
    """Full-size run with a fast scripted backend."""

    def test_two_thousand_offspring(self):
        engine = self.engine(
            cycling_fixture(offset_equations(997), summaries=("Smaller offset", "Drop the constant")),
            population_size=10,
            generations=100,
            samples_per_generation=20,
        )
        state = engine.run()
        assert state.offspring_count == 2000
        assert state.samples == 2010
        assert len(state.valid_series) == 100
        assert len(state.best_series) == 2001
        assert len(state.population) == 10
        assert len(state.library.pieces) <= 30

    def test_converges_on_linear_law(self):
        equations = ["x + 7", "x ^ 2", "c0 * x ^ 2 + c1", "2 * x", "x + 3"]
        engine = self.engine(cycling_fixture(equations), population_size=3, generations=3)
        state = engine.run()
        assert state.best.canonical == "2 * x"
        assert state.best_score < 1e-12


if __name__ == "__main__":
    pytest.main([__file__])
