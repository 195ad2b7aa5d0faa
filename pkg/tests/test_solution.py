"""Tests for materialization and ranking of candidate solutions."""

import math
import random

import pytest
from pydantic import ValidationError

from app.evaluation import Dataset
from app.expression import to_text
from app.solution import Evaluator, Lineage, RawGeneration, Solution, compare, rank
from tests.helpers import FAST_FIT, linear_dataset, make_solution


class TestMaterialize:
    """Parse, fit and score a raw generation."""

    def setup_method(self):
        self.evaluator = Evaluator(linear_dataset(n=10, slope=2.0), FAST_FIT, seed=0)

    def test_valid_linear(self):
        solution = self.evaluator.materialize(RawGeneration(idea_text="linear", math_text="c0 * x"), "s1")
        assert solution.valid
        assert solution.score < 1e-12
        assert solution.canonical == "c0 * x"
        assert solution.params == pytest.approx([2.0], abs=1e-6)
        assert solution.node_count == 3
        assert solution.reason is None

    def test_equation_form_accepted(self):
        solution = self.evaluator.materialize(RawGeneration(math_text="y = c0 * x"), "s1")
        assert solution.valid
        assert solution.canonical == "c0 * x"

    def test_syntax_error(self):
        solution = self.evaluator.materialize(RawGeneration(math_text="c0 * ("), "s1")
        assert not solution.valid
        assert solution.score == math.inf
        assert solution.reason.startswith("ExpressionSyntaxError")
        assert solution.canonical is None

    def test_oversized_parameter_index(self):
        solution = self.evaluator.materialize(RawGeneration(math_text="c" + "1" * 5000 + " * x"), "s1")
        assert not solution.valid
        assert solution.reason.startswith("ExpressionSyntaxError")

    def test_overflowing_literal(self):
        solution = self.evaluator.materialize(RawGeneration(math_text="2 * x ^ (1 / 1e400)"), "s1")
        assert not solution.valid
        assert solution.reason.startswith("ExpressionSyntaxError")

    def test_canonical_text_rescores(self):
        solution = self.evaluator.materialize(RawGeneration(math_text="c0 * x ^ (1 / 1e300) + 2.5e-7"), "s1")
        assert solution.valid
        model = solution.fitted_model()
        assert model.skeleton.variables == ("x",)
        assert to_text(model.skeleton) == solution.canonical

    def test_no_finite_loss(self):
        data = Dataset(name="neg", columns={"x": [-1.0, -2.0, -3.0], "y": [1.0, 2.0, 3.0]},
                       target="y", id_rows=[0, 1, 2], ood_rows=[])
        solution = Evaluator(data, FAST_FIT).materialize(RawGeneration(math_text="log(x)"), "s1")
        assert not solution.valid
        assert solution.reason.startswith("NoFiniteLoss")

    def test_missing_variable(self):
        solution = self.evaluator.materialize(RawGeneration(math_text="c0 * z"), "s1")
        assert not solution.valid
        assert solution.reason.startswith("MissingVariable")

    def test_extraction_error_is_kept(self):
        raw = RawGeneration(idea_text="an idea", extraction_error="MissingMathBlock: no math")
        solution = self.evaluator.materialize(raw, "s1")
        assert not solution.valid
        assert solution.reason == "MissingMathBlock: no math"
        assert solution.idea_text == "an idea"

    def test_lineage_and_birth(self):
        lineage = Lineage(parents=["a", "b"], operator="pos_crossover")
        solution = self.evaluator.materialize(RawGeneration(math_text="c0 * x"), "s9", lineage, born_at=42)
        assert solution.lineage.parents == ["a", "b"]
        assert solution.born_at == 42

    def test_fitted_model_round_trip(self):
        solution = self.evaluator.materialize(RawGeneration(math_text="c0 * x + c1"), "s1")
        model = solution.fitted_model()
        assert model.skeleton.param_count == 2
        assert model.params == tuple(solution.params)

    def test_feedback(self):
        good = self.evaluator.materialize(RawGeneration(math_text="c0 * x"), "s1")
        bad = self.evaluator.materialize(RawGeneration(math_text="c0 * ("), "s2")
        assert self.evaluator.feedback(good).startswith("Training NMSE")
        assert "could not be evaluated" in self.evaluator.feedback(bad)


class TestSolutionInvariants:
    """Validity and lineage rules enforced by the model."""

    def test_valid_needs_finite_score(self):
        with pytest.raises(ValidationError):
            Solution(id="s", valid=True, score=math.inf)

    def test_invalid_scores_infinity(self):
        with pytest.raises(ValidationError):
            Solution(id="s", valid=False, score=0.3)

    def test_init_has_no_parents(self):
        with pytest.raises(ValidationError):
            Lineage(parents=["a"], operator="init")
        with pytest.raises(ValidationError):
            Lineage(parents=[], operator="pos_mutation")

    def test_json_round_trip_keeps_infinity(self):
        solution = make_solution("s", score=math.inf)
        restored = Solution.model_validate_json(solution.model_dump_json())
        assert restored.score == math.inf
        assert restored == solution


class TestCompare:
    """Total order: score, node count, birth, id."""

    def test_lower_score_first(self):
        assert compare(make_solution("a", 0.1), make_solution("b", 0.2)) == -1

    def test_smaller_expression_breaks_score_ties(self):
        assert compare(make_solution("a", 0.1, node_count=9), make_solution("b", 0.1, node_count=5)) == 1

    def test_earlier_birth_breaks_size_ties(self):
        assert compare(make_solution("a", 0.1, born_at=3), make_solution("b", 0.1, born_at=7)) == -1

    def test_id_breaks_remaining_ties(self):
        assert compare(make_solution("a", 0.1), make_solution("b", 0.1)) == -1
        assert compare(make_solution("a", 0.1), make_solution("a", 0.1)) == 0

    def test_invalid_sorts_last(self):
        ranked = rank([make_solution("bad", math.inf), make_solution("ok", 5.0)])
        assert [s.id for s in ranked] == ["ok", "bad"]

    def test_total_order_properties(self):
        rng = random.Random(3)
        pool = [
            make_solution(f"s{i}", rng.choice([0.1, 0.2, math.inf]), node_count=rng.choice([3, 5]),
                          born_at=rng.randrange(3))
            for i in range(30)
        ]
        for a in pool:
            for b in pool:
                assert compare(a, b) == -compare(b, a)
                for c in pool[:10]:
                    if compare(a, b) <= 0 and compare(b, c) <= 0:
                        assert compare(a, c) <= 0
        ranked = rank(pool)
        assert all(compare(x, y) <= 0 for x, y in zip(ranked, ranked[1:]))


if __name__ == "__main__":
    pytest.main([__file__])
