import logging

import numpy as np
import pytest

from raclora.core.objectives import (
    LinearRegressionObjective,
    RegressionSpec,
    synthetic_linear_regression,
)
from raclora.core.optimizers import (
    AbcConstants,
    ChainConfig,
    ChainState,
    InnerSolver,
    Method,
    abc_residual,
    default_step_size,
    epoch_permutation,
    iterations_to_gap,
    joint_lora_step,
    mean_gap_ratio,
    mean_grad_norm_average,
    merge_factor,
    rac_gd_step,
    rac_rr_epoch,
    rac_sgd_step,
    rr_rate_condition,
    run_chain,
    sgd_step_bound,
    solve_subproblem_closed_form,
    theorem_rate_check,
    uniform_sampler,
    uniform_sampling_abc,
)
from raclora.core.sketch import SketchSpec, build_projector, sample_sketch
from raclora.errors import InvalidConfig, ShapeError

from .conftest import COUNTEREXAMPLE_F_STAR

GAMMA = 1.0 / 20.0


def chain(spec, method=Method.RAC_LORA, gamma=GAMMA, length=100, seed=0, **kwargs):
    return ChainConfig(
        chain_length=length,
        step_gamma=gamma,
        sketch=spec,
        method=method,
        seed=seed,
        **kwargs,
    )


def run_from_zero(obj, cfg):
    return run_chain(obj, cfg, np.zeros(obj.shape))


def seeded_projector(spec, seed):
    """Projector of the first sketch a chain with ``seed`` draws."""
    return build_projector(sample_sketch(spec, np.random.default_rng(seed)), spec.side)


def rate_report(obj, cfg):
    return theorem_rate_check(run_from_zero(obj, cfg).records, obj, cfg)


def seed_runs(obj, spec, steps, seeds=50):
    return [run_from_zero(obj, chain(spec, length=steps, seed=s)) for s in range(seeds)]


class TestChainConfig:
    def test_eta_and_lambda(self, rank_one_left):
        cfg = chain(rank_one_left)
        assert cfg.eta == pytest.approx(GAMMA)
        assert cfg.lambda_min == pytest.approx(1 / 3)
        assert chain(rank_one_left, method="fpft").lambda_min == 1.0

    def test_eta_uses_lora_scale(self):
        spec = SketchSpec(side="left", rank=2, target_rows=3, target_cols=3, alpha=4.0)
        assert chain(spec, gamma=0.1).eta == pytest.approx(0.05)

    @pytest.mark.parametrize(
        "kwargs",
        [
            {"length": 0},
            {"gamma": 0.0},
            {"gamma": -1.0},
            {"seed": -1},
            {"seed": 2**64},
            {"inner_steps": 0},
            {"sgd_batch": 0},
            {"sgd_sampler": "importance"},
        ],
    )
    def test_rejects(self, rank_one_left, kwargs):
        with pytest.raises(InvalidConfig):
            chain(rank_one_left, **kwargs)

    def test_unknown_method(self, rank_one_left):
        with pytest.raises(InvalidConfig, match="adam"):
            chain(rank_one_left, method="adam")


class TestClosedForm:
    @pytest.mark.parametrize("side", ["left", "right"])
    def test_merge_equals_projected_step(self, side, rng):
        w = rng.standard_normal((5, 4))
        grad = rng.standard_normal((5, 4))
        if side == "left":
            sketch = rng.standard_normal((5, 2))
        else:
            sketch = rng.standard_normal((2, 4))
        eta, scale = 0.3, 0.5
        factor = solve_subproblem_closed_form(sketch, grad, eta, side)
        merged = merge_factor(w, sketch, factor, scale, side)
        expected = w - scale * eta * build_projector(sketch, side).apply(grad)
        np.testing.assert_allclose(merged, expected, atol=1e-10)

    @pytest.mark.parametrize("side", ["left", "right"])
    def test_update_lies_in_sketch_range(self, side, rng):
        grad = rng.standard_normal((5, 4))
        if side == "left":
            sketch = rng.standard_normal((5, 2))
        else:
            sketch = rng.standard_normal((2, 4))
        factor = solve_subproblem_closed_form(sketch, grad, 0.2, side)
        delta = merge_factor(np.zeros((5, 4)), sketch, factor, 1.0, side)
        h = build_projector(sketch, side).h
        if side == "left":
            residual = (np.eye(5) - h) @ delta
        else:
            residual = delta @ (np.eye(4) - h)
        np.testing.assert_allclose(residual, 0.0, atol=1e-12)
        assert np.linalg.norm(delta) > 0.0

    def test_factor_shapes(self, rng):
        grad = rng.standard_normal((5, 4))
        left_sketch = rng.standard_normal((5, 2))
        right_sketch = rng.standard_normal((2, 4))
        left = solve_subproblem_closed_form(left_sketch, grad, 0.1, "left")
        assert left.shape == (2, 4)
        right = solve_subproblem_closed_form(right_sketch, grad, 0.1, "right")
        assert right.shape == (5, 2)

    def test_shape_mismatch(self, rng):
        sketch, grad = rng.standard_normal((4, 2)), rng.standard_normal((5, 4))
        with pytest.raises(ShapeError):
            solve_subproblem_closed_form(sketch, grad, 0.1, "left")

    def test_non_positive_eta(self, rng):
        sketch, grad = rng.standard_normal((5, 2)), rng.standard_normal((5, 4))
        with pytest.raises(InvalidConfig):
            solve_subproblem_closed_form(sketch, grad, 0.0, "left")

    def test_full_rank_sketch_is_gradient_descent(self, counterexample, rng):
        spec = SketchSpec(side="left", rank=3, target_rows=3, target_cols=3)
        w0 = rng.standard_normal((3, 3))
        state = ChainState.start(counterexample, w0, seed=9)
        state, _ = rac_gd_step(state, counterexample, chain(spec))
        expected = w0 - GAMMA * counterexample.gradient(w0)
        np.testing.assert_allclose(state.w, expected, atol=1e-10)


class TestInnerSolverReductions:
    def test_rr_with_one_sample_is_gd(self, counterexample, rank_one_left):
        # the counterexample has a single summand
        gd_cfg = chain(rank_one_left, gamma=0.02, length=50, seed=4)
        rr_cfg = chain(rank_one_left, gamma=0.02, length=50, seed=4, inner="rr")
        gd = run_from_zero(counterexample, gd_cfg)
        rr = run_from_zero(counterexample, rr_cfg)
        assert [r.f_value for r in rr.records] == [r.f_value for r in gd.records]
        np.testing.assert_array_equal(rr.final_w, gd.final_w)
        assert rr.output_index == gd.output_index

    def test_sgd_with_full_sampler_is_gd(self, small_linreg):
        spec = SketchSpec(side="left", rank=1, target_rows=2, target_cols=3)
        gamma = 1.0 / small_linreg.smoothness_l
        gd_cfg = chain(spec, gamma=gamma, length=30, seed=2)
        sgd_cfg = chain(
            spec, gamma=gamma, length=30, seed=2, inner="sgd", sgd_sampler="full"
        )
        gd = run_from_zero(small_linreg, gd_cfg)
        sgd = run_from_zero(small_linreg, sgd_cfg)
        np.testing.assert_array_equal(sgd.final_w, gd.final_w)
        assert [r.grad_norm_sq for r in sgd.records] == [
            r.grad_norm_sq for r in gd.records
        ]

    def test_single_steps_agree(self, small_linreg, rng):
        spec = SketchSpec(side="right", rank=2, target_rows=2, target_cols=3)
        w0 = rng.standard_normal((2, 3))
        gd_state, gd_rec = rac_gd_step(
            ChainState.start(small_linreg, w0, 3), small_linreg, chain(spec, gamma=0.01)
        )
        sgd_cfg = chain(spec, gamma=0.01, inner=InnerSolver.SGD, sgd_sampler="full")
        sgd_state, sgd_rec = rac_sgd_step(
            ChainState.start(small_linreg, w0, 3), small_linreg, sgd_cfg
        )
        np.testing.assert_array_equal(gd_state.w, sgd_state.w)
        assert gd_rec == sgd_rec

    def test_two_sample_epoch_matches_sequential_oracle(self):
        x = np.array([[1.0, 0.0, 2.0, 0.0], [0.0, 1.0, 0.0, -1.0]])
        y = np.array([1.0, -1.0])
        spec = RegressionSpec(x=x, y=y, reg_lambda=0.1, shape=(2, 2))
        obj = LinearRegressionObjective(spec)
        sketch = SketchSpec(side="left", rank=2, target_rows=2, target_cols=2)
        gamma = 0.01
        cfg = chain(sketch, gamma=gamma, length=1, seed=5, inner="rr")
        start = ChainState.start(obj, np.zeros((2, 2)), 5)
        state, record = rac_rr_epoch(start, obj, cfg, permutation=(0, 1))

        # full-rank sketch: H is the identity up to rounding
        np.testing.assert_allclose(seeded_projector(sketch, 5).h, np.eye(2), atol=1e-10)
        w = np.zeros(4)
        for i in (0, 1):
            w = w - gamma * (2.0 * x[i] * (x[i] @ w - y[i]) + 2.0 * 0.1 * w)
        np.testing.assert_allclose(state.w.reshape(-1), w, atol=1e-12)
        assert record.t == 0
        assert state.t == 1

    def test_gd_block_repeats_the_same_projector(self, small_linreg, rng):
        spec = SketchSpec(side="left", rank=1, target_rows=2, target_cols=3)
        gamma = 1.0 / small_linreg.smoothness_l
        w0 = rng.standard_normal((2, 3))
        cfg = chain(spec, gamma=gamma, seed=3, inner_steps=3)
        start = ChainState.start(small_linreg, w0, 3)
        state, record = rac_gd_step(start, small_linreg, cfg)

        projector = seeded_projector(spec, 3)
        w = w0
        for _ in range(3):
            w = w - gamma * projector.apply(small_linreg.gradient(w))
        np.testing.assert_allclose(state.w, w, atol=1e-12)
        assert state.f_value == pytest.approx(small_linreg.value(w))
        assert record.f_value == pytest.approx(small_linreg.value(w0))
        assert state.t == 1

    def test_multi_step_blocks_descend(self, counterexample, rank_one_left):
        for seed in range(20):
            cfg = chain(rank_one_left, length=400, seed=seed, inner_steps=5)
            run = run_from_zero(counterexample, cfg)
            assert not run.diverged
            values = [r.f_value for r in run.records]
            assert all(b <= a + 1e-12 for a, b in zip(values, values[1:]))
            assert run.final.gap <= 1e-10

    def test_uniform_sampler_is_unbiased(self, small_linreg, rng):
        w = rng.standard_normal(small_linreg.shape)
        spread = small_linreg.sample_gradients(w).std(axis=0)
        draws = 20000
        for batch in (1, 4):
            samples = [
                uniform_sampler(small_linreg, w, rng, batch) for _ in range(draws)
            ]
            tolerance = 5.0 * spread / np.sqrt(draws * batch)
            error = np.abs(np.mean(samples, axis=0) - small_linreg.gradient(w))
            assert np.all(error <= tolerance)

    def test_epoch_permutation_is_reproducible(self):
        first = epoch_permutation(3, 1, 10)
        assert sorted(first) == list(range(10))
        np.testing.assert_array_equal(first, epoch_permutation(3, 1, 10))
        assert not np.array_equal(first, epoch_permutation(3, 2, 10))
        assert not np.array_equal(first, epoch_permutation(3, 1, 10, client_id=1))


class TestBaselines:
    def test_joint_lora_first_step_moves_only_b(self, counterexample, rng):
        a = rng.standard_normal((1, 3))
        state = ChainState.start(counterexample, np.zeros((3, 3)), 0)
        state.a, state.b = a, np.zeros((3, 1))
        new = joint_lora_step(state, counterexample, eta=0.1, alpha=1.0, r=1)
        np.testing.assert_array_equal(new.a, a)
        np.testing.assert_allclose(new.b, -0.1 * np.ones((3, 3)) @ a.T)
        assert new.t == 1
        np.testing.assert_array_equal(new.w, np.zeros((3, 3)))

    def test_joint_lora_needs_factors(self, counterexample):
        state = ChainState.start(counterexample, np.zeros((3, 3)), 0)
        with pytest.raises(InvalidConfig):
            joint_lora_step(state, counterexample, eta=0.1, alpha=1.0, r=1)

    def test_cola_merges_each_block(self, counterexample, rank_one_left):
        cfg = chain(rank_one_left, Method.COLA, gamma=0.01, length=3, inner_steps=4)
        run = run_from_zero(counterexample, cfg)
        assert not run.diverged
        assert [r.t for r in run.records] == list(range(13))
        assert run.final.f_value == pytest.approx(counterexample.value(run.final_w))
        assert run.final.f_value < 0.0

    def test_cola_block_opens_with_right_sketch(self, counterexample, rank_one_left):
        cfg = chain(
            rank_one_left, Method.COLA, gamma=0.01, length=1, seed=8, inner_steps=1
        )
        run = run_from_zero(counterexample, cfg)
        a = np.random.default_rng(8).standard_normal((1, 3))
        grad = counterexample.gradient(np.zeros((3, 3)))
        np.testing.assert_allclose(run.final_w, -0.01 * grad @ a.T @ a, atol=1e-14)

    def test_asymm_lora_stalls_on_subproblem(self, counterexample, rank_one_left):
        cfg = chain(rank_one_left, Method.ASYMM_LORA, length=500, seed=6)
        run = run_from_zero(counterexample, cfg)
        grad = counterexample.gradient(run.final_w)
        assert np.linalg.norm(seeded_projector(rank_one_left, 6).apply(grad)) <= 1e-8
        assert np.linalg.norm(grad) > 1e-2

    def test_fpft_matches_full_rank_chain(self, counterexample):
        full = SketchSpec(side="left", rank=3, target_rows=3, target_cols=3)
        rac = run_from_zero(counterexample, chain(full, seed=3))
        fpft = run_from_zero(counterexample, chain(full, Method.FPFT, seed=3))
        np.testing.assert_allclose(
            [r.f_value for r in rac.records],
            [r.f_value for r in fpft.records],
            rtol=0.0,
            atol=1e-10,
        )

    @pytest.mark.slow
    def test_joint_lora_fails_on_counterexample(self, counterexample, rank_one_left):
        # the minimizer has rank two, so no rank-one product is stationary
        failures = 0
        for seed in range(20):
            cfg = chain(rank_one_left, Method.JOINT_LORA, length=3000, seed=seed)
            run = run_from_zero(counterexample, cfg)
            failures += run.diverged or run.final.grad_norm_sq > 1e-4
        assert failures >= 18

    @pytest.mark.slow
    def test_cola_fails_on_counterexample(self, counterexample, rank_one_left):
        failures = 0
        for seed in range(20):
            cfg = chain(
                rank_one_left, Method.COLA, length=300, seed=seed, inner_steps=10
            )
            run = run_from_zero(counterexample, cfg)
            failures += run.diverged or run.final.grad_norm_sq > 1e-4
        assert failures >= 18


class TestRunChain:
    def test_counterexample_converges(self, counterexample, rank_one_left):
        for seed in range(20):
            cfg = chain(rank_one_left, length=1000, seed=seed)
            run = run_from_zero(counterexample, cfg)
            assert not run.diverged
            assert run.final.gap <= 1e-10
            assert run.final.f_value == pytest.approx(COUNTEREXAMPLE_F_STAR)

    @pytest.mark.slow
    def test_counterexample_reaches_round_off(self, counterexample, rank_one_left):
        for seed in range(20):
            cfg = chain(rank_one_left, length=3000, seed=seed)
            run = run_from_zero(counterexample, cfg)
            assert not run.diverged
            assert run.final.gap <= 1e-10
            assert run.final.grad_norm_sq <= 1e-16

    def test_trace_layout(self, counterexample, rank_one_left):
        run = run_from_zero(counterexample, chain(rank_one_left, length=25, seed=1))
        assert len(run.records) == 26
        assert [r.t for r in run.records] == list(range(26))
        assert run.records[0].f_value == 0.0
        assert run.records[0].gap == pytest.approx(2.025)
        assert all(r.method == "rac_lora" and r.seed == 1 for r in run.records)
        assert 0 <= run.output_index < 25

    def test_recorded_values_match_iterates(self, small_linreg):
        spec = SketchSpec(side="right", rank=1, target_rows=2, target_cols=3)
        cfg = chain(spec, gamma=1.0 / small_linreg.smoothness_l, length=10, seed=5)
        run = run_from_zero(small_linreg, cfg)
        expected = small_linreg.value(run.final_w)
        assert run.final.f_value == pytest.approx(expected, rel=1e-12)

    def test_is_reproducible(self, small_linreg):
        spec = SketchSpec(side="left", rank=1, target_rows=2, target_cols=3)
        cfg = chain(spec, gamma=0.01, length=20, seed=17, inner="sgd")
        first = run_from_zero(small_linreg, cfg)
        second = run_from_zero(small_linreg, cfg)
        assert first.records == second.records
        assert first.output_index == second.output_index

    def test_divergence_is_flagged(self, counterexample):
        full = SketchSpec(side="left", rank=3, target_rows=3, target_cols=3)
        cfg = chain(full, gamma=10.0 / 20.0, length=500, seed=0)
        run = run_from_zero(counterexample, cfg)
        assert run.diverged
        last = run.final
        assert last.diverged
        assert last.grad_norm_sq == np.inf
        assert last.gap is None
        assert not any(r.diverged for r in run.records[:-1])
        assert [r.t for r in run.records] == list(range(len(run.records)))

    @pytest.mark.parametrize(
        "method,kwargs",
        [
            (Method.RAC_LORA, {}),
            (Method.ASYMM_LORA, {}),
            (Method.JOINT_LORA, {}),
            (Method.COLA, {"inner_steps": 10}),
        ],
    )
    def test_divergence_keeps_last_finite_iterate(
        self, counterexample, rank_one_left, method, kwargs
    ):
        cfg = chain(rank_one_left, method, gamma=5.0, length=200, **kwargs)
        run = run_from_zero(counterexample, cfg)
        assert run.diverged
        assert np.all(np.isfinite(run.final_w))
        assert not np.array_equal(run.final_w, np.zeros((3, 3)))
        last_finite = run.records[-2].f_value
        assert counterexample.value(run.final_w) == pytest.approx(last_finite)

    def test_shape_checks(self, counterexample, rank_one_left):
        with pytest.raises(ShapeError):
            run_chain(counterexample, chain(rank_one_left), np.zeros((2, 3)))
        wrong = SketchSpec(side="left", rank=1, target_rows=2, target_cols=3)
        with pytest.raises(InvalidConfig):
            run_from_zero(counterexample, chain(wrong))

    def test_oversized_step_warns(self, counterexample, rank_one_left, caplog):
        with caplog.at_level(logging.WARNING, logger="raclora.core.optimizers"):
            run_from_zero(counterexample, chain(rank_one_left, gamma=0.06, length=5))
        assert "exceeds the theoretical limit" in caplog.text


class TestTheoremDiagnostics:
    def test_descent_holds_at_theoretical_step(self, counterexample, rank_one_left):
        report = rate_report(counterexample, chain(rank_one_left, length=200, seed=2))
        assert report.descent_checked == 200
        assert report.descent_holds
        assert report.grad_bound_holds
        assert report.rate_bound == pytest.approx(1.0 - 1.0 / 30.0)

    def test_descent_fails_for_oversized_step(self, counterexample, rank_one_left):
        cfg = chain(rank_one_left, gamma=10.0 / 20.0, length=20, seed=2)
        report = rate_report(counterexample, cfg)
        assert report.descent_violations >= 1
        assert not report.descent_holds

    def test_descent_check_skipped_for_rr(self, counterexample, rank_one_left):
        cfg = chain(rank_one_left, gamma=0.02, length=10, inner="rr")
        report = rate_report(counterexample, cfg)
        assert report.descent_checked == 0
        assert any("descent" in note for note in report.notes)

    @pytest.mark.parametrize("steps", [100, 300])
    def test_seed_averaged_rate(self, counterexample, rank_one_left, steps):
        runs = seed_runs(counterexample, rank_one_left, steps)
        assert mean_gap_ratio(runs, steps) <= (1.0 - 1.0 / 30.0) ** steps * 1.15

    @pytest.mark.parametrize("steps", [50, 200])
    def test_seed_averaged_gradient_bound(self, counterexample, rank_one_left, steps):
        runs = seed_runs(counterexample, rank_one_left, steps)
        bound = 2.0 * (0.0 - COUNTEREXAMPLE_F_STAR) / ((1.0 / 3.0) * GAMMA * steps)
        assert mean_grad_norm_average(runs, steps) <= bound * 1.15

    def test_iterations_to_gap(self, counterexample, rank_one_left):
        run = run_from_zero(counterexample, chain(rank_one_left, length=1000, seed=0))
        hit = iterations_to_gap(run.records, 1e-6)
        assert hit is not None
        assert run.records[hit].gap <= 1e-6
        assert all(r.gap > 1e-6 for r in run.records[:hit])
        assert iterations_to_gap(run.records, -1.0) is None


class TestStepSizes:
    def test_defaults(self, counterexample, small_linreg, rank_one_left):
        gd = default_step_size(counterexample, "rac_lora", "gd", rank_one_left)
        assert gd == pytest.approx(GAMMA)
        spec = SketchSpec(side="left", rank=1, target_rows=2, target_cols=3)
        rr = default_step_size(small_linreg, "rac_lora", "rr", spec)
        assert rr == pytest.approx(1.0 / (2.0 * small_linreg.smoothness_l * 40))
        fpft = default_step_size(small_linreg, "fpft", "rr", spec)
        assert fpft == pytest.approx(1.0 / small_linreg.smoothness_l)

    def test_sgd_bound_uses_abc(self):
        abc = AbcConstants(a1=2.0, b1=1.0, c1=0.5)
        assert sgd_step_bound(abc, 4.0, 0.5, 0.5) == pytest.approx(0.25)
        with_pl = sgd_step_bound(abc, 4.0, 0.5, 0.5, pl_mu=1.0)
        assert with_pl == pytest.approx(1.0 / 16.0)
        zero = AbcConstants(0.0, 0.0, 0.0)
        assert sgd_step_bound(zero, 4.0, 0.5, 0.5) == pytest.approx(0.25)

    def test_negative_abc_rejected(self):
        with pytest.raises(InvalidConfig):
            AbcConstants(a1=-1.0, b1=0.0, c1=0.0)

    def test_uniform_sampling_abc_holds(self, small_linreg, rng):
        abc = uniform_sampling_abc(small_linreg)
        assert abc.b1 == 0.0
        for _ in range(20):
            w = rng.standard_normal(small_linreg.shape)
            assert abc_residual(small_linreg, abc, w) >= -1e-9

    def test_rr_rate_condition(self):
        assert rr_rate_condition(1.0 / 3.0, 1.0 / 3.0) == pytest.approx(0.25)


@pytest.mark.slow
def test_rank_scaling_on_linear_regression():
    rng = np.random.default_rng(0)
    _, fine, w0 = synthetic_linear_regression(rng, 3000, 1000, (10, 10))
    obj = LinearRegressionObjective(fine)
    gamma = 1.0 / obj.smoothness_l
    iters = {}
    for r in (1, 2, 5, 10):
        spec = SketchSpec(side="left", rank=r, target_rows=10, target_cols=10)
        hits = []
        for seed in range(10):
            run = run_chain(obj, chain(spec, gamma=gamma, length=3000, seed=seed), w0)
            hits.append(iterations_to_gap(run.records, 1e-6))
        assert None not in hits
        iters[r] = float(np.mean(hits))
    for r in (1, 2, 5):
        assert 0.6 * (10 / r) <= iters[r] / iters[10] <= 1.5 * (10 / r)
