import numpy as np
import pytest

from gspace.analysis import gradient_variance
from gspace.core import DegenerateDataError, GradientMatrix, GspaceError
from gspace.models import LinearRegression, LogisticModel, TwoLayerMLP, make_model
from gspace.online import Partition
from gspace.rng import substream
from gspace.sim import (
    SimConfig,
    embedding_vs_gradient_correlation,
    expert_vs_shared_experiment,
    fourmode_fixture,
    gen_mixture,
    gradient_records,
    heterogeneous_fixture,
    homogeneous_fixture,
    negative_control_fixture,
    per_example_gradient,
    random_partition,
    sample_directions,
    sgd_train,
    warmup_train,
)


def finite_difference_grad(model, params, x, y, eps=1e-6):
    grad = np.zeros_like(params)
    for j in range(params.shape[0]):
        up = params.copy()
        dn = params.copy()
        up[j] += eps
        dn[j] -= eps
        grad[j] = (model.example_loss(up, x, y) - model.example_loss(dn, x, y)) / (2 * eps)
    return grad


MODELS = [
    LinearRegression(6),
    LogisticModel(6),
    TwoLayerMLP(6, 3),
]


class TestAnalyticGradients:
    @pytest.mark.parametrize("model", MODELS, ids=lambda m: m.name)
    def test_matches_central_differences(self, model):
        rng = np.random.default_rng(0)
        for _ in range(34):  # ~100 probes across the three models
            params = rng.standard_normal(model.num_params) * 0.5
            x = rng.standard_normal(model.input_dim)
            y = float(rng.integers(0, 2)) if model.name == "logistic" else float(rng.standard_normal())
            analytic = model.example_grad(params, x, y)
            numeric = finite_difference_grad(model, params, x, y)
            scale = max(float(np.max(np.abs(numeric))), 1e-8)
            assert np.max(np.abs(analytic - numeric)) / scale < 1e-5

    @pytest.mark.parametrize("model", MODELS, ids=lambda m: m.name)
    def test_batch_grad_is_mean_of_example_grads(self, model):
        rng = np.random.default_rng(1)
        params = rng.standard_normal(model.num_params) * 0.3
        X = rng.standard_normal((12, model.input_dim))
        y = (
            rng.integers(0, 2, size=12).astype(float)
            if model.name == "logistic"
            else rng.standard_normal(12)
        )
        mean_grad = np.mean([model.example_grad(params, X[i], y[i]) for i in range(12)], axis=0)
        np.testing.assert_allclose(model.batch_grad(params, X, y), mean_grad, atol=1e-12)

    def test_linear_closed_form(self):
        model = LinearRegression(3)
        w = np.array([1.0, -1.0, 2.0])
        x = np.array([0.5, 2.0, 1.0])
        y = 3.0
        expected = (float(w @ x) - y) * x
        np.testing.assert_allclose(model.example_grad(w, x, y), expected, atol=1e-15)

    def test_linear_zero_residual(self):
        model = LinearRegression(2)
        w = np.array([2.0, 1.0])
        x = np.array([1.0, 3.0])
        np.testing.assert_allclose(model.example_grad(w, x, float(w @ x)), 0.0, atol=1e-15)

    def test_make_model_rejects_unknown(self):
        with pytest.raises(GspaceError):
            make_model("perceptron", 4)


class TestSampleDirections:
    def test_pairwise_constraint(self):
        rng = substream(0, "dirs")
        dirs = sample_directions(5, 32, 0.1, rng)
        for i in range(5):
            assert np.linalg.norm(dirs[i]) == pytest.approx(1.0, abs=1e-12)
            for j in range(i + 1, 5):
                assert float(dirs[i] @ dirs[j]) <= 0.1

    def test_antipodal_special_case(self):
        rng = substream(1, "dirs")
        dirs = sample_directions(2, 8, -1.0, rng)
        np.testing.assert_allclose(dirs[0], -dirs[1], atol=1e-12)

    def test_infeasible_raises(self):
        rng = substream(2, "dirs")
        with pytest.raises(GspaceError):
            sample_directions(3, 8, -0.9, rng, max_attempts=50)


class TestGenMixture:
    def test_counting(self):
        ds = gen_mixture(SimConfig(num_tasks=4, input_dim=64, examples_per_task=50, seed=0))
        assert ds.n == 200
        for t in range(4):
            assert ds.tags.count(f"task{t}") == 50

    def test_single_task_gradient_cone(self):
        cfg = SimConfig(num_tasks=1, input_dim=64, examples_per_task=60, noise_sigma=0.05, seed=1)
        ds = gen_mixture(cfg)
        model = cfg.build_model()
        params = model.reference_params(cfg.seed)
        recs = gradient_records(model, params, ds)
        direction = ds.task_directions[0]
        for rec in recs:
            v = rec.vector.astype(np.float64)
            assert float(v @ direction) / np.linalg.norm(v) > 0.8

    def test_antipodal_cancellation(self):
        cfg = SimConfig(num_tasks=2, input_dim=32, examples_per_task=50, mode_separation=-1.0, seed=2)
        ds = gen_mixture(cfg)
        model = cfg.build_model()
        params = model.reference_params(cfg.seed)
        grads = np.stack(
            [model.example_grad(params, ds.inputs[i], ds.targets[i]) for i in range(ds.n)]
        )
        mean_norm = float(np.linalg.norm(grads.mean(axis=0)))
        typical = float(np.mean(np.linalg.norm(grads, axis=1)))
        assert mean_norm < 0.2 * typical

    def test_interference_witness(self):
        # between-task variance dominates: pooled variance >= 10x weighted within
        cfg = SimConfig(num_tasks=2, input_dim=32, examples_per_task=50, mode_separation=-1.0, seed=3)
        ds = gen_mixture(cfg)
        model = cfg.build_model()
        params = model.reference_params(cfg.seed)
        grads = np.stack(
            [model.example_grad(params, ds.inputs[i], ds.targets[i]) for i in range(ds.n)]
        )
        pooled = gradient_variance(grads)
        within = 0.0
        for t in range(2):
            mask = ds.task_of == t
            within += mask.mean() * gradient_variance(grads[mask])
        assert pooled >= 10 * within

    @pytest.mark.parametrize("name", ["linear-regression", "logistic", "two-layer-mlp"])
    def test_gradients_concentrate_for_every_model(self, name):
        cfg = SimConfig(
            num_tasks=3,
            input_dim=24,
            hidden_dim=6,
            examples_per_task=20,
            model=name,
            noise_sigma=0.05,
            seed=4,
        )
        ds = gen_mixture(cfg)
        model = cfg.build_model()
        params = model.reference_params(cfg.seed)
        for i in range(ds.n):
            g = model.example_grad(params, ds.inputs[i], ds.targets[i])
            u = ds.task_directions[ds.task_of[i]]
            assert float(g @ u) / np.linalg.norm(g) > 0.85

    def test_deterministic(self):
        a = gen_mixture(SimConfig(seed=9))
        b = gen_mixture(SimConfig(seed=9))
        np.testing.assert_array_equal(a.inputs, b.inputs)
        np.testing.assert_array_equal(a.targets, b.targets)
        assert a.texts == b.texts

    def test_conflicting_pairs_needs_even_tasks(self):
        with pytest.raises(GspaceError):
            SimConfig(num_tasks=3, conflicting_pairs=True)

    def test_grad_dim_validation(self):
        with pytest.raises(GspaceError):
            SimConfig(input_dim=8, grad_dim=9)
        cfg = SimConfig(input_dim=8, grad_dim=8)
        assert cfg.build_model().num_params == 8

    def test_per_example_gradient_record_fields(self):
        cfg = SimConfig(seed=5)
        ds = gen_mixture(cfg)
        model = cfg.build_model()
        rec = per_example_gradient(model, model.reference_params(cfg.seed), ds.example(3))
        assert rec.id == 3
        assert rec.source_tag == ds.tags[3]
        assert rec.text == ds.texts[3]


class TestWarmup:
    def test_zero_steps_noop(self):
        cfg = SimConfig(seed=6)
        ds = gen_mixture(cfg)
        model = cfg.build_model()
        params = warmup_train(model, ds, 1.0, 0, 0.1, cfg.seed)
        np.testing.assert_array_equal(params, model.reference_params(cfg.seed))

    def test_loss_decreases_convex(self):
        cfg = SimConfig(num_tasks=1, input_dim=16, examples_per_task=100, seed=7)
        ds = gen_mixture(cfg)
        model = cfg.build_model()
        before = model.batch_loss(model.reference_params(cfg.seed), ds.inputs, ds.targets)
        params = warmup_train(model, ds, 1.0, 50, 0.1, cfg.seed)
        after = model.batch_loss(params, ds.inputs, ds.targets)
        assert after < before

    def test_divergence_detected(self):
        cfg = SimConfig(num_tasks=1, input_dim=8, examples_per_task=50, seed=8)
        ds = gen_mixture(cfg)
        model = cfg.build_model()
        with np.errstate(over="ignore"), pytest.raises(GspaceError, match="diverged"):
            warmup_train(model, ds, 1.0, 500, 1e6, cfg.seed)

    def test_warm_start_helps_experts(self):
        # with an equal (budget-limited) step count, experts started from the
        # warmed parameters end at lower average loss than from the reference
        for seed in (10, 11):
            cfg = fourmode_fixture(seed=seed)
            ds = gen_mixture(cfg)
            model = cfg.build_model()
            theta_ref = model.reference_params(cfg.seed)
            theta_w = warmup_train(
                model, ds, cfg.warmup_fraction, cfg.warmup_steps, cfg.warmup_lr, cfg.seed
            )
            warm_losses, ref_losses = [], []
            for t in range(4):
                sub = ds.subset(np.flatnonzero(ds.task_of == t))
                warm_losses.append(
                    sgd_train(model, sub, 0.2, 15, seed=11, init_params=theta_w).losses[-1]
                )
                ref_losses.append(
                    sgd_train(model, sub, 0.2, 15, seed=11, init_params=theta_ref).losses[-1]
                )
            assert np.mean(warm_losses) <= np.mean(ref_losses) + 1e-9


class TestSgdTrain:
    def test_gradient_norm_trends_to_zero_on_quadratic(self):
        cfg = SimConfig(
            num_tasks=1, input_dim=8, examples_per_task=200, linear_targets=True,
            noise_sigma=0.3, seed=12,
        )
        ds = gen_mixture(cfg)
        model = cfg.build_model()
        traj = sgd_train(model, ds, lr=0.3, steps=400, seed=12)
        assert np.mean(traj.grad_sq_norms[-20:]) < 1e-3 * traj.grad_sq_norms[0]

    def test_single_step(self):
        cfg = SimConfig(num_tasks=1, input_dim=4, examples_per_task=10, seed=13)
        ds = gen_mixture(cfg)
        traj = sgd_train(cfg.build_model(), ds, lr=0.1, steps=1, seed=0)
        assert traj.losses.shape == (1,) and traj.grad_sq_norms.shape == (1,)

    def test_bitwise_determinism(self):
        cfg = SimConfig(num_tasks=2, input_dim=8, examples_per_task=20, seed=14)
        ds = gen_mixture(cfg)
        model = cfg.build_model()
        a = sgd_train(model, ds, lr=0.2, steps=50, seed=77)
        b = sgd_train(model, ds, lr=0.2, steps=50, seed=77)
        assert np.array_equal(a.losses, b.losses)
        assert np.array_equal(a.final_params, b.final_params)

    def test_eps_hat_is_mean(self):
        cfg = SimConfig(num_tasks=1, input_dim=4, examples_per_task=10, seed=15)
        ds = gen_mixture(cfg)
        traj = sgd_train(cfg.build_model(), ds, lr=0.1, steps=25, seed=1)
        assert traj.eps_hat == pytest.approx(float(np.mean(traj.grad_sq_norms)))


class TestExpertVsShared:
    def test_antipodal_ratio_much_less_than_one(self):
        cfg = SimConfig(
            num_tasks=2, input_dim=16, examples_per_task=50, mode_separation=-1.0, seed=16
        )
        ds = gen_mixture(cfg)
        by_task = {int(ds.ids[i]): (int(ds.task_of[i]), 1.0) for i in range(ds.n)}
        part = Partition(
            assignments=by_task,
            cluster_sizes=[int(np.sum(ds.task_of == t)) for t in range(2)],
            K=2,
        )
        report = expert_vs_shared_experiment(cfg, partition=part)
        assert report.empirical_ratio < 0.3
        assert report.bound_ratio < 0.3

    def test_heterogeneous_ratio_below_one(self):
        report = expert_vs_shared_experiment(heterogeneous_fixture(seed=17))
        assert report.empirical_ratio < 1.0
        assert report.ratio_at_most_one

    def test_homogeneous_ratio_near_one(self):
        cfg = homogeneous_fixture(seed=18)
        ds = gen_mixture(cfg)
        part = random_partition(ds.ids, 4, cfg.seed)
        report = expert_vs_shared_experiment(cfg, partition=part)
        assert 0.9 <= report.empirical_ratio <= 1.1

    def test_empty_cluster_is_error(self):
        cfg = SimConfig(num_tasks=1, input_dim=4, examples_per_task=10, seed=19)
        part = Partition(
            assignments={i: (0, 1.0) for i in range(10)},
            cluster_sizes=[10, 0],
            K=2,
        )
        with pytest.raises(DegenerateDataError):
            expert_vs_shared_experiment(cfg, partition=part)


class TestCorrelation:
    def test_interference_low_correlation(self):
        cfg = fourmode_fixture(seed=20)
        ds = gen_mixture(cfg)
        model = cfg.build_model()
        theta_w = warmup_train(model, ds, cfg.warmup_fraction, cfg.warmup_steps, cfg.warmup_lr, cfg.seed)
        result = embedding_vs_gradient_correlation(ds, model, theta_w, 500, cfg.seed)
        assert abs(result.pearson_r) < 0.5

    def test_negative_control_high_correlation(self):
        cfg = negative_control_fixture(seed=21)
        ds = gen_mixture(cfg)
        model = cfg.build_model()
        theta_w = warmup_train(model, ds, cfg.warmup_fraction, cfg.warmup_steps, cfg.warmup_lr, cfg.seed)
        result = embedding_vs_gradient_correlation(ds, model, theta_w, 500, cfg.seed)
        assert result.pearson_r > 0.9

    def test_degenerate_pairs_error(self):
        cfg = SimConfig(num_tasks=1, input_dim=4, examples_per_task=2, noise_sigma=0.0, seed=22)
        ds = gen_mixture(cfg)
        model = cfg.build_model()
        with pytest.raises(DegenerateDataError):
            embedding_vs_gradient_correlation(ds, model, model.reference_params(cfg.seed), 2, 0)

    def test_needs_two_pairs(self):
        cfg = SimConfig(num_tasks=1, input_dim=4, examples_per_task=5, seed=23)
        ds = gen_mixture(cfg)
        model = cfg.build_model()
        with pytest.raises(GspaceError):
            embedding_vs_gradient_correlation(ds, model, model.reference_params(0), 1, 0)

    def test_pearson_matches_scipy(self):
        scipy_stats = pytest.importorskip("scipy.stats")
        cfg = fourmode_fixture(seed=24)
        ds = gen_mixture(cfg)
        model = cfg.build_model()
        params = model.reference_params(cfg.seed)
        result = embedding_vs_gradient_correlation(ds, model, params, 200, 3)
        expected = scipy_stats.pearsonr(result.input_cosines, result.gradient_cosines)[0]
        assert result.pearson_r == pytest.approx(expected, abs=1e-12)


class TestRandomPartition:
    def test_balanced_split(self):
        part = random_partition(range(100), 4, seed=0)
        assert part.cluster_sizes == [25, 25, 25, 25]
        assert len(part.assignments) == 100

    def test_deterministic(self):
        a = random_partition(range(20), 3, seed=5)
        b = random_partition(range(20), 3, seed=5)
        assert a.assignments == b.assignments
