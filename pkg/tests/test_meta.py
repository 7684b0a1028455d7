import numpy as np
import pytest

from comet.backbones import CouplingFlow, FlowBackbone, SimpleNetBackbone, SimpleNetModel
from comet.data import GeneratorConfig, generate
from comet.diffcore import Gradient, ParamSet, Tensor, value_and_gradient
from comet.meta import (
    CoMetTrainer,
    DivergenceError,
    EpochRecord,
    TrainConfig,
    outer_step,
    partition_tasks,
)
from comet.scl import confidence_weights


class ScalarToyBackbone:
    """Per-sample loss theta^2 regardless of the features; scores are theta."""

    def init_params(self, seed):
        return ParamSet({"theta": np.array([1.0])})

    def prepare(self, x):
        return np.asarray(x, dtype=np.float64)

    def draw_noise(self, rng, n):
        return None

    def per_sample_loss(self, pt, feats, noise=None):
        theta = pt["theta"]
        ones = Tensor(np.ones((feats.shape[0], 1)))
        return (ones @ (theta * theta).reshape((1, 1))).reshape((feats.shape[0],))

    def scores(self, params, x):
        return np.full(x.shape[0], float(params["theta"][0]))


def default_dataset(seed=3, contamination=0.0, n_train=60):
    cfg = GeneratorConfig(d=4, n_train=n_train, n_test=20, seed=seed,
                          contamination_rate=contamination)
    train, _ = generate(cfg)
    return train.features.astype(np.float64)


def flow_backbone(dim=4):
    return FlowBackbone(CouplingFlow(dim, num_layers=2, hidden_dim=8))


class TestPartitionTasks:
    def test_even_split(self):
        split = partition_tasks(10, 5, seed=0)
        sizes = [len(t) for t in split.tasks]
        assert sizes == [2, 2, 2, 2, 2]
        merged = np.sort(np.concatenate(split.tasks))
        assert np.array_equal(merged, np.arange(10))

    def test_remainder_spread_over_leading_tasks(self):
        split = partition_tasks(7, 3, seed=1)
        assert [len(t) for t in split.tasks] == [3, 2, 2]

    def test_deterministic(self):
        a = partition_tasks(20, 4, seed=9)
        b = partition_tasks(20, 4, seed=9)
        for ta, tb in zip(a.tasks, b.tasks):
            assert np.array_equal(ta, tb)

    def test_errors(self):
        with pytest.raises(ValueError):
            partition_tasks(10, 1, seed=0)
        with pytest.raises(ValueError):
            partition_tasks(3, 4, seed=0)

    def test_every_index_exactly_once(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            n = int(rng.integers(4, 200))
            k = int(rng.integers(2, min(n, 9) + 1))
            split = partition_tasks(n, k, seed=int(rng.integers(1 << 30)))
            merged = np.sort(np.concatenate(split.tasks))
            assert np.array_equal(merged, np.arange(n))


class TestOuterStep:
    def _params(self):
        return ParamSet({"theta": np.array([1.0, -2.0])})

    def test_zero_gradient_unchanged(self):
        params = self._params()
        out = outer_step(params, Gradient({"theta": np.zeros(2)}), beta=0.5)
        assert np.array_equal(out["theta"], params["theta"])

    def test_zero_beta_unchanged(self):
        params = self._params()
        out = outer_step(params, Gradient({"theta": np.ones(2)}), beta=0.0)
        assert np.array_equal(out["theta"], params["theta"])

    def test_scalar_case(self):
        params = ParamSet({"theta": np.array([1.0])})
        out = outer_step(params, Gradient({"theta": np.array([2.0])}), beta=0.1)
        assert out["theta"][0] == pytest.approx(0.8, abs=1e-15)

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValueError):
            outer_step(self._params(), Gradient({"theta": np.zeros(3)}), beta=0.1)


class TestTrainConfig:
    def test_defaults_valid(self):
        TrainConfig()

    def test_inner_steps_floor_depends_on_ml(self):
        with pytest.raises(ValueError):
            TrainConfig(inner_steps=1)
        TrainConfig(inner_steps=1, disable_ml=True)

    def test_rejections(self):
        for bad in (
            dict(alpha=0.0),
            dict(beta=-1.0),
            dict(n_tasks=1),
            dict(kappa=-0.5),
            dict(lambda0=-1e-9),
            dict(gamma=-1.0),
            dict(backbone="foo"),
            dict(outer_update="sometimes"),
        ):
            with pytest.raises(ValueError):
                TrainConfig(**bad)


class TestInnerAdapt:
    def _trainer(self, alpha=0.1, inner_steps=1):
        cfg = TrainConfig(alpha=alpha, beta=2 * alpha, inner_steps=inner_steps,
                          disable_ml=True, epochs=1, seed=0)
        return CoMetTrainer(ScalarToyBackbone(), cfg)

    def test_single_step_on_scalar_quadratic(self):
        trainer = self._trainer(alpha=0.1, inner_steps=1)
        params = ParamSet({"theta": np.array([1.0])})
        feats = np.zeros((1, 1))
        weights = np.ones(1)
        adapted, series = trainer.inner_adapt(
            params, np.array([0]), np.array([0]), feats, weights, lam=0.0,
            rng=np.random.default_rng(0),
        )
        assert adapted["theta"][0] == pytest.approx(0.8, abs=1e-15)
        assert len(series) == 1

    def test_constant_loss_leaves_params(self):
        class ConstantBackbone(ScalarToyBackbone):
            def per_sample_loss(self, pt, feats, noise=None):
                # constant w.r.t. theta: zero gradient
                return Tensor(np.ones(feats.shape[0]))

        cfg = TrainConfig(alpha=0.1, beta=0.2, inner_steps=3, disable_ml=True, epochs=1, seed=0)
        trainer = CoMetTrainer(ConstantBackbone(), cfg)
        params = ParamSet({"theta": np.array([2.5])})
        feats = np.zeros((4, 1))
        adapted, series = trainer.inner_adapt(
            params, np.arange(4), np.arange(4), feats, np.ones(4), lam=0.0,
            rng=np.random.default_rng(0),
        )
        assert np.array_equal(adapted["theta"], params["theta"])
        assert len(series) == 3

    def test_series_length_equals_inner_steps(self):
        features = default_dataset()
        cfg = TrainConfig(alpha=1e-4, beta=2e-4, inner_steps=5, epochs=1, seed=1)
        trainer = CoMetTrainer(flow_backbone(), cfg)
        params = trainer.backbone.init_params(0)
        prepared = trainer.backbone.prepare(features)
        task = np.arange(15)
        rest = np.arange(15, features.shape[0])
        _, series = trainer.inner_adapt(
            params, task, rest, prepared, np.ones(features.shape[0]), lam=1e-4,
            rng=np.random.default_rng(0),
        )
        assert len(series) == 5


class TestMetaObjective:
    def test_hand_built_two_sample_case(self):
        # Identity flow on d=2: per-sample loss ||x||^2 / 2, score adds log(2pi).
        features = np.array([[1.0, 0.0], [0.0, 2.0]])
        backbone = flow_backbone(dim=2)
        cfg = TrainConfig(alpha=1e-4, beta=2e-4, inner_steps=2, epochs=1, seed=0,
                          kappa=1.5, lambda0=0.01, gamma=1.0)
        trainer = CoMetTrainer(backbone, cfg)
        params = backbone.flow.init_params(0)  # exact identity, ||theta||^2 counts w0 only

        from comet.scl import LossPairSeries
        series = LossPairSeries(np.array([1.0, 2.0, 3.0]), np.array([3.0, 1.0, 2.0]))  # det 0.75

        value = trainer.meta_objective(
            params, features, series, rng=np.random.default_rng(0)
        )
        # spreadsheet recomputation
        losses = 0.5 * np.array([1.0, 4.0])
        scores = np.log(2 * np.pi) + losses
        weights = confidence_weights(scores, 1.5).weights
        lam = 0.01 * (1.0 + 1.0 * 0.75)
        expected = float(weights @ losses) + lam * params.sq_norm()
        assert value == pytest.approx(expected, rel=1e-12)

    def test_disable_scl_data_reduces_to_unweighted(self):
        features = default_dataset()
        backbone = flow_backbone()
        cfg = TrainConfig(disable_scl_data=True, inner_steps=2, epochs=1, seed=0,
                          lambda0=0.01, gamma=1.0)
        trainer = CoMetTrainer(backbone, cfg)
        params = backbone.init_params(1)
        from comet.scl import LossPairSeries
        series = LossPairSeries(np.array([1.0, 2.0]), np.array([1.0, 2.0]))  # det 0

        value = trainer.meta_objective(params, features, series, rng=np.random.default_rng(0))
        pt = {k: Tensor(v) for k, v in params.entries.items()}
        plain = float(backbone.per_sample_loss(pt, backbone.prepare(features)).data.sum())
        assert value == pytest.approx(plain + 0.01 * params.sq_norm(), rel=1e-12)

    def test_disable_scl_model_pins_lambda(self):
        features = default_dataset()
        backbone = flow_backbone()
        cfg = TrainConfig(disable_scl_model=True, inner_steps=2, epochs=1, seed=0,
                          lambda0=0.05, gamma=3.0)
        trainer = CoMetTrainer(backbone, cfg)
        from comet.scl import LossPairSeries
        series = LossPairSeries(np.array([1.0, 5.0, 2.0]), np.array([4.0, 1.0, 9.0]))
        _, lam, _ = trainer._meta_weights_and_lambda(
            backbone.init_params(0), features, series, epoch=0
        )
        assert lam == 0.05


class TestTrain:
    def test_zero_epochs_returns_initial_params(self):
        features = default_dataset()
        cfg = TrainConfig(epochs=0, seed=5)
        trainer = CoMetTrainer(flow_backbone(), cfg)
        params, records = trainer.train(features)
        assert records == []
        reference = trainer.backbone.init_params(
            int(np.random.SeedSequence(5).spawn(3)[0].generate_state(1)[0])
        )
        for name in params.names():
            assert np.array_equal(params[name], reference[name])

    def test_fixed_seed_bitwise_identical(self):
        features = default_dataset(contamination=0.1)
        cfg = TrainConfig(epochs=3, seed=7)
        p1, r1 = CoMetTrainer(flow_backbone(), cfg).train(features)
        p2, r2 = CoMetTrainer(flow_backbone(), cfg).train(features)
        for name in p1.names():
            assert np.array_equal(p1[name], p2[name])
        assert r1 == r2

    def test_sn_backbone_fixed_seed_bitwise_identical(self):
        features = default_dataset(contamination=0.1)
        cfg = TrainConfig(epochs=3, seed=7, backbone="sn")
        backbone = lambda: SimpleNetBackbone(SimpleNetModel(4, hidden_dim=8, noise_std=0.5))
        p1, r1 = CoMetTrainer(backbone(), cfg).train(features)
        p2, r2 = CoMetTrainer(backbone(), cfg).train(features)
        for name in p1.names():
            assert np.array_equal(p1[name], p2[name])
        assert r1 == r2

    def test_reduction_identity_baseline_matches_plain_loop(self):
        # All ablation flags: the driver must equal an independently coded
        # descent loop on sum(loss) + lambda0 * ||theta||^2 at rate beta.
        features = default_dataset()
        backbone = flow_backbone()
        cfg = TrainConfig(
            epochs=5, inner_steps=2, seed=11, lambda0=1e-3, beta=2e-4, alpha=1e-4,
            disable_ml=True, disable_scl_data=True, disable_scl_model=True,
        )
        trainer = CoMetTrainer(backbone, cfg)
        driver_params, _ = trainer.train(features)

        # independent loop: 10 plain steps
        init_seed = int(np.random.SeedSequence(11).spawn(3)[0].generate_state(1)[0])
        params = backbone.init_params(init_seed)
        prepared = backbone.prepare(features)

        def loss_fn(pt, _):
            total = backbone.per_sample_loss(pt, prepared).sum()
            reg = None
            for tensor in pt.values():
                term = (tensor * tensor).sum()
                reg = term if reg is None else reg + term
            return total + reg * 1e-3

        for _ in range(10):
            _, grad = value_and_gradient(loss_fn, params)
            params = ParamSet(
                {k: v - 2e-4 * grad[k] for k, v in params.entries.items()}
            )
        for name in params.names():
            np.testing.assert_allclose(driver_params[name], params[name], atol=1e-12, rtol=0)

    def test_epoch_records_structure(self):
        features = default_dataset(contamination=0.1)
        cfg = TrainConfig(epochs=2, seed=3)
        _, records = CoMetTrainer(flow_backbone(), cfg).train(features)
        assert len(records) == 2
        for i, record in enumerate(records):
            assert isinstance(record, EpochRecord)
            assert record.epoch == i
            assert record.det_sigma >= 0.0
            assert record.lam >= cfg.lambda0
            assert 0.0 <= record.weight_frac_below_1 <= 1.0

    def test_divergence_aborts_with_diagnostics(self):
        features = default_dataset()
        cfg = TrainConfig(epochs=50, seed=0, alpha=0.05, beta=0.1)
        with pytest.raises(DivergenceError) as excinfo:
            CoMetTrainer(flow_backbone(), cfg).train(features)
        assert excinfo.value.epoch >= 0

    def test_repartition_toggle_changes_trajectory(self):
        features = default_dataset(contamination=0.1, n_train=80)
        fixed = TrainConfig(epochs=4, seed=2, repartition_each_epoch=False)
        fresh = TrainConfig(epochs=4, seed=2, repartition_each_epoch=True)
        p_fixed, _ = CoMetTrainer(flow_backbone(), fixed).train(features)
        p_fresh, _ = CoMetTrainer(flow_backbone(), fresh).train(features)
        assert any(
            not np.array_equal(p_fixed[name], p_fresh[name]) for name in p_fixed.names()
        )

    def test_epoch_mean_outer_update_runs(self):
        features = default_dataset()
        cfg = TrainConfig(epochs=2, seed=4, outer_update="epoch_mean")
        params, records = CoMetTrainer(flow_backbone(), cfg).train(features)
        assert len(records) == 2

    def test_weight_history_collection(self):
        features = default_dataset(contamination=0.1)
        cfg = TrainConfig(epochs=2, seed=3)
        trainer = CoMetTrainer(flow_backbone(), cfg, collect_weights=True)
        trainer.train(features)
        assert len(trainer.weight_history) == 2
        assert trainer.weight_history[0].shape == (features.shape[0],)

    def test_batch_size_caps_inner_batches(self):
        features = default_dataset(n_train=64)
        cfg_full = TrainConfig(epochs=2, seed=6)
        cfg_capped = TrainConfig(epochs=2, seed=6, batch_size=4)
        p_full, _ = CoMetTrainer(flow_backbone(), cfg_full).train(features)
        p_capped, _ = CoMetTrainer(flow_backbone(), cfg_capped).train(features)
        assert any(
            not np.array_equal(p_full[name], p_capped[name]) for name in p_full.names()
        )
