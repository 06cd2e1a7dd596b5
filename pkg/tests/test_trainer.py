"""Training-step contracts: weight sharing, exact zero gradients, optimizer
oracles, determinism, logging and best-checkpoint selection."""

import numpy as np
import pytest

from salient import model, training
from salient.autodiff import Tape
from salient.corpus import CloneBatch
from salient.errors import InvalidRange
from salient.losses import LossWeights
from salient.seeding import named_stream


def synthetic_batch(cfg, m=2, q=3, t=6, seed=0) -> CloneBatch:
    rng = named_stream(seed, "batch")
    inputs = rng.standard_normal((m, q, t, cfg.input_dim))
    targets = rng.standard_normal((m, t, cfg.input_dim))
    return CloneBatch(clone_inputs=inputs, clean_targets=targets, meta=(("x", 0),) * m)


def identical_clone_batch(cfg, m=2, q=4, t=6, seed=1) -> CloneBatch:
    rng = named_stream(seed, "batch")
    clean = rng.standard_normal((m, t, cfg.input_dim))
    inputs = np.repeat(clean[:, None], q, axis=1)
    return CloneBatch(clone_inputs=inputs, clean_targets=clean, meta=(("x", 0),) * m)


class TestTrainStep:
    def test_identical_inputs_zero_equivalence(self, tiny_model_config):
        params = model.init_params(tiny_model_config, seed=1)
        batch = identical_clone_batch(tiny_model_config)
        cfg = training.TrainConfig(steps=1, batch_size=2, clones=4, seed=1)
        _, breakdown = training.train_step(params, batch, cfg)
        assert abs(breakdown.d_e) < 1e-10

    def test_zero_weights_identical_inputs_params_unchanged(self, tiny_model_config):
        # with both extra terms off and all clones equal, the equivalence
        # gradient is exactly zero, so SGD must leave every weight untouched
        params = model.init_params(tiny_model_config, seed=2)
        before = {k: v.copy() for k, v in params.tensors.items()}
        batch = identical_clone_batch(tiny_model_config)
        cfg = training.TrainConfig(
            steps=1, batch_size=2, clones=4, optimizer="sgd", learning_rate=0.5,
            weights=LossWeights(lambda_mmd=0.0, lambda_d=0.0), seed=2,
        )
        _, breakdown = training.train_step(params, batch, cfg)
        assert breakdown.d_e == 0.0
        assert all(np.array_equal(params.tensors[k], before[k]) for k in before)

    def test_params_updated_in_place_single_materialization(self, tiny_model_config):
        params = model.init_params(tiny_model_config, seed=3)
        arrays_before = {k: id(v) for k, v in params.tensors.items()}
        batch = synthetic_batch(tiny_model_config)
        cfg = training.TrainConfig(steps=1, batch_size=2, clones=3, seed=3)
        out, _ = training.train_step(params, batch, cfg)
        assert out is params
        assert {k: id(v) for k, v in params.tensors.items()} == arrays_before

    def test_step_graph_leaves_share_param_memory(self, tiny_model_config):
        params = model.init_params(tiny_model_config, seed=4)
        batch = synthetic_batch(tiny_model_config)
        tape = Tape(np.float32)
        prior = np.zeros((12, tiny_model_config.feature_dim))
        leaves, _ = training.build_step_graph(tape, params, batch, prior, LossWeights())
        assert set(leaves) == set(params.tensors)
        assert all(leaves[k].data is params.tensors[k] for k in leaves)

    def test_accounting_identity(self, tiny_model_config):
        params = model.init_params(tiny_model_config, seed=5)
        batch = synthetic_batch(tiny_model_config, seed=5)
        w = LossWeights()
        cfg = training.TrainConfig(steps=1, batch_size=2, clones=3, seed=5, weights=w)
        _, bd = training.train_step(params, batch, cfg)
        assert bd.d_global == bd.d_e + w.lambda_mmd * bd.d_mmd + w.lambda_d * bd.d_d

    def test_config_validation(self):
        with pytest.raises(InvalidRange):
            training.TrainConfig(steps=0)
        with pytest.raises(InvalidRange):
            training.TrainConfig(steps=1, batch_size=1)
        with pytest.raises(InvalidRange):
            training.TrainConfig(steps=1, clones=1)
        with pytest.raises(InvalidRange):
            training.TrainConfig(steps=1, optimizer="adagrad")


class TestOptimizers:
    def test_adam_matches_hand_formula(self):
        # one step on f(p) = p^2 from p = 3: g = 6
        p = {"w": np.array([3.0], dtype=np.float64)}
        opt = training.Adam(p, lr=0.1, beta1=0.9, beta2=0.999, eps=1e-8)
        opt.step(p, {"w": np.array([6.0], dtype=np.float64)})
        m = 0.1 * 6.0
        v = 0.001 * 36.0
        m_hat = m / (1 - 0.9)
        v_hat = v / (1 - 0.999)
        expected = 3.0 - 0.1 * m_hat / (np.sqrt(v_hat) + 1e-8)
        assert abs(float(p["w"][0]) - expected) <= 1e-12

    def test_adam_two_steps_hand_formula(self):
        p = {"w": np.array([1.0], dtype=np.float64)}
        opt = training.Adam(p, lr=0.5, beta1=0.9, beta2=0.999, eps=1e-8)
        m = v = 0.0
        w = 1.0
        for t, g in enumerate([2.0, -1.0], start=1):
            opt.step(p, {"w": np.array([g], dtype=np.float64)})
            m = 0.9 * m + 0.1 * g
            v = 0.999 * v + 0.001 * g * g
            w -= 0.5 * (m / (1 - 0.9**t)) / (np.sqrt(v / (1 - 0.999**t)) + 1e-8)
        assert abs(float(p["w"][0]) - w) <= 1e-12

    def test_sgd(self):
        p = {"w": np.array([1.0, 2.0])}
        training.Sgd(p, lr=0.25).step(p, {"w": np.array([4.0, -4.0])})
        assert np.array_equal(p["w"], np.array([0.0, 3.0]))

    def test_zero_gradient_is_fixed_point(self):
        p = {"w": np.array([1.5])}
        opt = training.Adam(p, lr=0.1)
        opt.step(p, {"w": np.zeros(1)})
        assert float(p["w"][0]) == 1.5


class TestTrainLoop:
    @pytest.fixture()
    def quick_cfg(self, tmp_path):
        def make(**kw):
            base = dict(steps=6, batch_size=2, clones=2, eval_every=3, seed=9,
                        checkpoint_dir=tmp_path / "ckpt")
            base.update(kw)
            return training.TrainConfig(**base)
        return make

    def test_log_rows_equal_steps_and_monotone(self, tiny_corpus, quick_cfg):
        cfg = model.EncoderConfig(lstm_layers=1, fc_layers=1, hidden=8, feature_dim=3, input_dim=240)
        result = training.train(tiny_corpus, cfg, quick_cfg())
        assert len(result.records) == 6
        assert [r.step for r in result.records] == list(range(1, 7))
        text = result.log_path.read_text().splitlines()
        assert text[0] == "step,d_e,d_mmd,d_d,d_global,wall_ms"
        assert len(text) == 7

    def test_accounting_identity_in_log(self, tiny_corpus, quick_cfg):
        cfg = model.EncoderConfig(lstm_layers=1, fc_layers=1, hidden=8, feature_dim=3, input_dim=240)
        w = LossWeights()
        result = training.train(tiny_corpus, cfg, quick_cfg(weights=w))
        for r in result.records:
            assert r.d_global == r.d_e + w.lambda_mmd * r.d_mmd + w.lambda_d * r.d_d

    def test_single_step_returns_post_step_snapshot(self, tiny_corpus, tmp_path):
        cfg = model.EncoderConfig(lstm_layers=1, fc_layers=1, hidden=8, feature_dim=3, input_dim=240)
        tc = training.TrainConfig(steps=1, batch_size=2, clones=2, eval_every=50, seed=10,
                                  checkpoint_dir=tmp_path / "one")
        result = training.train(tiny_corpus, cfg, tc)
        assert result.best_step == 1
        final = model.load_checkpoint(result.final_path)
        best = model.load_checkpoint(result.best_path)
        assert all(np.array_equal(final.tensors[k], best.tensors[k]) for k in final.tensors)
        init = model.load_checkpoint(result.init_path)
        assert any(not np.array_equal(init.tensors[k], best.tensors[k]) for k in init.tensors)

    def test_identical_seed_identical_traces_and_checkpoints(self, tiny_corpus, tmp_path):
        cfg = model.EncoderConfig(lstm_layers=1, fc_layers=1, hidden=8, feature_dim=3, input_dim=240)

        def run(d):
            tc = training.TrainConfig(steps=5, batch_size=2, clones=3, eval_every=5, seed=11,
                                      checkpoint_dir=tmp_path / d)
            return training.train(tiny_corpus, cfg, tc)

        a, b = run("a"), run("b")
        for ra, rb in zip(a.records, b.records):
            assert (ra.d_e, ra.d_mmd, ra.d_d, ra.d_global) == (rb.d_e, rb.d_mmd, rb.d_d, rb.d_global)
        assert a.best_path.read_bytes() == b.best_path.read_bytes()
        assert a.final_path.read_bytes() == b.final_path.read_bytes()

    def test_norm_stats_stored(self, tiny_corpus, quick_cfg):
        cfg = model.EncoderConfig(lstm_layers=1, fc_layers=1, hidden=8, feature_dim=3, input_dim=240)
        result = training.train(tiny_corpus, cfg, quick_cfg())
        loaded = model.load_checkpoint(result.best_path)
        assert np.all(loaded.std > 0)
        assert not np.allclose(loaded.mean, 0.0)  # real data stats, not defaults

    def test_smoothed_best_selection(self):
        records = [
            training.TrainLogRecord(step=s, d_e=0.0, d_mmd=0.0, d_d=0.0, d_global=g, wall_ms=1.0)
            for s, g in enumerate([10.0, 9.0, 2.0, 1.0, 8.0, 9.0], start=1)
        ]
        window = records[-3:]
        assert float(np.mean([r.d_global for r in window])) == 6.0
