import json
from contextlib import nullcontext

import numpy as np
import pytest

from prosmin import numeric as nm
from prosmin.augment import AugmentConfig
from prosmin.checkpoint import load_checkpoint
from prosmin.data import DatasetSpec
from prosmin.model import ModelConfig, NetworkPair
from prosmin.numeric import ContractError, NumericError
from prosmin.optim import AdamW, OptimizerState, clip_by_global_norm, cosine_schedule
from prosmin.scoring import ConfigError, Family, ScoreConfig
from prosmin.train import (
    StepInputs,
    TrainConfig,
    init_state,
    loss_from_inputs,
    loss_step,
    train,
    train_step,
)
from prosmin.verify import check_end_to_end_gradients, tiny_problem

SMALL = ModelConfig(input_dim=2, embed_dim=4, encoder_widths=(8, 8), projector_hidden=(8,),
                    predictor_hidden=8)
FOUR_ITEMS = DatasetSpec(n_clusters=2, per_cluster=2, train_fraction=1.0, test_fraction=0.0)


class TestCosineSchedule:
    def test_warmup_endpoint(self):
        assert cosine_schedule(10, 100, 10, 0.5, 0.01) == 0.5

    def test_final(self):
        assert cosine_schedule(100, 100, 10, 0.5, 0.01) == 0.01

    def test_midpoint(self):
        assert cosine_schedule(55, 100, 10, 0.5, 0.01) == pytest.approx(0.255, abs=1e-15)

    def test_ramp(self):
        assert cosine_schedule(0, 100, 10, 0.5, 0.0) == 0.0
        assert cosine_schedule(5, 100, 10, 0.5, 0.0) == 0.25

    def test_past_end(self):
        with pytest.raises(ContractError):
            cosine_schedule(101, 100, 10, 0.5, 0.0)

    def test_no_warmup(self):
        assert cosine_schedule(0, 10, 0, 0.04, 0.4) == pytest.approx(0.04, abs=1e-15)


class TestAdamW:
    def test_zero_gradient_no_decay(self):
        p = {"w": np.array([1.0, -2.0])}
        out = AdamW().step(p, {"w": np.zeros(2)}, OptimizerState(), lr=0.1, wd=0.0)
        np.testing.assert_array_equal(out["w"], p["w"])

    @pytest.mark.parametrize("g", [0.3, -5.0, 1e3])
    def test_first_step_is_sign(self, g):
        lr = 0.01
        out = AdamW().step({"w": np.zeros(1)}, {"w": np.array([g])}, OptimizerState(), lr, 0.0)
        assert out["w"][0] == pytest.approx(-lr * np.sign(g), rel=1e-6)

    def test_decoupled_decay(self):
        out = AdamW().step({"w": np.array([2.0])}, {"w": np.zeros(1)}, OptimizerState(), 0.1, 0.5)
        assert out["w"][0] == 2.0 * (1 - 0.1 * 0.5)

    def test_no_decay_set(self):
        p = {"a": np.ones(1), "b": np.ones(1)}
        g = {"a": np.zeros(1), "b": np.zeros(1)}
        out = AdamW().step(p, g, OptimizerState(), 0.1, 0.5, no_decay={"b"})
        assert out["a"][0] < 1.0 and out["b"][0] == 1.0

    def test_non_finite_gradient(self):
        with pytest.raises(NumericError):
            AdamW().step({"w": np.ones(1)}, {"w": np.array([np.nan])}, OptimizerState(), 0.1, 0.0)

    def test_state_advances(self):
        st = OptimizerState()
        AdamW().step({"w": np.ones(2)}, {"w": np.ones(2)}, st, 0.1, 0.0)
        assert st.step == 1 and st.m["w"].shape == (2,)

    def test_clip(self):
        g, norm = clip_by_global_norm({"a": np.array([3.0]), "b": np.array([4.0])}, 1.0)
        assert norm == 5.0
        np.testing.assert_allclose([g["a"][0], g["b"][0]], [0.6, 0.8])


class TestTrainConfig:
    def test_lr_rule(self):
        assert TrainConfig(batch_size=64).lr == 0.0005 * 64 / 256

    def test_pooled_r(self):
        cfg = TrainConfig(samples_per_view=2, augment=AugmentConfig(n_local=3))
        assert cfg.pooled_r == 10
        assert cfg.resolved().score.r == 10

    def test_needs_a_sample_per_view(self):
        with pytest.raises(ConfigError):
            TrainConfig(samples_per_view=0)

    def test_warmup_longer_than_run(self):
        with pytest.raises(ConfigError):
            TrainConfig(steps=10, warmup_steps=11)


def _witness_pair(sigma_pre: float) -> NetworkPair:
    """K = D = 1 identity networks with a constant variance pre-activation."""
    cfg = ModelConfig(input_dim=1, embed_dim=1, encoder_widths=(1,), projector_hidden=(),
                      use_predictor=False)
    one, zero = np.ones((1, 1)), np.zeros(1)
    shared = {"encoder.0.w": one, "encoder.0.b": zero, "projector.0.w": one, "projector.0.b": zero}
    theta = dict(shared, **{"head.mean.w": one, "head.mean.b": zero,
                            "head.var.w": np.zeros((1, 1)), "head.var.b": np.array([sigma_pre])})
    return NetworkPair(cfg, theta, {k: v.copy() for k, v in shared.items()}, np.zeros(1))


class TestLossExamples:
    def test_zero_loss_witness(self):
        pair = _witness_pair(0.3)
        cfg = TrainConfig(batch_size=1, model=pair.config, augment=AugmentConfig.identity(),
                          score=ScoreConfig(lam=0.5, r=2))
        sigma = np.logaddexp(0.0, 0.3) + 1e-4
        # ε = ∓1/σ puts the two pooled samples at 0 and 2 around the target 1
        inputs = StepInputs(np.ones((1, 2, 1)), np.array([[[-1.0 / sigma]], [[1.0 / sigma]]]))
        res = loss_from_inputs(inputs, pair, cfg)
        assert res.loss.item() <= 1e-15
        assert res.sigma_mean > 0.5  # non-degenerate predictive distribution

    @pytest.mark.parametrize("lam", [0.1, 0.5, 0.9])
    def test_matched_networks(self, lam):
        d = 3
        cfg_m = ModelConfig(input_dim=d, embed_dim=d, encoder_widths=(d,), projector_hidden=(),
                            use_predictor=False)
        eye, zero = np.eye(d), np.zeros(d)
        shared = {"encoder.0.w": eye, "encoder.0.b": zero,
                  "projector.0.w": eye, "projector.0.b": zero}
        theta = dict(shared, **{"head.mean.w": eye, "head.mean.b": zero,
                                "head.var.w": np.zeros((d, d)), "head.var.b": np.full(d, -50.0)})
        pair = NetworkPair(cfg_m, theta, dict(shared), np.zeros(d))
        with pytest.warns(UserWarning) if lam > 0.5 else nullcontext():
            score = ScoreConfig(lam=lam)
        cfg = TrainConfig(batch_size=8, model=cfg_m, score=score,
                          augment=AugmentConfig.identity(n_local=2))
        batch = np.random.default_rng(0).normal(size=(8, d))
        loss = loss_step(batch, pair, cfg, np.random.default_rng(1))
        assert 0.0 <= loss.item() <= 1e-3

    def test_loss_nonnegative(self):
        rng = np.random.default_rng(0)
        for seed in range(20):
            pair = NetworkPair.create(SMALL, seed=seed)
            cfg = TrainConfig(batch_size=16, model=SMALL)
            assert loss_step(rng.normal(size=(16, 2)), pair, cfg, rng).item() >= 0.0


class TestGradients:
    @pytest.mark.parametrize("family", list(Family))
    def test_end_to_end_matches_fd(self, family):
        for row in check_end_to_end_gradients(seed=1, family=family):
            assert row.passed, row.line()

    def test_target_untouched_by_backward(self):
        cfg, pair, inputs = tiny_problem(2)
        before = {k: v.tobytes() for k, v in pair.xi.items()}
        leaves = {k: nm.tensor(v, requires_grad=True) for k, v in pair.theta.items()}
        with nm.GradientTape() as tape:
            loss = loss_from_inputs(inputs, pair, cfg, leaves).loss
        tape.backward(loss, list(leaves.values()))
        assert {k: v.tobytes() for k, v in pair.xi.items()} == before

    def test_no_gradient_reaches_target(self):
        cfg, pair, inputs = tiny_problem(3)
        pair.xi = {k: nm.tensor(v, requires_grad=True) for k, v in pair.xi.items()}
        leaves = {k: nm.tensor(v, requires_grad=True) for k, v in pair.theta.items()}
        with nm.GradientTape() as tape:
            loss = loss_from_inputs(inputs, pair, cfg, leaves).loss
        grads = tape.backward(loss)
        assert not any(t.id in grads for t in pair.xi.values())
        assert all(t.id in grads for t in leaves.values())


class TestTrainLoop:
    def test_single_step(self, tmp_path):
        cfg = TrainConfig(batch_size=4, steps=1, model=SMALL, dataset=FOUR_ITEMS)
        _, records = train(cfg, tmp_path)
        assert (tmp_path / "checkpoint.npz").exists()
        lines = (tmp_path / "metrics.jsonl").read_text().splitlines()
        assert len(lines) == 1 and len(records) == 1
        rec = json.loads(lines[0])
        assert {"step", "loss", "lr", "wd", "sigma_mean", "eff_rank"} <= set(rec)
        assert "wall_ms" in json.loads((tmp_path / "timing.jsonl").read_text())

    def test_same_seed_same_bytes(self, tmp_path):
        cfg = TrainConfig(batch_size=8, steps=15, model=SMALL)
        train(cfg, tmp_path / "a")
        train(cfg, tmp_path / "b")
        for name in ("checkpoint.npz", "metrics.jsonl"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()

    def test_other_seed_differs(self, tmp_path):
        train(TrainConfig(batch_size=8, steps=3, model=SMALL, seed=0), tmp_path / "a")
        train(TrainConfig(batch_size=8, steps=3, model=SMALL, seed=1), tmp_path / "b")
        assert (tmp_path / "a/checkpoint.npz").read_bytes() != (tmp_path / "b/checkpoint.npz").read_bytes()

    def test_resume_is_seamless(self, tmp_path):
        cfg = TrainConfig(batch_size=8, steps=12, model=SMALL)
        train(cfg, tmp_path / "full")
        train(cfg, tmp_path / "split", until=5)
        train(cfg, tmp_path / "split", resume=True)
        for name in ("checkpoint.npz", "metrics.jsonl"):
            assert (tmp_path / "full" / name).read_bytes() == (tmp_path / "split" / name).read_bytes()

    def test_resume_without_checkpoint(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            train(TrainConfig(steps=2, model=SMALL), tmp_path, resume=True)

    def test_loss_nonnegative_every_step(self):
        _, records = train(TrainConfig(batch_size=16, steps=40, model=SMALL))
        assert all(r["loss"] >= 0 for r in records)

    def test_xi_changes_only_through_ema(self):
        cfg = TrainConfig(batch_size=8, steps=2, model=SMALL).resolved()
        state = init_state(cfg)
        x = np.random.default_rng(0).normal(size=(32, 2))
        theta0 = {k: v.copy() for k, v in state.pair.theta.items()}
        xi0 = {k: v.copy() for k, v in state.pair.xi.items()}
        train_step(state, x, cfg)
        for k, v in state.pair.xi.items():
            np.testing.assert_allclose(v, 0.9 * state.pair.theta[k] + 0.1 * xi0[k], rtol=1e-12)
        assert any(not np.array_equal(theta0[k], state.pair.theta[k]) for k in theta0)

    def test_kernel_family_runs(self):
        score = ScoreConfig(Family.KERNEL)
        state, records = train(TrainConfig(batch_size=8, steps=3, model=SMALL, score=score))
        assert state.score.gamma > 0 and len(records) == 3

    def test_wrong_input_width(self):
        with pytest.raises(ConfigError):
            train(TrainConfig(steps=1, model=SMALL), x_train=np.ones((4, 3)))

    def test_checkpoint_restores_state(self, tmp_path):
        cfg = TrainConfig(batch_size=8, steps=4, model=SMALL)
        state, _ = train(cfg, tmp_path)
        ck = load_checkpoint(tmp_path / "checkpoint.npz")
        assert ck.state.step == 4
        for k in state.pair.theta:
            assert ck.pair.theta[k].tobytes() == state.pair.theta[k].tobytes()
        a, b = ck.state.rng.bit_generator.state, state.rng.bit_generator.state
        assert json.dumps(a, default=np.ndarray.tolist) == json.dumps(b, default=np.ndarray.tolist)
