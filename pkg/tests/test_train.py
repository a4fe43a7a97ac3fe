import math

import numpy as np
import pytest

from msdamil import model as M
from msdamil.data import Bag, CorpusConfig, generate_synthetic_corpus
from msdamil.tensor import Tensor
from msdamil.train import (Checkpoint, NumericError, OptimizerState, TrainConfig, TrainedModel,
                           lambda_schedule, param_digest, sgd_momentum_step, stage1_step, stage1_train,
                           select_alpha, stage2_train, train_method, visit_order, build_bags)

from oracles import micro_stage1_case


def tiny_config(**kw):
    base = dict(epochs=2, fc_dim=16, attn_hidden=8, domain_hidden=16, conv_widths=(4, 8), bag_size=5,
                max_bags=2, lr=1e-3, seed=3)
    base.update(kw)
    return TrainConfig(**base)


@pytest.fixture(scope="module")
def tiny_slides():
    cfg = CorpusConfig(n_slides=2, scales=2, patch_size=16, regions_per_slide=10, shift=0.1, seed=5)
    return generate_synthetic_corpus(cfg)


class TestLambda:
    def test_start(self):
        assert lambda_schedule(0, 10, 1.0) == 0.0

    def test_half(self):
        # r = m / M * alpha = ln(3) / 10
        assert lambda_schedule(math.log(3) / 10, 1, 1.0) == pytest.approx(0.5, abs=1e-12)

    def test_end(self):
        assert lambda_schedule(10, 10, 1.0) == pytest.approx(0.9999092, abs=1e-7)

    def test_monotone(self):
        values = [lambda_schedule(m, 10, 0.7) for m in range(11)]
        assert values == sorted(values) and all(0 <= v < 1 for v in values)

    @pytest.mark.parametrize("args", [(1, 0, 1.0), (1, 10, 0.0)])
    def test_rejects(self, args):
        with pytest.raises(ValueError):
            lambda_schedule(*args)


class TestMomentum:
    def param(self, value=0.0):
        return {"p": Tensor(np.array([value]), requires_grad=True)}

    def test_plain_descent(self):
        p = self.param(1.0)
        sgd_momentum_step(p, {"p": np.array([2.0])}, OptimizerState(), 0.1, 0.0)
        assert p["p"].data[0] == pytest.approx(0.8)

    def test_zero_gradient(self):
        p, st = self.param(1.5), OptimizerState()
        for _ in range(5):
            sgd_momentum_step(p, {"p": np.zeros(1)}, st, 0.1, 0.9)
        assert p["p"].data[0] == 1.5

    def test_two_steps(self):
        p, st = self.param(0.0), OptimizerState()
        for _ in range(2):
            sgd_momentum_step(p, {"p": np.ones(1)}, st, 0.1, 0.9)
        assert p["p"].data[0] == pytest.approx(-0.29, abs=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            sgd_momentum_step(self.param(), {"p": np.zeros(2)}, OptimizerState(), 0.1, 0.9)


def _micro(seed, n):
    rng = np.random.default_rng(seed)
    f = M.init_extractor(rng, widths=(2, 8), patch_size=12, dtype=np.float64)
    y = M.init_bag_predictor(rng, 8, fc_dim=6, attn_hidden=4, dtype=np.float64)
    d = M.init_domain_predictor(rng, 8, 2, hidden=5, dtype=np.float64)
    bag = Bag("s/bag000", "s", 1, np.arange(n), np.zeros((n, 2), int), np.zeros(n, bool),
              {1: rng.integers(0, 256, (n, 3, 12, 12), dtype=np.uint8)})
    return bag, f, y, d


def _step(bag, f, y, d, lam):
    return stage1_step(bag, 1, np.array([0.0, 1.0]), None if d is None else np.array([1.0, 0.0]),
                       f, y, d, lam, OptimizerState(), 0.05, 0.9)


class TestStage1Step:
    @pytest.mark.parametrize("seed", range(3))
    def test_matches_finite_difference_oracle(self, seed):
        assert micro_stage1_case(seed) < 1e-6

    def test_oracle_with_larger_bag(self):
        assert micro_stage1_case(7, n_instances=4, lam=0.9) < 1e-6

    def test_lambda_zero(self):
        bag, f, y, d = _micro(1, 3)
        f2, y2 = f.copy(), y.copy()
        d_before = {k: t.data.copy() for k, t in d.tensors().items()}
        _step(bag, f, y, d, 0.0)
        _step(bag, f2, y2, None, 0.0)
        assert all(np.array_equal(t.data, d_before[k]) for k, t in d.tensors().items())
        assert param_digest(f) == param_digest(f2) and param_digest(y) == param_digest(y2)

    @pytest.mark.parametrize("lam", [0.3, 0.99])
    def test_singleton_bag_ignores_domain_term_for_extractor(self, lam):
        bag, f, y, d = _micro(2, 1)
        f2, y2 = f.copy(), y.copy()
        losses = _step(bag, f, y, d, lam)
        _step(bag, f2, y2, None, 0.0)
        assert losses.domain_weighted == 0.0
        assert param_digest(f) == param_digest(f2)

    def test_losses_reported(self):
        bag, f, y, d = _micro(3, 3)
        losses = _step(bag, f, y, d, 0.5)
        assert losses.bag > 0 and losses.domain > 0 and 0 <= losses.domain_weighted < losses.domain

    def test_nan_names_bag(self):
        bag, f, y, d = _micro(4, 2)
        f.weights[0].data[:] = np.nan
        with pytest.raises(NumericError, match="s/bag000"):
            _step(bag, f, y, d, 0.5)

    def test_empty_bag(self):
        bag, f, y, d = _micro(5, 2)
        with pytest.raises(ValueError):
            _step(bag.permuted(np.array([], dtype=int)), f, y, d, 0.5)


class TestStage1Train:
    def test_zero_epochs_returns_initialisation(self, tiny_slides):
        a = stage1_train(tiny_slides, tiny_config(epochs=0), 1)
        b = stage1_train(tiny_slides, tiny_config(epochs=0), 1)
        assert a.history == [] and param_digest(a.theta_f) == param_digest(b.theta_f)

    def test_deterministic(self, tiny_slides):
        a = stage1_train(tiny_slides, tiny_config(), 1)
        b = stage1_train(tiny_slides, tiny_config(), 1)
        for x, y in [(a.theta_f, b.theta_f), (a.theta_y, b.theta_y), (a.theta_d, b.theta_d)]:
            assert param_digest(x) == param_digest(y)
        assert [r.bag_loss for r in a.history] == [r.bag_loss for r in b.history]

    def test_lambda_zero_equals_mil_baseline(self, tiny_slides):
        da = stage1_train(tiny_slides, tiny_config(), 1, lambda_fn=lambda m, M_, a: 0.0)
        mil = stage1_train(tiny_slides, tiny_config(), 1, domain_adversarial=False)
        assert param_digest(da.theta_f) == param_digest(mil.theta_f)
        assert param_digest(da.theta_y) == param_digest(mil.theta_y)

    def test_history_and_schedule(self, tiny_slides):
        r = stage1_train(tiny_slides, tiny_config(epochs=3), 2)
        assert [h.epoch for h in r.history] == [1, 2, 3]
        assert [h.lam for h in r.history] == [lambda_schedule(m, 3, 1.0) for m in (1, 2, 3)]

    def test_epoch_callback(self, tiny_slides):
        seen = []
        stage1_train(tiny_slides, tiny_config(), 1, on_epoch=lambda m, r: seen.append((m, len(r.history))))
        assert seen == [(1, 1), (2, 2)]

    def test_visit_order_interleaves_slides(self, tiny_slides):
        bags = build_bags(tiny_slides, tiny_config(max_bags=2))
        order = visit_order(bags, 0, 1, 1)
        assert sorted(b.bag_id for b in order) == sorted(b.bag_id for bl in bags.values() for b in bl)
        assert [b.bag_id for b in visit_order(bags, 0, 1, 1)] == [b.bag_id for b in order]
        assert [b.bag_id for b in visit_order(bags, 0, 1, 2)] != [b.bag_id for b in order] or len(order) < 3

    def test_loss_decreases_on_clean_corpus(self):
        slides = generate_synthetic_corpus(CorpusConfig(n_slides=6, scales=1, patch_size=16,
                                                        regions_per_slide=30, signal_strength=2.0, seed=1))
        for seed in range(5):
            r = stage1_train(slides, tiny_config(epochs=6, seed=seed, bag_size=10, max_bags=3, lr=1e-3),
                             1, domain_adversarial=False)
            assert r.history[-1].bag_loss < r.history[0].bag_loss


class TestStage2:
    def test_extractors_frozen(self, tiny_slides):
        cfg = tiny_config()
        ext = {s: stage1_train(tiny_slides, cfg, s).theta_f for s in (1, 2)}
        before = {s: param_digest(f) for s, f in ext.items()}
        r = stage2_train(tiny_slides, ext, cfg)
        assert {s: param_digest(f) for s, f in ext.items()} == before
        assert len(r.history) == cfg.epochs

    def test_missing_scale_named(self, tiny_slides):
        ext = {1: stage1_train(tiny_slides, tiny_config(epochs=0), 1).theta_f}
        with pytest.raises(KeyError, match="scale 2"):
            stage2_train(tiny_slides, ext, tiny_config(), scales=[1, 2])

    def test_deterministic(self, tiny_slides):
        cfg = tiny_config()
        ext = {s: stage1_train(tiny_slides, cfg, s).theta_f for s in (1, 2)}
        a, b = stage2_train(tiny_slides, ext, cfg), stage2_train(tiny_slides, ext, cfg)
        assert param_digest(a.theta_y_all) == param_digest(b.theta_y_all)


class TestCheckpoint:
    def test_roundtrip(self, tiny_slides):
        model = train_method("msdamil", tiny_slides, tiny_config(epochs=1), [1, 2])
        raw = model.to_checkpoint().to_bytes()
        back = TrainedModel.from_checkpoint(Checkpoint.from_bytes(raw))
        assert back.mode == "msdamil" and back.scales == [1, 2]
        assert back.to_checkpoint().to_bytes() == raw
        for s in (1, 2):
            assert param_digest(back.extractors[s]) == param_digest(model.extractors[s])
            assert back.extractors[s].input_center == model.extractors[s].input_center

    def test_header(self):
        ck = Checkpoint(scales=[1], tensors={"a/x": np.ones((2, 3), np.float32)}, meta={"mode": "mil"})
        raw = ck.to_bytes()
        assert raw.startswith(b"MSDAMIL\0")
        back = Checkpoint.from_bytes(raw)
        assert back.scales == [1] and back.meta["mode"] == "mil"
        np.testing.assert_array_equal(back.tensors["a/x"], np.ones((2, 3)))

    def test_bad_magic(self):
        with pytest.raises(ValueError, match="magic"):
            Checkpoint.from_bytes(b"garbage" * 4)

    def test_patch_model_roundtrip(self, tiny_slides):
        model = train_method("patch", tiny_slides, tiny_config(epochs=1), [1])
        back = TrainedModel.from_checkpoint(Checkpoint.from_bytes(model.to_checkpoint().to_bytes()))
        assert set(back.patch_heads) == {1}


def test_config_validation():
    for bad in (dict(lr=0), dict(momentum=1.0), dict(epochs=-1), dict(alpha=0)):
        with pytest.raises(ValueError):
            TrainConfig(**bad).validate()


def test_unknown_mode(tiny_slides):
    with pytest.raises(ValueError, match="unknown mode"):
        train_method("bogus", tiny_slides, tiny_config(), [1])


def test_stage2_loss_decreases():
    slides = generate_synthetic_corpus(CorpusConfig(n_slides=6, scales=2, patch_size=16, regions_per_slide=30,
                                                    signal_strength=2.0, seed=2))
    cfg = tiny_config(epochs=6, bag_size=10, max_bags=3)
    ext = {s: stage1_train(slides, cfg, s, domain_adversarial=False).theta_f for s in (1, 2)}
    r = stage2_train(slides, ext, cfg)
    assert r.history[-1].bag_loss < r.history[0].bag_loss


def test_select_alpha_keeps_best_run(tiny_slides):
    cfg = tiny_config(epochs=2)
    best, scores, r = select_alpha(tiny_slides, tiny_slides, cfg, 1, grid=(0.5, 2.0))
    assert set(scores) == {0.5, 2.0} and best in scores
    assert scores[best] == max(scores.values())
    if scores[0.5] == scores[2.0]:
        assert best == 0.5
    again = stage1_train(tiny_slides, tiny_config(epochs=2, alpha=best), 1)
    assert param_digest(again.theta_f) == param_digest(r.theta_f)
    assert [h.lam for h in r.history] == [lambda_schedule(m, 2, best) for m in (1, 2)]
