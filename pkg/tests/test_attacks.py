"""CFR attack, loss J, FGSM/PGD baselines and batch execution."""

from dataclasses import replace

import numpy as np
import pytest

from cfrpatch import attacks, cfr, metrics, models
from cfrpatch import tensor as T
from cfrpatch.attacks import AttackConfig, BaselineConfig
from cfrpatch.data import LabeledImage
from cfrpatch.tensor import Tensor


@pytest.fixture
def flat_model():
    """cnn-s whose output layer is zeroed: logits are exactly (0, 0)."""
    m = models.build(models.zoo_spec("cnn-s"), 0)
    for k in ("fc1.weight", "fc1.bias"):
        m.params[k][:] = 0.0
    return m


@pytest.fixture(scope="module")
def few(batch):
    return batch.subset(range(12))


class TestLossJ:
    def test_even_odds_temperature(self, flat_model):
        x = np.full((3, 16, 16), 0.5)
        mask = np.full((1, 16, 16), 1 / 256)
        j, _, _ = attacks.loss_j(flat_model, x, 0, Tensor(np.zeros_like(x)), mask, 0.1, 0.0)
        assert j.item() == pytest.approx(np.log(2) / 0.1, abs=1e-12)
        assert j.item() == pytest.approx(6.93147, abs=1e-5)

    def test_unit_temperature_is_cross_entropy(self, cnn_s, batch):
        img = batch[0]
        d = np.random.default_rng(0).uniform(-0.01, 0.01, size=img.pixels.shape)
        mask = np.ones((1, 16, 16))
        j, _, _ = attacks.loss_j(cnn_s, img.pixels, img.label, Tensor(d), mask, 1.0, 0.0)
        logits = models.forward(cnn_s, Tensor(img.pixels + d))[1]
        assert j.item() == pytest.approx(T.cross_entropy(logits, img.label).item(), rel=1e-12)

    def test_regulariser_is_reciprocal_norm(self, flat_model):
        x = np.full((3, 16, 16), 0.5)
        mask = np.ones((1, 16, 16))
        d = np.zeros_like(x)
        d[0, 0, 0] = 2.0  # ||delta * mask|| = 2
        with_reg = attacks.loss_j(flat_model, x, 0, Tensor(d), mask, 1.0, 1.0)[0].item()
        without = attacks.loss_j(flat_model, x, 0, Tensor(d), mask, 1.0, 0.0)[0].item()
        assert with_reg - without == pytest.approx(0.5, abs=1e-12)

    def test_floor_clamps_and_flags(self, flat_model):
        x = np.full((3, 16, 16), 0.5)
        j, _, clamped = attacks.loss_j(flat_model, x, 0, Tensor(np.zeros_like(x)),
                                       np.ones((1, 16, 16)), 1.0, 1.0, norm_floor=1e-6)
        assert clamped and np.isfinite(j.item())
        assert j.item() == pytest.approx(np.log(2) + 1e6)


class TestCfrAttack:
    def test_zero_iterations_leaves_init_noise(self, cnn_s, few):
        cfg = AttackConfig(iterations=0)
        for img in few:
            r = attacks.cfr_attack(cnn_s, img, cfg)
            assert r.iterations_used == 0 and not r.success and r.loss_history == []
            assert np.abs(r.delta).max() <= 1e-3 + 1e-15

    def test_result_invariants(self, cnn_s, few):
        cfg = AttackConfig()
        for img in few:
            r = attacks.cfr_attack(cnn_s, img, cfg)
            support = cfr.locate(cnn_s, img.pixels, img.label, cfg.tau).mask.support
            assert np.all(r.delta[:, ~support] == 0)
            assert np.array_equal(r.adversarial, np.clip(img.pixels + r.delta, 0, 1))
            assert r.success == (models.predict(cnn_s, r.adversarial) != img.label)
            assert r.mask_stats["l0"] <= 3 * r.mask_stats["suprathreshold_count"]
            assert len(r.loss_history) == r.iterations_used == cfg.iterations

    def test_temperature_scaling_equivalence(self, cnn_s, few):
        img = few[1]
        a = attacks.cfr_attack(cnn_s, img, AttackConfig(iterations=3, beta=0.0, temperature=0.1, eta=1.0))
        b = attacks.cfr_attack(cnn_s, img, AttackConfig(iterations=3, beta=0.0, temperature=0.2, eta=2.0))
        np.testing.assert_allclose(a.delta, b.delta, rtol=1e-9, atol=1e-12)

    def test_early_stop(self, cnn_s, few):
        cfg = AttackConfig(early_stop=True)
        for img in few:
            r = attacks.cfr_attack(cnn_s, img, cfg)
            assert r.iterations_used <= cfg.iterations
            if r.iterations_used < cfg.iterations:
                assert r.success

    def test_config_validation(self):
        for bad in (dict(temperature=0.0), dict(beta=-1.0), dict(tau=1.5), dict(eta=-1.0)):
            with pytest.raises(ValueError):
                AttackConfig(**bad).validate()

    def test_default_step_size_by_resolution(self):
        assert AttackConfig().step_size(32) == 10.0
        assert AttackConfig().step_size(224) == 20.0
        assert AttackConfig(eta=3.0).step_size(224) == 3.0

    def test_non_finite_loss_raises(self, cnn_s, few):
        bad = cnn_s.copy()
        bad.params["fc1.bias"][:] = np.nan
        with pytest.raises(attacks.NumericError):
            attacks.cfr_attack(bad, few[0], AttackConfig(iterations=1))


class TestBaselines:
    def test_fgsm_zero_eps(self, cnn_s, few):
        r = attacks.fgsm(cnn_s, few[0], 0.0)
        assert np.array_equal(r.adversarial, few[0].pixels) and not r.success

    def test_fgsm_bound(self, cnn_s, few):
        for img in few:
            assert np.abs(attacks.fgsm(cnn_s, img, 4 / 255).delta).max() <= 4 / 255 + 1e-12

    def test_single_step_pgd_is_fgsm_with_alpha(self, cnn_s, few):
        img = few[2]
        p = attacks.pgd(cnn_s, img, BaselineConfig(eps=16 / 255, alpha=2 / 255, steps=1))
        f = attacks.fgsm(cnn_s, img, 2 / 255)
        np.testing.assert_array_equal(p.adversarial, f.adversarial)

    def test_pgd_projection(self, cnn_s, few):
        cfg = BaselineConfig(eps=6 / 255, alpha=2 / 255, steps=10, random_start=True)
        for img in few:
            r = attacks.pgd(cnn_s, img, cfg)
            assert np.abs(r.delta).max() <= cfg.eps + 1e-12
            assert 0 <= r.adversarial.min() and r.adversarial.max() <= 1

    def test_strength_ordering(self, cnn_s, batch):
        sub = batch.subset(range(48))
        fgsm16 = metrics.asr(attacks.attack_batch(cnn_s, sub, "fgsm", BaselineConfig(eps=16 / 255)))
        fgsm2 = metrics.asr(attacks.attack_batch(cnn_s, sub, "fgsm", BaselineConfig(eps=2 / 255)))
        pgd16 = metrics.asr(attacks.attack_batch(cnn_s, sub, "pgd", BaselineConfig()))
        assert fgsm16 >= fgsm2
        assert pgd16 >= fgsm16

    def test_defaults(self):
        cfg = BaselineConfig()
        assert (cfg.eps, cfg.alpha, cfg.steps) == (16 / 255, 2 / 255, 20)


class TestBatch:
    def test_empty(self, cnn_s):
        assert attacks.attack_batch(cnn_s, [], "cfr", AttackConfig()) == []

    def test_length_and_worker_independence(self, cnn_s, few):
        one = attacks.attack_batch(cnn_s, few, "cfr", AttackConfig(), workers=1, master_seed=3)
        four = attacks.attack_batch(cnn_s, few, "cfr", AttackConfig(), workers=4, master_seed=3)
        assert len(one) == len(few)
        for a, b in zip(one, four):
            assert np.array_equal(a.delta, b.delta) and a.loss_history == b.loss_history

    def test_seed_changes_initialisation(self, cnn_s, few):
        a = attacks.attack_batch(cnn_s, few.subset([0]), "cfr", AttackConfig(iterations=0), master_seed=1)
        b = attacks.attack_batch(cnn_s, few.subset([0]), "cfr", AttackConfig(iterations=0), master_seed=2)
        assert not np.array_equal(a[0].delta, b[0].delta)

    def test_failures_are_recorded_not_raised(self, cnn_s, few):
        bad = cnn_s.copy()
        bad.params["fc1.bias"][:] = np.nan
        res = attacks.attack_batch(bad, few.subset([0, 1]), "cfr", AttackConfig(iterations=1))
        assert len(res) == 2 and all(r.error and not r.success for r in res)

    def test_unknown_method(self, cnn_s, few):
        with pytest.raises(ValueError):
            attacks.attack_batch(cnn_s, few, "cw", AttackConfig())

    def test_baseline_seed_override(self, cnn_s, few):
        cfg = BaselineConfig(random_start=True)
        r1 = attacks.attack_batch(cnn_s, few.subset([0]), "pgd", cfg, master_seed=0)
        r2 = attacks.attack_batch(cnn_s, few.subset([0]), "pgd", replace(cfg, seed=99), master_seed=0)
        np.testing.assert_array_equal(r1[0].delta, r2[0].delta)


def test_clipped_delta_invariant_at_range_edges(cnn_s):
    img = LabeledImage(np.clip(np.random.default_rng(0).random((3, 16, 16)) * 1.4 - 0.2, 0, 1), 0, "edge")
    r = attacks.cfr_attack(cnn_s, img, AttackConfig(eta=1000.0, iterations=3))
    assert np.array_equal(r.adversarial, np.clip(img.pixels + r.delta, 0, 1))
    assert 0 <= r.adversarial.min() and r.adversarial.max() <= 1
