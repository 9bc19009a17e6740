import math

import numpy as np
import pytest

from protowta import train
from protowta.data import Dataset
from protowta.models import (EdWtaModel, IpWtaModel, NeuronAssignment,
                             PnEdWtaModel, PnIpWtaModel)
from protowta.numkernel import stable_softmax
from protowta.train import (DivergenceError, TrainConfig, cce_loss,
                            cce_target, cross_validate_lr, evaluate_accuracy,
                            init_centers, init_negative, kmeans, lr_schedule)

from conftest import make_blobs


def one_sample_dataset(x, label, K):
    features = np.atleast_2d(np.asarray(x, dtype=np.float64))
    return Dataset(features, np.array([label]), K)


class TestTrainConfig:
    def test_defaults_valid(self):
        TrainConfig()

    @pytest.mark.parametrize("kwargs", [
        {"epochs": 0}, {"lr0": 0.0}, {"lr_decay": 0.0}, {"lr_decay": 1.5},
        {"neurons_per_class": 0}, {"init": "magic"}, {"beta0": -1.0},
        {"noise_sigma": -0.1},
    ])
    def test_rejects_bad_values(self, kwargs):
        with pytest.raises(ValueError):
            TrainConfig(**kwargs)


class TestKmeans:
    def test_k1_is_mean(self):
        rng = np.random.default_rng(0)
        pts = rng.random((40, 3))
        centers = kmeans(pts, 1, 0)
        np.testing.assert_allclose(centers[0], pts.mean(axis=0), rtol=1e-12)

    def test_two_separated_groups(self):
        rng = np.random.default_rng(1)
        a = 0.05 * rng.random((30, 2))
        b = 0.05 * rng.random((30, 2)) + 10.0
        pts = np.vstack([a, b])
        centers = kmeans(pts, 2, 3)
        got = centers[np.argsort(centers[:, 0])]
        np.testing.assert_allclose(got[0], a.mean(axis=0), rtol=1e-9)
        np.testing.assert_allclose(got[1], b.mean(axis=0), rtol=1e-9)

    def test_degenerate_k_rejected(self):
        pts = np.array([[1.0, 1.0]] * 10 + [[2.0, 2.0]] * 10)
        with pytest.raises(ValueError, match="distinct"):
            kmeans(pts, 3, 0)

    def test_sse_non_increasing(self):
        rng = np.random.default_rng(2)
        pts = rng.random((200, 4))
        trace = []
        kmeans(pts, 5, 7, sse_trace=trace)
        diffs = np.diff(trace)
        assert (diffs <= 1e-9).all()

    def test_duplicate_heavy_data_stays_finite(self):
        # exercises the empty-cluster reseeding path over many seeds
        pts = np.vstack([np.zeros((50, 2)),
                         np.full((50, 2), 1e-3),
                         [[10.0, 10.0]], [[10.0, 9.0]]])
        for seed in range(20):
            centers = kmeans(pts, 4, seed)
            assert np.isfinite(centers).all()
            assert len(np.unique(centers, axis=0)) == 4


class TestInitCenters:
    def test_block_assignment_ten_classes(self):
        ds = make_blobs(K=10, modes=1, n_per=12, D=4)
        cfg = TrainConfig(neurons_per_class=6)
        centers, asg = init_centers(ds, cfg)
        assert centers.shape == (60, 4)
        assert np.array_equal(asg.neurons_of(0), np.arange(6))
        assert np.array_equal(asg.class_of[:6], np.zeros(6))

    def test_single_neuron_kmeans_is_class_mean(self):
        ds = make_blobs(K=3, modes=1, n_per=20, D=4)
        cfg = TrainConfig(neurons_per_class=1)
        centers, asg = init_centers(ds, cfg)
        for k in range(3):
            mean_k = ds.features[ds.labels == k].mean(axis=0)
            np.testing.assert_allclose(centers[k], mean_k, rtol=1e-12)

    def test_random_mode_reproducible(self):
        ds = make_blobs(K=3, modes=1, n_per=10, D=4)
        cfg = TrainConfig(init="random", init_seed=5)
        a, _ = init_centers(ds, cfg)
        b, _ = init_centers(ds, cfg)
        assert np.array_equal(a, b)
        assert a.min() >= 0.0 and a.max() <= 1.0

    def test_class_with_too_few_samples(self):
        feats = np.vstack([np.random.default_rng(0).random((10, 3)),
                           np.random.default_rng(1).random((2, 3))])
        labels = np.array([0] * 10 + [1] * 2)
        ds = Dataset(feats, labels, 2)
        with pytest.raises(ValueError, match="class 1"):
            init_centers(ds, TrainConfig(neurons_per_class=4))


class TestInitNegative:
    def test_zero_sigma_is_exact_copy(self):
        c = np.random.default_rng(3).random((6, 8))
        neg = init_negative(c, 0.0, 0)
        assert np.array_equal(neg, c)

    def test_expected_offset_norm(self):
        # chi-distribution mean: sigma * sqrt(D) up to a 1/(4D) correction
        c = np.zeros((400, 784))
        neg = init_negative(c, 0.01, 12)
        norms = np.linalg.norm(neg - c, axis=1)
        assert abs(norms.mean() - 0.01 * math.sqrt(784)) < 0.005

    def test_reproducible(self):
        c = np.random.default_rng(4).random((3, 5))
        assert np.array_equal(init_negative(c, 0.1, 9),
                              init_negative(c, 0.1, 9))


class TestCceTarget:
    def test_single_neuron_is_one_hot(self):
        asg = NeuronAssignment.block(3, 1)
        tau = cce_target(np.array([0.3, -1.0, 4.0]), 1.0, 1, asg)
        assert np.array_equal(tau, [0.0, 1.0, 0.0])

    def test_equal_scores_split_evenly(self):
        asg = NeuronAssignment.block(2, 2)
        tau = cce_target(np.array([2.0, 2.0, 0.0, 5.0]), 1.0, 0, asg)
        np.testing.assert_allclose(tau, [0.5, 0.5, 0.0, 0.0], atol=1e-15)

    def test_ln2_closed_form(self):
        asg = NeuronAssignment.block(2, 2)
        z = np.array([math.log(2), 0.0, 7.0, -3.0])
        tau = cce_target(z, 1.0, 0, asg)
        np.testing.assert_allclose(tau, [2 / 3, 1 / 3, 0.0, 0.0], atol=1e-15)

    def test_label_out_of_range(self):
        asg = NeuronAssignment.block(2, 1)
        with pytest.raises(ValueError, match="label"):
            cce_target(np.zeros(2), 1.0, 2, asg)

    def test_sums_to_one(self):
        rng = np.random.default_rng(5)
        asg = NeuronAssignment.block(4, 3)
        for _ in range(100):
            tau = cce_target(rng.standard_normal(12) * 10,
                             float(rng.uniform(0.1, 5)),
                             int(rng.integers(4)), asg)
            assert abs(tau.sum() - 1.0) <= 1e-12
            assert (tau >= 0).all()


class TestCceLoss:
    def test_matching_one_hot_is_zero(self):
        y = np.array([0.0, 1.0, 0.0])
        assert cce_loss(y, y) == 0.0

    def test_uniform_sixty(self):
        tau = np.zeros(60)
        tau[7] = 1.0
        y = np.full(60, 1 / 60)
        assert cce_loss(y, tau) == pytest.approx(4.0943445622221006848,
                                                 rel=1e-14)

    def test_against_extended_precision_oracle(self):
        import mpmath as mp

        mp.mp.dps = 50
        rng = np.random.default_rng(6)
        for _ in range(20):
            y = rng.random(8) + 1e-3
            y /= y.sum()
            tau = rng.random(8)
            tau /= tau.sum()
            oracle = float(-mp.fsum(mp.mpf(t) * mp.log(mp.mpf(v))
                                    for t, v in zip(tau, y)))
            assert cce_loss(y, tau) == pytest.approx(oracle, rel=1e-12)

    def test_clamps_tiny_probabilities(self):
        y = np.array([0.0, 1.0])
        tau = np.array([1.0, 0.0])
        assert cce_loss(y, tau) == pytest.approx(-math.log(1e-300))


class TestLrSchedule:
    def test_epoch_zero(self):
        assert lr_schedule(1.0, 0.5, 0) == 1.0

    def test_three_halvings(self):
        assert lr_schedule(1.0, 0.5, 3) == 0.125

    def test_constant_when_decay_one(self):
        assert lr_schedule(0.7, 1.0, 100) == 0.7

    def test_negative_epoch_rejected(self):
        with pytest.raises(ValueError):
            lr_schedule(1.0, 0.5, -1)


class TestSingleStepUpdates:
    """Exact arithmetic of one SGD step on hand-built states."""

    def _cfg(self, **kw):
        base = dict(epochs=1, lr0=0.1, lr_decay=1.0, neurons_per_class=1,
                    init="random", beta0=1.0, noise_sigma=0.0,
                    shuffle_seed=0, init_seed=0)
        base.update(kw)
        return TrainConfig(**base)

    def test_ip_step(self):
        # zero model, x=[1] augmented to [1,1]; y-tau = [-1/2, +1/2]
        asg = NeuronAssignment.block(2, 1)
        init = IpWtaModel(np.zeros((2, 1)), np.zeros(2), asg)
        ds = one_sample_dataset([1.0], 0, 2)
        model, stats = train.train_ip_wta(ds, self._cfg(), init_model=init)
        np.testing.assert_allclose(model.weights, [[0.05], [-0.05]])
        np.testing.assert_allclose(model.biases, [0.05, -0.05])
        assert stats[0].loss == pytest.approx(math.log(2))

    def test_ed_step(self):
        # both centers at 0, x=[1]: z=[-1/2,-1/2], y-tau=[-1/2,+1/2]
        asg = NeuronAssignment.block(2, 1)
        init = EdWtaModel(np.zeros((2, 1)), np.zeros(2), 1.0, asg)
        ds = one_sample_dataset([1.0], 0, 2)
        model, stats = train.train_ed_wta(ds, self._cfg(), init_model=init)
        np.testing.assert_allclose(model.centers, [[0.05], [-0.05]])
        # beta step: 1/2 * mu * ((-.5)*1 + (.5)*1) = 0
        assert model.beta == 1.0

    def test_pn_ip_true_class_step(self):
        asg = NeuronAssignment.block(2, 1)
        init = PnIpWtaModel(np.zeros((2, 2)), np.zeros((2, 2)), asg)
        ds = one_sample_dataset([1.0], 0, 2)
        model, _ = train.train_pn_ip_wta(ds, self._cfg(), init_model=init)
        np.testing.assert_allclose(model.w_plus, [[0.05, 0.05], [0.0, 0.0]])
        np.testing.assert_allclose(model.w_minus, [[0.0, 0.0], [0.05, 0.05]])

    def test_pn_ip_other_class_coefficient(self):
        # five flat neurons: y_j = 0.2 everywhere, so w- gains 0.02 x
        asg = NeuronAssignment.block(5, 1)
        init = PnIpWtaModel(np.zeros((5, 2)), np.zeros((5, 2)), asg)
        ds = one_sample_dataset([1.0], 0, 5)
        model, _ = train.train_pn_ip_wta(ds, self._cfg(), init_model=init)
        np.testing.assert_allclose(model.w_minus[1:], 0.02 * np.ones((4, 2)))
        np.testing.assert_allclose(model.w_minus[0], [0.0, 0.0])
        np.testing.assert_allclose(model.w_plus[0], [0.08, 0.08])

    def test_pn_ed_steps(self):
        asg = NeuronAssignment.block(2, 1)
        init = PnEdWtaModel(np.zeros((2, 1)), np.zeros((2, 1)), 1.0, asg)
        ds = one_sample_dataset([1.0], 0, 2)
        model, _ = train.train_pn_ed_wta(ds, self._cfg(), init_model=init)
        # z=[0,0]: y=[.5,.5], tau=[1,0]; c0+ += .1*1*.5*(1-0) = .05,
        # c1- += .1*1*.5*(1-0) = .05; beta step uses z=0 so beta stays 1
        np.testing.assert_allclose(model.c_plus, [[0.05], [0.0]])
        np.testing.assert_allclose(model.c_minus, [[0.0], [0.05]])
        assert model.beta == 1.0

    def test_pn_update_sets_disjoint(self):
        rng = np.random.default_rng(7)
        asg = NeuronAssignment.block(3, 2)
        wp = rng.random((6, 3))
        wm = rng.random((6, 3))
        init = PnIpWtaModel(wp.copy(), wm.copy(), asg)
        ds = one_sample_dataset(rng.random(2), 1, 3)
        model, _ = train.train_pn_ip_wta(ds, self._cfg(neurons_per_class=2),
                                         init_model=init)
        plus_changed = ~np.all(model.w_plus == wp, axis=1)
        minus_changed = ~np.all(model.w_minus == wm, axis=1)
        assert not np.any(plus_changed & minus_changed)
        assert set(np.flatnonzero(plus_changed)) <= {2, 3}
        assert set(np.flatnonzero(minus_changed)) == {0, 1, 4, 5}


class TestSignRouting:
    def test_y_below_tau_on_true_class(self):
        rng = np.random.default_rng(8)
        asg = NeuronAssignment.block(4, 3)
        for _ in range(300):
            z = rng.standard_normal(12) * float(rng.uniform(0.1, 30))
            beta = float(rng.uniform(0.05, 10))
            k = int(rng.integers(4))
            y = stable_softmax(z, beta)
            tau = cce_target(z, beta, k, asg)
            idx = asg.neurons_of(k)
            assert (y[idx] <= tau[idx] + 1e-12).all()
            others = np.setdiff1d(np.arange(12), idx)
            assert (tau[others] == 0.0).all()
            # strict in exact arithmetic; exp underflow can reach 0.0
            assert (y[others] >= tau[others]).all()


class TestGradientChecks:
    """Analytic gradients vs central finite differences, tau frozen."""

    H = 1e-5
    TOL = 1e-5

    def _rel_err(self, a, b):
        # floored denominator: meaningful only for non-vanishing gradients
        return np.linalg.norm(a - b) / max(np.linalg.norm(a),
                                           np.linalg.norm(b), 1e-4)

    def test_ed_center_and_beta_gradients(self):
        rng = np.random.default_rng(9)
        asg = NeuronAssignment.block(2, 2)  # M=4
        for _ in range(10):
            C = rng.standard_normal((4, 5))
            x = rng.standard_normal(5)
            beta = float(rng.uniform(0.3, 2.0))
            k = int(rng.integers(2))

            def loss(C_, beta_, tau):
                z = -0.5 * np.sum((x - C_) ** 2, axis=1)
                return cce_loss(stable_softmax(z, beta_), tau)

            z0 = -0.5 * np.sum((x - C) ** 2, axis=1)
            tau = cce_target(z0, beta, k, asg)
            y = stable_softmax(z0, beta)
            analytic_c = beta * (y - tau)[:, None] * (x - C)
            fd_c = np.zeros_like(C)
            for j in range(4):
                for d in range(5):
                    up = C.copy(); up[j, d] += self.H
                    dn = C.copy(); dn[j, d] -= self.H
                    fd_c[j, d] = (loss(up, beta, tau)
                                  - loss(dn, beta, tau)) / (2 * self.H)
            assert self._rel_err(analytic_c.ravel(), fd_c.ravel()) < self.TOL

            analytic_b = -0.5 * float((y - tau) @ np.sum((x - C) ** 2, axis=1))
            fd_b = (loss(C, beta + self.H, tau)
                    - loss(C, beta - self.H, tau)) / (2 * self.H)
            assert (abs(analytic_b - fd_b)
                    / max(abs(analytic_b), abs(fd_b), 1e-4) < self.TOL)

    def test_pn_ed_center_and_beta_gradients(self):
        rng = np.random.default_rng(10)
        asg = NeuronAssignment.block(2, 2)
        for _ in range(10):
            CP = rng.standard_normal((4, 5))
            CM = rng.standard_normal((4, 5))
            x = rng.standard_normal(5)
            beta = float(rng.uniform(0.3, 2.0))
            k = int(rng.integers(2))

            def z_of(CP_, CM_):
                return -0.5 * (np.sum((x - CP_) ** 2, axis=1)
                               - np.sum((x - CM_) ** 2, axis=1))

            def loss(CP_, CM_, beta_, tau):
                return cce_loss(stable_softmax(z_of(CP_, CM_), beta_), tau)

            z0 = z_of(CP, CM)
            tau = cce_target(z0, beta, k, asg)
            y = stable_softmax(z0, beta)
            own = asg.neurons_of(k)
            other = np.setdiff1d(np.arange(4), own)

            # positive centers of the true class: grad = beta (y-tau)(x-c+)
            for j in own:
                analytic = beta * (y[j] - tau[j]) * (x - CP[j])
                fd = np.zeros(5)
                for d in range(5):
                    up = CP.copy(); up[j, d] += self.H
                    dn = CP.copy(); dn[j, d] -= self.H
                    fd[d] = (loss(up, CM, beta, tau)
                             - loss(dn, CM, beta, tau)) / (2 * self.H)
                assert self._rel_err(analytic, fd) < self.TOL

            # negative centers elsewhere: grad = -beta y (x-c-)
            for j in other:
                analytic = -beta * y[j] * (x - CM[j])
                fd = np.zeros(5)
                for d in range(5):
                    up = CM.copy(); up[j, d] += self.H
                    dn = CM.copy(); dn[j, d] -= self.H
                    fd[d] = (loss(CP, up, beta, tau)
                             - loss(CP, dn, beta, tau)) / (2 * self.H)
                assert self._rel_err(analytic, fd) < self.TOL

            analytic_b = float((y - tau) @ z0)
            fd_b = (loss(CP, CM, beta + self.H, tau)
                    - loss(CP, CM, beta - self.H, tau)) / (2 * self.H)
            assert (abs(analytic_b - fd_b)
                    / max(abs(analytic_b), abs(fd_b), 1e-4) < self.TOL)


class TestTrainers:
    def test_separable_toy_reaches_full_accuracy(self):
        ds = make_blobs(seed=1, K=2, modes=1, n_per=80, D=4, spread=0.05)
        cfg = TrainConfig(epochs=50, lr0=0.5, lr_decay=0.9,
                          neurons_per_class=1, init="kmeans")
        model, stats = train.train_ip_wta(ds, cfg)
        assert any(s.train_acc == 1.0 for s in stats)
        assert evaluate_accuracy(model, ds) == 1.0

    @pytest.mark.parametrize("family,lr0", [
        ("ip", 0.5), ("ed", 0.5), ("pn_ip", 0.5), ("pn_ed", 0.005)])
    def test_all_families_learn_blobs(self, blob_data, family, lr0):
        cfg = TrainConfig(epochs=12, lr0=lr0, lr_decay=0.8,
                          neurons_per_class=2, init="kmeans")
        model, stats = train.TRAINERS[family](blob_data, cfg)
        assert evaluate_accuracy(model, blob_data) > 0.97
        assert all(np.isfinite(s.loss) for s in stats)

    @pytest.mark.parametrize("family", list(train.TRAINERS))
    def test_bit_reproducible(self, blob_data, family):
        cfg = TrainConfig(epochs=2, lr0=0.05, neurons_per_class=2,
                          shuffle_seed=3, init_seed=4)
        a, _ = train.TRAINERS[family](blob_data, cfg)
        b, _ = train.TRAINERS[family](blob_data, cfg)
        for field in ("weights", "biases", "centers", "ed_biases",
                      "w_plus", "w_minus", "c_plus", "c_minus"):
            if hasattr(a, field):
                assert np.array_equal(getattr(a, field), getattr(b, field))
        if hasattr(a, "beta"):
            assert a.beta == b.beta

    def test_pn_ed_centers_stay_near_data_box(self, blob_data):
        cfg = TrainConfig(epochs=10, lr0=0.005, neurons_per_class=2)
        model, _ = train.train_pn_ed_wta(blob_data, cfg)
        assert model.c_plus.min() >= -0.25 and model.c_plus.max() <= 1.25
        assert model.c_minus.min() >= -0.25 and model.c_minus.max() <= 1.25

    def test_ed_trainer_resumes_from_init_model(self, blob_data):
        cfg = TrainConfig(epochs=3, lr0=0.2, neurons_per_class=2)
        base, _ = train.train_ed_wta(blob_data, cfg)
        resumed, _ = train.train_ed_wta(blob_data, cfg, init_model=base)
        assert not np.array_equal(resumed.centers, base.centers)
        assert resumed.assignment is base.assignment

    @pytest.mark.filterwarnings("ignore:overflow")
    @pytest.mark.filterwarnings("ignore:invalid value")
    def test_divergence_reported_with_location(self, blob_data):
        cfg = TrainConfig(epochs=40, lr0=1e12, neurons_per_class=2,
                          beta0=1.0)
        with pytest.raises(DivergenceError, match="epoch"):
            train.train_ed_wta(blob_data, cfg)

    def test_unlabeled_dataset_rejected(self):
        ds = Dataset(np.random.default_rng(0).random((10, 4)), None, 1)
        with pytest.raises(ValueError, match="label"):
            train.train_ip_wta(ds, TrainConfig(epochs=1))


class TestEvaluate:
    def test_confusion_counts_sum(self, blob_data):
        cfg = TrainConfig(epochs=5, lr0=0.5, neurons_per_class=2)
        model, _ = train.train_ip_wta(blob_data, cfg)
        counts = train.confusion_counts(model, blob_data)
        assert counts.sum() == blob_data.n
        acc = counts.trace() / counts.sum()
        assert acc == pytest.approx(evaluate_accuracy(model, blob_data))

    def test_empty_dataset_rejected(self):
        ds = Dataset(np.zeros((0, 3)), np.zeros(0, dtype=int), 1)
        rng = np.random.default_rng(1)
        asg = NeuronAssignment.block(1, 1)
        model = IpWtaModel(rng.random((1, 3)), rng.random(1), asg)
        with pytest.raises(ValueError, match="empty"):
            evaluate_accuracy(model, ds)


class TestCrossValidation:
    def test_single_candidate_grid(self, blob_data):
        cfg = TrainConfig(epochs=1, neurons_per_class=1)
        lr, results = cross_validate_lr(blob_data, cfg, grid=[0.3],
                                        family="ip")
        assert lr == 0.3
        assert set(results) == {0.3}

    @pytest.mark.filterwarnings("ignore:overflow")
    @pytest.mark.filterwarnings("ignore:invalid value")
    def test_unstable_lr_loses_to_small_one(self, blob_data):
        cfg = TrainConfig(epochs=2, neurons_per_class=1, beta0=1.0)
        lr, results = cross_validate_lr(blob_data, cfg, grid=[1e9, 0.05],
                                        family="ed")
        assert lr == 0.05
        assert results[0.05] > results[1e9]

    def test_deterministic_selection(self, blob_data):
        cfg = TrainConfig(epochs=1, neurons_per_class=1)
        a = cross_validate_lr(blob_data, cfg, grid=[0.01, 0.5], family="ip")
        b = cross_validate_lr(blob_data, cfg, grid=[0.01, 0.5], family="ip")
        assert a == b

    def test_missing_class_in_fold(self):
        feats = np.random.default_rng(2).random((24, 3))
        labels = np.array([0] * 21 + [1] * 3)  # class 1 misses 2 of 5 folds
        ds = Dataset(feats, labels, 2)
        cfg = TrainConfig(epochs=1, neurons_per_class=1)
        with pytest.raises(ValueError, match="stratification"):
            cross_validate_lr(ds, cfg, grid=[0.1], family="ip")

    def test_empty_grid_rejected(self, blob_data):
        with pytest.raises(ValueError, match="grid"):
            cross_validate_lr(blob_data, TrainConfig(epochs=1), grid=[],
                              family="ip")
