import numpy as np
import pytest

from scsnet import autodiff as ad
from scsnet.mmd import FIXED, KernelSpec, MmdConfig, layered_class_mmd, transfer_loss
from scsnet.models import (
    BaselineConfig,
    ScsnConfig,
    build_baseline,
    build_scsn,
    forward_infer,
    forward_train,
    load_checkpoint,
    save_checkpoint,
)

TINY = BaselineConfig(n_channels=2, n_samples=20, n_classes=2,
                      temporal_filters=3, temporal_kernel=5, pool_width=4,
                      pool_stride=3, dropout=0.0)


def tiny_scsn_cfg(n_subjects=2, dropout=0.0):
    base = BaselineConfig(n_channels=2, n_samples=20, n_classes=2,
                          temporal_filters=3, temporal_kernel=5, pool_width=4,
                          pool_stride=3, dropout=dropout)
    return ScsnConfig(base=base, n_subjects=n_subjects, target_index=0,
                      common_fc_dims=(6, 6, 6), separate_fc_dims=(4, 4, 4))


class TestBaselineBuild:
    def test_reference_config_classifier_input(self):
        cfg = BaselineConfig(n_channels=22, n_samples=500, n_classes=4)
        model = build_baseline(cfg, seed=0)
        assert cfg.feature_dim == 40 * 27 == 1080
        assert model.params["classifier.weight"].shape == (4, 1080)

    def test_same_seed_identical(self):
        a = build_baseline(TINY, seed=5)
        b = build_baseline(TINY, seed=5)
        for name in a.params.names():
            np.testing.assert_array_equal(a.params[name].values, b.params[name].values)

    def test_probabilities_sum_to_one(self):
        cfg = BaselineConfig(n_channels=3, n_samples=60, n_classes=4,
                             temporal_filters=4, temporal_kernel=7, pool_width=10,
                             pool_stride=5, dropout=0.0)
        model = build_baseline(cfg, seed=1)
        probs = model.predict_proba(np.random.default_rng(0).normal(size=(5, 3, 60)))
        assert probs.shape == (5, 4)
        np.testing.assert_allclose(probs.sum(axis=1), np.ones(5), atol=1e-12)

    def test_infeasible_pool_rejected(self):
        cfg = BaselineConfig(n_channels=2, n_samples=30, n_classes=2,
                             temporal_kernel=25, pool_width=10, pool_stride=2)
        with pytest.raises(ValueError, match="pool"):
            build_baseline(cfg, seed=0)

    def test_zero_bias_glorot_bounds(self):
        model = build_baseline(TINY, seed=2)
        np.testing.assert_array_equal(model.params["classifier.bias"].values, 0.0)
        k = model.params["temporal.kernels"].values
        bound = np.sqrt(6.0 / (TINY.temporal_kernel + TINY.temporal_filters))
        assert np.all(np.abs(k) <= bound)


class TestScsnBuild:
    def test_parameter_groups(self):
        model = build_scsn(tiny_scsn_cfg(n_subjects=5), seed=0)
        groups = model.params.groups()
        assert set(groups) == {"shared"} | {f"subject{i}" for i in range(5)}

    def test_branches_differ(self):
        model = build_scsn(tiny_scsn_cfg(), seed=0)
        a = model.params["subject0.temporal.kernels"].values
        b = model.params["subject1.temporal.kernels"].values
        assert not np.array_equal(a, b)

    def test_total_parameter_count(self):
        cfg = tiny_scsn_cfg(n_subjects=3)
        model = build_scsn(cfg, seed=0)
        base = cfg.base
        shallow = base.temporal_filters * base.temporal_kernel \
            + base.temporal_filters * base.temporal_filters * base.n_channels
        dims = [base.feature_dim, *cfg.common_fc_dims]
        shared = sum(dims[i + 1] * dims[i] + dims[i + 1] for i in range(3))
        dims = [cfg.common_fc_dims[-1], *cfg.separate_fc_dims]
        sep = sum(dims[i + 1] * dims[i] + dims[i + 1] for i in range(3))
        classifier = base.n_classes * cfg.separate_fc_dims[-1] + base.n_classes
        expected = shared + 3 * (shallow + sep + classifier)
        assert model.params.n_values() == expected


class TestForwardTrain:
    def _batch(self, model, rng, n=4):
        cfg = model.cfg.base
        return {i: (rng.normal(size=(n, cfg.n_channels, cfg.n_samples)),
                    rng.integers(cfg.n_classes, size=n))
                for i in range(model.n_subjects)}

    def test_feature_shapes(self):
        model = build_scsn(tiny_scsn_cfg(), seed=0)
        out = forward_train(model, self._batch(model, np.random.default_rng(0)))
        for logits, feats in out.values():
            assert logits.shape == (4, 2)
            assert [f.shape[1] for f in feats] == [4, 4, 4]
            assert len(feats) == 3

    def test_missing_subject_rejected(self):
        model = build_scsn(tiny_scsn_cfg(), seed=0)
        batch = self._batch(model, np.random.default_rng(0))
        del batch[1]
        with pytest.raises(ValueError, match="1"):
            forward_train(model, batch)

    def test_thirty_per_branch_prediction_count(self):
        cfg = tiny_scsn_cfg(n_subjects=5)
        model = build_scsn(cfg, seed=0)
        out = forward_train(model, self._batch(model, np.random.default_rng(1), n=30))
        assert sum(logits.shape[0] for logits, _ in out.values()) == 150

    def test_identical_branches_identical_logits(self):
        model = build_scsn(tiny_scsn_cfg(), seed=0)
        p = model.params
        for name in p.names():
            if name.startswith("subject1."):
                src = name.replace("subject1.", "subject0.")
                p[name].values = p[src].values.copy()
        x = np.random.default_rng(2).normal(size=(3, 2, 20))
        out = forward_train(model, {0: (x, np.zeros(3, int)), 1: (x, np.zeros(3, int))})
        np.testing.assert_array_equal(out[0][0].values, out[1][0].values)


class TestForwardInfer:
    def test_zero_classifier_uniform(self):
        cfg = BaselineConfig(n_channels=2, n_samples=40, n_classes=4,
                             temporal_filters=3, temporal_kernel=5, pool_width=6,
                             pool_stride=4, dropout=0.0)
        model = build_baseline(cfg, seed=0)
        model.params["classifier.weight"].values[:] = 0.0
        probs = forward_infer(model, np.random.default_rng(0).normal(size=(6, 2, 40)))
        np.testing.assert_allclose(probs, 0.25, atol=1e-15)

    def test_deterministic(self):
        model = build_scsn(tiny_scsn_cfg(), seed=3)
        x = np.random.default_rng(4).normal(size=(5, 2, 20))
        np.testing.assert_array_equal(forward_infer(model, x, 1), forward_infer(model, x, 1))

    def test_matches_training_mode_without_dropout(self):
        model = build_scsn(tiny_scsn_cfg(dropout=0.0), seed=5)
        x = np.random.default_rng(6).normal(size=(4, 2, 20))
        logits, _ = model.branch_forward(x, 0, training=True,
                                         dropout_rng=np.random.default_rng(0))
        shifted = logits.values - logits.values.max(axis=1, keepdims=True)
        expected = np.exp(shifted) / np.exp(shifted).sum(axis=1, keepdims=True)
        got = forward_infer(model, x, 0)
        assert np.max(np.abs(got - expected)) <= 1e-12

    def test_branch_out_of_range(self):
        model = build_scsn(tiny_scsn_cfg(), seed=0)
        with pytest.raises(ValueError):
            forward_infer(model, np.zeros((1, 2, 20)), 7)


class TestIsolation:
    def test_other_branch_mutation_is_invisible(self):
        model = build_scsn(tiny_scsn_cfg(n_subjects=3), seed=7)
        x = np.random.default_rng(8).normal(size=(4, 2, 20))
        before = forward_infer(model, x, 0)
        for name in model.params.names():
            if name.startswith(("subject1.", "subject2.")):
                model.params[name].values += 13.37
        after = forward_infer(model, x, 0)
        np.testing.assert_array_equal(before, after)

    def test_gradient_isolation(self):
        model = build_scsn(tiny_scsn_cfg(n_subjects=3), seed=9)
        rng = np.random.default_rng(10)
        batch = {i: (rng.normal(size=(3, 2, 20)), rng.integers(2, size=3)) for i in range(3)}
        out = forward_train(model, batch)
        loss, _ = ad.softmax_xent(out[1][0], batch[1][1])
        loss.backward()
        for name, tensor in model.params.items():
            group = model.params.group_of(name)
            if group in ("subject0", "subject2"):
                assert tensor.grad is None, name
            if group == "shared":
                assert tensor.grad is not None, name


def test_end_to_end_gradient_check_tiny_scsn():
    base = BaselineConfig(n_channels=2, n_samples=12, n_classes=2,
                          temporal_filters=2, temporal_kernel=3, pool_width=3,
                          pool_stride=2, dropout=0.0)
    cfg = ScsnConfig(base=base, n_subjects=2, target_index=0,
                     common_fc_dims=(3, 3, 3), separate_fc_dims=(2, 2, 2))
    model = build_scsn(cfg, seed=11)
    rng = np.random.default_rng(12)
    batch = {i: (rng.normal(size=(3, 2, 12)), np.array([0, 1, 0])) for i in range(2)}
    kernel = KernelSpec(sigma2=1.5, bandwidth_rule=FIXED)
    mmd_cfg = MmdConfig(kernel=kernel)

    def loss():
        out = forward_train(model, batch)
        ce = ad.scale(ad.add_n([ad.softmax_xent(out[i][0], batch[i][1])[0]
                                for i in range(2)]), 0.5)
        disc = layered_class_mmd(out[0][1], out[1][1], batch[0][1], batch[1][1], mmd_cfg)
        return transfer_loss(ce, [disc], 1.0)

    wrt = [model.params[n] for n in model.params.names()]
    assert ad.grad_check(loss, wrt, eps=1e-5) < 1e-4


class TestCheckpoint:
    def test_baseline_round_trip(self, tmp_path):
        model = build_baseline(TINY, seed=13)
        path = tmp_path / "model.ckpt"
        save_checkpoint(model, path, meta={"note": "hello"})
        back, meta = load_checkpoint(path)
        assert meta == {"note": "hello"}
        assert back.cfg == model.cfg
        for name in model.params.names():
            np.testing.assert_array_equal(back.params[name].values,
                                          model.params[name].values)

    def test_scsn_round_trip_bit_exact(self, tmp_path):
        model = build_scsn(tiny_scsn_cfg(n_subjects=3), seed=14)
        path = tmp_path / "model.ckpt"
        save_checkpoint(model, path, meta={"subjects": "S01,S02,S03", "target": "S02"})
        back, meta = load_checkpoint(path)
        assert meta["subjects"] == "S01,S02,S03"
        assert back.cfg == model.cfg
        for name in model.params.names():
            assert back.params[name].values.tobytes() == model.params[name].values.tobytes()
        x = np.random.default_rng(15).normal(size=(2, 2, 20))
        np.testing.assert_array_equal(forward_infer(back, x, 1), forward_infer(model, x, 1))

    def test_truncated_rejected(self, tmp_path):
        model = build_baseline(TINY, seed=16)
        path = tmp_path / "model.ckpt"
        save_checkpoint(model, path)
        path.write_bytes(path.read_bytes()[:-10])
        with pytest.raises(ValueError):
            load_checkpoint(path)
