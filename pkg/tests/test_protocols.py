"""Protocol semantics: reductions, identities, locality, determinism, stats."""

import copy
import hashlib

import numpy as np
import pytest

from zaplab import autodiff as ad
from zaplab.autodiff import Tensor, backward
from zaplab.config import config_from_dict
from zaplab.data import ClassDataset, EpisodeBatch, sample_episode
from zaplab.metrics import strip_volatile
from zaplab.models import clone_params
from zaplab.optim import AdamState, adam_step, sgd_step_inplace
from zaplab.oracle import ReferenceAdam
from zaplab.protocols import (
    _asb_episode_meta,
    _asb_episode_nonmeta,
    build_dataset,
    build_pretrain_model,
    build_split,
    evaluate_classifier,
    mann_whitney_u,
    pretrain_asb,
    pretrain_iid,
    run_trial,
    select_best,
    sweep_and_select,
    transfer_iid,
    transfer_sequential,
)
from zaplab.seeding import rng_stream


def tiny_config(**over):
    base = {
        "data": {"n_classes": 14, "n_per_class": 8, "seed": 2},
        "split": {"n_pretrain": 9, "n_transfer": 4, "seed": 1},
        "channels": 4,
        "dtype": "float64",
        "pretrain": {"method": "asb", "zap": "off", "eta_in": 0.05, "eta_out": 0.01,
                     "k_inner": 2, "r_remember": 3, "outer_steps": 6, "eval_every": 100,
                     "epochs": 2, "batch_size": 8},
        "transfer": {"mode": "sequential", "beta": 0.05, "eval_every_classes": 2},
    }

    def merge(dst, src):
        for k, v in src.items():
            if isinstance(v, dict) and isinstance(dst.get(k), dict):
                merge(dst[k], v)
            else:
                dst[k] = v

    merge(base, over)
    return config_from_dict(base)


@pytest.fixture(scope="module")
def env():
    cfg = tiny_config()
    ds = build_dataset(cfg)
    return ds, build_split(cfg, ds)


def params_digest(model):
    h = hashlib.sha256()
    for n in model.param_names():
        h.update(model.params[n].data.tobytes())
    return h.hexdigest()


class TestPretrainIid:
    def test_single_class_head_is_degenerate(self):
        # softmax over one class is identically certain: loss pinned at zero
        cfg = tiny_config(pretrain={"method": "iid", "epochs": 1},
                          split={"n_pretrain": 1, "n_transfer": 0})
        ds = build_dataset(cfg)
        split = build_split(cfg, ds)
        _, rows = pretrain_iid(cfg, ds, split)
        m = [r for r in rows if r.get("record") == "metrics"]
        assert all(abs(r["loss"]) < 1e-12 and r["test_acc"] == 1.0 for r in m)

    def test_two_class_loss_decreases(self):
        cfg = tiny_config(pretrain={"method": "iid", "epochs": 2},
                          split={"n_pretrain": 2, "n_transfer": 0})
        ds = build_dataset(cfg)
        split = build_split(cfg, ds)
        _, rows = pretrain_iid(cfg, ds, split)
        m = [r for r in rows if r.get("record") == "metrics"]
        assert m[-1]["loss"] < m[0]["loss"]

    def test_zap_drop_and_recovery(self, env):
        from zaplab.zapping import ZapPolicy, zap_iid

        ds, split = env
        cfg = tiny_config(pretrain={"method": "iid", "epochs": 12, "eta_out": 0.003})
        model, rows = pretrain_iid(cfg, ds, split)
        from zaplab.data import split_arrays

        x_val, y_val = split_arrays(ds, split.pretrain_classes, "val")
        acc_before, _ = evaluate_classifier(model, x_val, y_val)
        zap_iid(model, ZapPolicy(mode="iid_cadence", k_classes="all"), 0,
                rng_stream(0, "test-zap"))
        acc_after, _ = evaluate_classifier(model, x_val, y_val)
        assert acc_after < acc_before - 0.2
        cont = tiny_config(pretrain={"method": "iid", "epochs": 4, "eta_out": 0.003})
        model, _ = pretrain_iid(cont, ds, split, model=model)
        acc_rec, _ = evaluate_classifier(model, x_val, y_val)
        assert acc_rec > acc_after + 0.2

    def test_zap_events_logged(self, env):
        ds, split = env
        cfg = tiny_config(pretrain={"method": "iid", "zap": "iid", "zap_k": "all",
                                    "zap_every_epochs": 2, "epochs": 4})
        _, rows = pretrain_iid(cfg, ds, split)
        events = [r for r in rows if r.get("record") == "event"]
        assert len(events) == 2  # epochs 0 and 2
        assert all(len(e["classes"]) == 9 for e in events)


class TestAsbReductions:
    def test_zero_outer_lr_single_episode(self, env):
        ds, split = env
        cfg = tiny_config(pretrain={"outer_steps": 1, "k_inner": 1, "eta_out": 0.0})
        model = build_pretrain_model(cfg, split)
        before = clone_params(model)
        model, _ = pretrain_asb(cfg, ds, split, model=model)

        # replicate the one inner step by hand on a fresh copy
        ref = build_pretrain_model(cfg, split)
        ep = sample_episode(ds, split, 1, cfg.pretrain.r_remember,
                            rng_stream(cfg.pretrain_seed, "episodes"))
        xi = ep.x_inner[0:1].astype(np.float64)
        loss = ad.softmax_cross_entropy(ref.forward(xi), ep.y_inner[0:1])
        grads = backward(loss, ref.param_list())
        sgd_step_inplace(ref.param_list(), grads, cfg.pretrain.eta_in)

        assert params_digest(model) == params_digest(ref)
        assert any((model.params[n].data != before[n]).any() for n in model.param_names())

    def test_reduces_to_plain_sgd_loop(self, env):
        # zap off, eta_out = 0: bit-identical to sequential single-example SGD
        ds, split = env
        cfg = tiny_config(pretrain={"outer_steps": 5, "k_inner": 3, "eta_out": 0.0})
        trained, _ = pretrain_asb(cfg, ds, split)

        ref = build_pretrain_model(cfg, split)
        rng = rng_stream(cfg.pretrain_seed, "episodes")
        for _ in range(5):
            ep = sample_episode(ds, split, 3, cfg.pretrain.r_remember, rng)
            for i in range(3):
                xi = ep.x_inner[i : i + 1].astype(np.float64)
                loss = ad.softmax_cross_entropy(ref.forward(xi), ep.y_inner[i : i + 1])
                grads = backward(loss, ref.param_list())
                sgd_step_inplace(ref.param_list(), grads, cfg.pretrain.eta_in)
        assert params_digest(trained) == params_digest(ref)

    def test_meta_equals_nonmeta_at_k0(self, env):
        ds, split = env
        cfg = tiny_config()
        img_shape = ds.image_shape
        rng = rng_stream(3, "k0-episode")
        x_rand = np.stack([ds.images[split.pretrain_classes[0]][0],
                           ds.images[split.pretrain_classes[1]][0]])
        ep = EpisodeBatch(
            x_inner=np.zeros((0,) + img_shape, dtype=np.float32),
            y_inner=np.zeros(0, dtype=np.int64),
            x_rand=x_rand, y_rand=np.array([0, 1]), class_index=0,
            class_id=split.pretrain_classes[0],
        )
        m1 = build_pretrain_model(cfg, split)
        m2 = build_pretrain_model(cfg, split)
        loss1 = _asb_episode_nonmeta(m1, m1.param_list(), ep, cfg)
        loss2 = _asb_episode_meta(m2, m2.param_list(), ep, cfg)
        g1 = backward(loss1, m1.param_list())
        g2 = backward(loss2, m2.param_list())
        for a, b in zip(g1, g2):
            np.testing.assert_array_equal(a.data, b.data)


class LinearModel:
    """Duck-typed stand-in: one linear layer over flattened inputs."""

    def __init__(self, w, b):
        self.params = {"fc.weight": Tensor(w.copy(), requires_grad=True),
                       "fc.bias": Tensor(b.copy(), requires_grad=True)}
        self.labels = {"fc.weight": "fc", "fc.bias": "fc"}

    @property
    def dtype(self):
        return self.params["fc.weight"].dtype

    @property
    def num_classes(self):
        return self.params["fc.weight"].shape[0]

    def param_list(self):
        return list(self.params.values())

    def param_names(self):
        return list(self.params.keys())

    def forward(self, batch, params=None):
        p = self.params if params is None else params
        flat = np.reshape(np.asarray(batch, dtype=self.dtype), (len(batch), -1))
        return ad.linear(Tensor(flat), p["fc.weight"], p["fc.bias"])


def _softmax(z):
    e = np.exp(z - z.max())
    return e / e.sum()


class TestMetaAsbCleanRoom:
    """S=2, K=2 on a 20-parameter linear model against a hand-unrolled
    implementation with exact cross-entropy Hessians."""

    def test_final_parameters_match(self):
        n_classes, feat = 4, 4  # 4x4 weight + 4 bias = 20 parameters
        rng = np.random.default_rng(0)
        images = [rng.standard_normal((6, 1, 2, 2)).astype(np.float64) for _ in range(n_classes)]
        ds = ClassDataset(name="toy", class_names=[f"c{i}" for i in range(n_classes)],
                          images=images, n_train=[4] * n_classes)
        cfg = tiny_config(pretrain={"method": "meta_asb", "outer_steps": 2, "k_inner": 2,
                                    "r_remember": 2, "eta_in": 0.1, "eta_out": 0.05,
                                    "eval_every": 100},
                          split={"n_pretrain": 4, "n_transfer": 0})
        split = build_split(cfg, ds)
        w0 = rng.standard_normal((n_classes, feat))
        b0 = np.zeros(n_classes)
        model = LinearModel(w0, b0)
        model, _ = pretrain_asb(cfg, ds, split, model=model)

        # clean-room replay: flat theta = [vec(W) row-major, b]
        theta = np.concatenate([w0.reshape(-1), b0])
        adam = ReferenceAdam(theta.size)
        ep_rng = rng_stream(cfg.pretrain_seed, "episodes")
        eta_in, eta_out = cfg.pretrain.eta_in, cfg.pretrain.eta_out

        def unpack(th):
            return th[: n_classes * feat].reshape(n_classes, feat), th[n_classes * feat :]

        def ce_grad_single(th, x, y):
            w, b = unpack(th)
            p = _softmax(w @ x + b)
            p[y] -= 1.0
            return np.concatenate([np.outer(p, x).reshape(-1), p])

        def ce_hessian_single(th, x, y):
            w, b = unpack(th)
            p = _softmax(w @ x + b)
            a = np.diag(p) - np.outer(p, p)
            xxt = np.outer(x, x)
            h_ww = np.kron(a, xxt)
            h_wb = np.kron(a, x[:, None])
            return np.block([[h_ww, h_wb], [h_wb.T, a]])

        def ce_grad_batch(th, xs, ys):
            return np.mean([ce_grad_single(th, x, y) for x, y in zip(xs, ys)], axis=0)

        for _ in range(2):
            ep = sample_episode(ds, split, 2, 2, ep_rng)
            cur = theta.copy()
            jac = np.eye(theta.size)
            for i in range(2):
                x = ep.x_inner[i].reshape(-1)
                y = ep.y_inner[i]
                h = ce_hessian_single(cur, x, y)
                g = ce_grad_single(cur, x, y)
                jac = (np.eye(theta.size) - eta_in * h) @ jac
                cur = cur - eta_in * g
            xs = [x.reshape(-1) for x in ep.x_outer]
            meta_grad = jac.T @ ce_grad_batch(cur, xs, ep.y_outer)
            theta = adam.step(theta, meta_grad, eta_out)

        w_ref, b_ref = unpack(theta)
        np.testing.assert_allclose(model.params["fc.weight"].data, w_ref, rtol=0, atol=1e-10)
        np.testing.assert_allclose(model.params["fc.bias"].data, b_ref, rtol=0, atol=1e-10)


class TestTransferSequential:
    def test_zero_lr_leaves_fresh_head(self, env):
        ds, split = env
        cfg = tiny_config(transfer={"beta": 0.0})
        model = build_pretrain_model(cfg, split)
        net, rows = transfer_sequential(model, cfg, ds, split)
        from zaplab.models import replace_head

        fresh = replace_head(model, len(split.transfer_classes),
                             rng_stream(cfg.transfer_seed, "transfer-head"))
        np.testing.assert_array_equal(net.params["fc.weight"].data, fresh.params["fc.weight"].data)
        np.testing.assert_array_equal(net.params["fc.bias"].data, fresh.params["fc.bias"].data)

    def test_frozen_conv_params_bit_identical(self, env):
        ds, split = env
        cfg = tiny_config(pretrain={"outer_steps": 3})
        model, _ = pretrain_asb(cfg, ds, split)
        before = clone_params(model)
        net, _ = transfer_sequential(model, cfg, ds, split)
        for n in model.conv_param_names():
            np.testing.assert_array_equal(net.params[n].data, before[n])
            np.testing.assert_array_equal(model.params[n].data, before[n])

    def test_unfrozen_updates_conv(self, env):
        ds, split = env
        cfg = tiny_config(transfer={"freeze": False, "beta": 0.05})
        model = build_pretrain_model(cfg, split)
        before = clone_params(model)
        net, _ = transfer_sequential(model, cfg, ds, split)
        assert any((net.params[n].data != before[n]).any() for n in net.conv_param_names())
        # the source model itself must stay untouched
        for n in model.param_names():
            np.testing.assert_array_equal(model.params[n].data, before[n])

    def test_above_chance_after_pretraining(self, env):
        ds, split = env
        cfg = tiny_config(pretrain={"outer_steps": 40, "zap": "episode", "k_inner": 3},
                          transfer={"beta": 0.01})
        model, _ = pretrain_asb(cfg, ds, split)
        _, rows = transfer_sequential(model, cfg, ds, split)
        final = [r for r in rows if r.get("record") == "metrics"][-1]
        assert final["test_acc"] > 1.0 / len(split.transfer_classes)

    def test_overlap_rejected(self, env):
        ds, split = env
        from zaplab.data import SplitPlan

        # overlap is refused at plan construction already
        with pytest.raises(ValueError):
            SplitPlan(pretrain_classes=split.pretrain_classes,
                      transfer_classes=split.pretrain_classes[:2] + split.transfer_classes[:1],
                      seed=0)
        # and the protocol itself re-checks, for plans built by other means
        bad = object.__new__(SplitPlan)
        object.__setattr__(bad, "pretrain_classes", split.pretrain_classes)
        object.__setattr__(bad, "transfer_classes", split.pretrain_classes[:1])
        object.__setattr__(bad, "seed", 0)
        cfg = tiny_config()
        model = build_pretrain_model(cfg, split)
        with pytest.raises(ValueError):
            transfer_sequential(model, cfg, ds, bad)

    def test_eval_cadence_rows(self, env):
        ds, split = env
        cfg = tiny_config(transfer={"eval_every_classes": 2})
        model = build_pretrain_model(cfg, split)
        _, rows = transfer_sequential(model, cfg, ds, split)
        m = [r for r in rows if r.get("record") == "metrics"]
        assert [r["classes_seen"] for r in m] == [2, 4]
        assert all(r["step"] == r["classes_seen"] * 6 for r in m)  # 6 train imgs/class


class TestTransferIid:
    def test_zero_epochs_single_row(self, env):
        ds, split = env
        cfg = tiny_config(transfer={"mode": "iid", "epochs": 0})
        model = build_pretrain_model(cfg, split)
        _, rows = transfer_iid(model, cfg, ds, split)
        m = [r for r in rows if r.get("record") == "metrics"]
        assert len(m) == 1 and m[0]["step"] == 0

    def test_training_improves_train_accuracy(self, env):
        ds, split = env
        cfg = tiny_config(transfer={"mode": "iid", "epochs": 5, "eval_every_batches": 0,
                                    "adam_lr": 0.003})
        model = build_pretrain_model(cfg, split)
        _, rows = transfer_iid(model, cfg, ds, split)
        m = [r for r in rows if r.get("record") == "metrics"]
        assert m[-1]["train_acc"] > m[0]["train_acc"]

    def test_same_examples_as_sequential(self, env):
        # both protocols draw the same few-shot training images per class
        from zaplab.protocols import _transfer_train_indices

        ds, split = env
        idx_a = _transfer_train_indices(ds, split.transfer_classes[0], 3, transfer_seed=5)
        idx_b = _transfer_train_indices(ds, split.transfer_classes[0], 3, transfer_seed=5)
        np.testing.assert_array_equal(idx_a, idx_b)


class TestEvaluationPurity:
    def test_eval_mutates_nothing(self, env):
        ds, split = env
        cfg = tiny_config()
        model = build_pretrain_model(cfg, split)
        adam = AdamState(model.param_list())
        adam_step(adam, model.param_list(),
                  [Tensor(np.ones_like(p.data)) for p in model.param_list()], 0.01)
        digest_before = params_digest(model)
        adam_bytes = hashlib.sha256(b"".join(m.tobytes() for m in adam.m + adam.v)).hexdigest()
        from zaplab.data import split_arrays

        x, y = split_arrays(ds, split.pretrain_classes, "val")
        evaluate_classifier(model, x, y)
        assert params_digest(model) == digest_before
        assert hashlib.sha256(b"".join(m.tobytes() for m in adam.m + adam.v)).hexdigest() == adam_bytes


class TestReplayDeterminism:
    def test_asb_zap_replay_bit_identical(self, env):
        ds, split = env
        cfg = tiny_config(pretrain={"outer_steps": 8, "zap": "episode"})
        m1, rows1 = pretrain_asb(cfg, ds, split)
        m2, rows2 = pretrain_asb(cfg, ds, split)
        assert params_digest(m1) == params_digest(m2)
        assert strip_volatile(rows1) == strip_volatile(rows2)

    def test_full_trial_replay(self, env):
        ds, split = env
        cfg = tiny_config(pretrain={"outer_steps": 4})
        model1, _ = pretrain_asb(cfg, ds, split)
        model2, _ = pretrain_asb(cfg, ds, split)
        _, t1 = transfer_sequential(model1, cfg, ds, split)
        _, t2 = transfer_sequential(model2, cfg, ds, split)
        assert strip_volatile(t1) == strip_volatile(t2)


class TestMannWhitney:
    def test_separated_samples_exact(self):
        u, p = mann_whitney_u([1, 2, 3], [4, 5, 6])
        assert u == 0.0 and abs(p - 0.1) < 1e-12

    def test_identical_samples(self):
        _, p = mann_whitney_u([1.0, 2.0, 3.0], [1.0, 2.0, 3.0])
        assert p == 1.0

    def test_shuffle_invariance(self):
        a = [3.1, 0.2, 5.5, 2.2, 4.0]
        b = [1.0, 2.5, 0.7, 3.3]
        u1, p1 = mann_whitney_u(a, b)
        u2, p2 = mann_whitney_u(list(reversed(a)), list(reversed(b)))
        assert u1 == u2 and p1 == p2

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            mann_whitney_u([], [1.0])

    def test_normal_approximation_branch(self):
        rng = np.random.default_rng(0)
        a = rng.standard_normal(30) + 1.5
        b = rng.standard_normal(30)
        u, p = mann_whitney_u(a, b)
        assert 0 < p < 0.01

    def test_agrees_with_scipy_on_large_samples(self):
        from scipy.stats import mannwhitneyu

        rng = np.random.default_rng(1)
        a = rng.standard_normal(25) + 0.5
        b = rng.standard_normal(28)
        u, p = mann_whitney_u(a, b)
        ref = mannwhitneyu(a, b, alternative="two-sided", method="asymptotic")
        assert abs(u - ref.statistic) < 1e-9
        assert abs(p - ref.pvalue) < 0.02


class TestSweep:
    def test_select_best_from_planted_summaries(self):
        rows = []
        for label, lr, accs in (("m_a", 0.01, [0.5, 0.6]), ("m_a", 0.1, [0.8, 0.9]),
                                ("m_b", 0.01, [0.7, 0.7]), ("m_b", 0.1, [0.2, 0.3])):
            for i, acc in enumerate(accs):
                rows.append({"label": label, "pretrain_lr": 0.001, "transfer_lr": lr,
                             "pretrain_seed": 0, "transfer_seed": i,
                             "pretrain_acc": 0.5, "final_test_acc": acc})
        report = select_best(rows)
        assert report["m_a"]["transfer_lr"] == 0.1 and abs(report["m_a"]["mean"] - 0.85) < 1e-12
        assert report["m_b"]["transfer_lr"] == 0.01 and report["m_b"]["n"] == 2

    def test_single_trial_sweep_equals_run(self, env):
        cfg = tiny_config(pretrain={"outer_steps": 3})
        report, summaries = sweep_and_select([("only", cfg)], [cfg.pretrain.eta_out],
                                             [cfg.transfer.beta], [cfg.pretrain_seed],
                                             [cfg.transfer_seed], workers=1)
        assert len(summaries) == 1
        direct = run_trial(copy.deepcopy(cfg))
        assert abs(summaries[0]["final_test_acc"] - direct["final_test_acc"]) < 1e-12
        assert report["only"]["n"] == 1

    def test_failed_trial_aborts_with_identity(self):
        from zaplab.protocols import SweepError

        cfg = tiny_config()
        cfg.split.n_pretrain = 100  # impossible split
        with pytest.raises(SweepError, match="bad_variant"):
            sweep_and_select([("bad_variant", cfg)], [0.01], [0.01], [0], [0], workers=1)
