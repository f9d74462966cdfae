"""Acceptance criteria, one test per criterion.

Criteria 5 and 6 share one batch of pre-training runs (four methods, six seed
pairs each) executed in parallel worker processes; the calibrated scale is 50
pretrain / 20 transfer classes on the synthetic glyph set with a 16-channel
3-block network, S=2000 episodes, K=10, R=32. Transfer learning rates were
fixed once by calibration (sequential beta 0.003; five-epoch fine-tuning at
Adam 3e-4).
"""

import os
import time
from concurrent.futures import ProcessPoolExecutor

import numpy as np
import pytest

from zaplab.config import config_from_dict
from zaplab.data import load_imagefolder, make_split
from zaplab.gradcheck import meta_checks, network_check, op_checks
from zaplab.metrics import dump_rows, strip_volatile
from zaplab.models import ArchitectureSpec, build_convnet, clone_params
from zaplab.protocols import (
    build_dataset,
    build_pretrain_model,
    build_split,
    mann_whitney_u,
    pretrain_asb,
    run_pretrain,
    run_transfer,
    transfer_iid,
    transfer_sequential,
)
from zaplab.runtime import tune_process
from zaplab.seeding import rng_stream
from zaplab.zapping import zap_class

tune_process()

DATA = {"n_classes": 70, "n_per_class": 20, "seed": 11}
SPLIT = {"n_pretrain": 50, "n_transfer": 20, "seed": 3}
SEQ_BETA = 0.003
FT_LR = 3e-4
SEED_PAIRS = [(101 + i, 201 + i) for i in range(6)]
METHODS = {
    "iid": {"method": "iid", "zap": "off"},
    "iid_zap": {"method": "iid", "zap": "iid", "zap_k": "all", "zap_every_epochs": 1},
    "asb": {"method": "asb", "zap": "off"},
    "asb_zap": {"method": "asb", "zap": "episode"},
}


def ordering_config(method_key, pre_seed, t_seed):
    pre = {"eta_in": 0.01, "eta_out": 0.001, "k_inner": 10, "r_remember": 32,
           "outer_steps": 2000, "epochs": 20, "batch_size": 32, "eval_every": 2000}
    pre.update(METHODS[method_key])
    return config_from_dict({
        "data": DATA, "split": SPLIT,
        "pretrain": pre,
        "transfer": {"mode": "sequential", "freeze": True, "beta": SEQ_BETA,
                     "eval_every_classes": 20},
        "pretrain_seed": pre_seed, "transfer_seed": t_seed,
    })


def _ordering_job(args):
    import copy

    method_key, pre_seed, t_seed = args
    cfg = ordering_config(method_key, pre_seed, t_seed)
    ds = build_dataset(cfg)
    split = build_split(cfg, ds)
    model, pre_rows = run_pretrain(cfg, ds, split)
    pre_final = [r for r in pre_rows if r.get("record") == "metrics"][-1]

    _, seq_rows = transfer_sequential(model, cfg, ds, split)
    seq_final = [r for r in seq_rows if r.get("record") == "metrics"][-1]

    ft = copy.deepcopy(cfg)
    ft.transfer.mode = "iid"
    ft.transfer.epochs = 5
    ft.transfer.adam_lr = FT_LR
    ft.transfer.eval_every_batches = 0
    _, iid_rows = transfer_iid(model, ft, ds, split)
    iid_final = [r for r in iid_rows if r.get("record") == "metrics"][-1]
    return {"method": method_key, "seeds": (pre_seed, t_seed),
            "pretrain_acc": pre_final["test_acc"],
            "seq_acc": seq_final["test_acc"], "iid_acc": iid_final["test_acc"]}


@pytest.fixture(scope="module")
def ordering_runs():
    jobs = [(m, p, t) for m in METHODS for (p, t) in SEED_PAIRS]
    t0 = time.perf_counter()
    workers = min(2, os.cpu_count() or 1)
    results = {m: [] for m in METHODS}
    with ProcessPoolExecutor(max_workers=workers) as pool:
        for res in pool.map(_ordering_job, jobs):
            results[res["method"]].append(res)
    elapsed = time.perf_counter() - t0
    return results, elapsed


class TestCriterion1GradientSuite:
    def test_all_ops_and_network_match_finite_differences(self):
        t0 = time.perf_counter()
        results = op_checks(seed=0)
        results.append(network_check(seed=0, channels=8, size=14))
        elapsed = time.perf_counter() - t0
        failures = [(n, e) for n, ok, e in results if not ok]
        assert not failures, f"gradient failures: {failures}"
        assert elapsed < 120, f"gradient suite took {elapsed:.0f}s (budget 120s)"
        print(f"\nACCEPTANCE 1 PASS gradient suite ({len(results)} checks, {elapsed:.1f}s)")


class TestCriterion2MetaGradientSuite:
    def test_meta_gradients_quadratic_and_fd(self):
        t0 = time.perf_counter()
        results = meta_checks(seed=0)
        elapsed = time.perf_counter() - t0
        failures = [(n, e) for n, ok, e in results if not ok]
        assert not failures, f"meta-gradient failures: {failures}"
        assert elapsed < 60, f"meta suite took {elapsed:.0f}s (budget 60s)"
        print(f"\nACCEPTANCE 2 PASS meta-gradient suite ({len(results)} checks, {elapsed:.1f}s)")


class TestCriterion3ZapLocality:
    def test_thousand_zaps_touch_only_their_rows(self):
        spec = ArchitectureSpec(input_shape=(1, 11, 11), num_blocks=3, num_classes=6,
                                channels=2, final_pool=False)
        model = build_convnet(spec, np.random.default_rng(0))
        assert model.spec.feature_dim == 8
        rng = np.random.default_rng(12345)
        pooled = []
        for _ in range(1000):
            target = int(rng.integers(6))
            before = clone_params(model)
            zap_class(model, target, rng)
            after = clone_params(model)
            for name in model.param_names():
                diff = before[name] != after[name]
                if name == "fc.weight":
                    rows = np.nonzero(diff.any(axis=1))[0]
                    assert set(rows.tolist()) <= {target}
                elif name == "fc.bias":
                    assert set(np.nonzero(diff)[0].tolist()) <= {target}
                else:
                    assert not diff.any()
            assert after["fc.bias"][target] == 0.0
            pooled.append(after["fc.weight"][target].copy())
        pooled = np.concatenate(pooled)
        target_std = np.sqrt(2.0 / 8)
        rel = abs(pooled.std() - target_std) / target_std
        assert rel < 0.02, f"pooled std off by {rel:.3%}"
        print(f"\nACCEPTANCE 3 PASS zap locality (1000 events, std within {rel:.3%})")


class TestCriterion4ProtocolReduction:
    def test_asb_reduces_to_plain_sgd_and_frozen_transfer_locality(self):
        from zaplab import autodiff as ad
        from zaplab.autodiff import backward
        from zaplab.data import sample_episode
        from zaplab.optim import sgd_step_inplace

        cfg = config_from_dict({
            "data": {"n_classes": 20, "n_per_class": 8, "seed": 4},
            "split": {"n_pretrain": 12, "n_transfer": 5, "seed": 2},
            "channels": 4, "dtype": "float64",
            "pretrain": {"method": "asb", "zap": "off", "eta_in": 0.02, "eta_out": 0.0,
                         "k_inner": 3, "r_remember": 4, "outer_steps": 12, "eval_every": 100},
            "transfer": {"mode": "sequential", "freeze": True, "beta": 0.01,
                         "eval_every_classes": 5},
        })
        ds = build_dataset(cfg)
        split = build_split(cfg, ds)
        trained, _ = pretrain_asb(cfg, ds, split)

        ref = build_pretrain_model(cfg, split)
        rng = rng_stream(cfg.pretrain_seed, "episodes")
        for _ in range(12):
            ep = sample_episode(ds, split, 3, 4, rng)
            for i in range(3):
                loss = ad.softmax_cross_entropy(
                    ref.forward(ep.x_inner[i : i + 1].astype(np.float64)), ep.y_inner[i : i + 1])
                grads = backward(loss, ref.param_list())
                sgd_step_inplace(ref.param_list(), grads, 0.02)
        for n in trained.param_names():
            np.testing.assert_array_equal(trained.params[n].data, ref.params[n].data)

        before = clone_params(trained)
        net, _ = transfer_sequential(trained, cfg, ds, split)
        for n in trained.conv_param_names():
            np.testing.assert_array_equal(net.params[n].data, before[n])
        print("\nACCEPTANCE 4 PASS protocol reduction + frozen-transfer locality (bitwise)")


class TestCriterion5SequentialOrdering:
    def test_zap_beats_nozap_in_frozen_sequential_transfer(self, ordering_runs):
        results, elapsed = ordering_runs
        seq = {m: [r["seq_acc"] for r in rs] for m, rs in results.items()}
        msg = []
        for zap_m, plain_m in (("asb_zap", "asb"), ("iid_zap", "iid")):
            a, b = seq[zap_m], seq[plain_m]
            u, p = mann_whitney_u(a, b)
            msg.append(f"{zap_m} {np.mean(a):.3f}±{np.std(a):.3f} vs "
                       f"{plain_m} {np.mean(b):.3f}±{np.std(b):.3f} (p={p:.4g})")
            assert np.mean(a) > np.mean(b), f"ordering violated: {msg[-1]}"
            assert p < 0.05, f"not significant: {msg[-1]}"
        assert elapsed < 45 * 60, f"ordering runs took {elapsed/60:.1f} min (budget 45)"
        print(f"\nACCEPTANCE 5 PASS sequential ordering ({'; '.join(msg)}; "
              f"runs {elapsed/60:.1f} min)")


class TestCriterion6FinetuneOrdering:
    def test_zap_at_least_nozap_in_iid_transfer(self, ordering_runs):
        results, _ = ordering_runs
        ft = {m: [r["iid_acc"] for r in rs] for m, rs in results.items()}
        msg = []
        for zap_m, plain_m in (("asb_zap", "asb"), ("iid_zap", "iid")):
            a, b = ft[zap_m], ft[plain_m]
            u, p = mann_whitney_u(a, b)
            msg.append(f"{zap_m} {np.mean(a):.3f}±{np.std(a):.3f} vs "
                       f"{plain_m} {np.mean(b):.3f}±{np.std(b):.3f} (p={p:.4g})")
            assert np.mean(a) >= np.mean(b), f"ordering violated: {msg[-1]}"
            assert p < 0.05, f"not significant: {msg[-1]}"
        print(f"\nACCEPTANCE 6 PASS fine-tuning ordering ({'; '.join(msg)})")


class TestCriterion7Determinism:
    def test_replayed_trial_bit_identical_metrics(self):
        cfg = config_from_dict({
            "data": {"n_classes": 16, "n_per_class": 8, "seed": 6},
            "split": {"n_pretrain": 10, "n_transfer": 4, "seed": 1},
            "channels": 4,
            "pretrain": {"method": "asb", "zap": "episode", "k_inner": 2,
                         "r_remember": 3, "outer_steps": 10, "eval_every": 5},
            "transfer": {"mode": "sequential", "beta": 0.01, "eval_every_classes": 2},
        })

        def run_once():
            ds = build_dataset(cfg)
            split = build_split(cfg, ds)
            model, pre = run_pretrain(cfg, ds, split)
            _, tr = run_transfer(model, cfg, ds, split)
            # wall-clock is the one observational field; everything else must
            # replay exactly
            return dump_rows(strip_volatile(pre + tr))

        assert run_once() == run_once()
        print("\nACCEPTANCE 7 PASS replay determinism (metrics streams byte-identical)")


class TestCriterion8OptionalOmniglot:
    def test_reduced_omniglot_direction(self):
        root = os.environ.get("ZAPLAB_DATA_ROOT", "")
        omni = os.path.join(root, "omniglot") if root else ""
        if not omni or not os.path.isdir(omni):
            pytest.skip("Omniglot not available locally (set ZAPLAB_DATA_ROOT)")
        ds = load_imagefolder(omni, "omniglot")
        split = make_split(ds, min(200, ds.num_classes - 50), 50, seed=0)
        finals = {}
        for zap in ("episode", "off"):
            cfg = config_from_dict({
                "arch": "omniglot", "channels": 64,
                "data": {"preset": "omniglot", "root": omni},
                "split": {"n_pretrain": len(split.pretrain_classes),
                          "n_transfer": len(split.transfer_classes)},
                "pretrain": {"method": "asb", "zap": zap, "k_inner": 10, "r_remember": 32,
                             "outer_steps": 2000, "eval_every": 2000},
                "transfer": {"mode": "sequential", "freeze": True, "beta": 0.003,
                             "eval_every_classes": 50},
            })
            model, _ = run_pretrain(cfg, ds, split)
            _, rows = transfer_sequential(model, cfg, ds, split)
            finals[zap] = [r for r in rows if r.get("record") == "metrics"][-1]["test_acc"]
        assert finals["episode"] > finals["off"]
        print(f"\nACCEPTANCE 8 PASS omniglot direction (zap {finals['episode']:.3f} > "
              f"no-zap {finals['off']:.3f})")
