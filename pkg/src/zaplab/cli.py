"""Non-interactive command line: pretrain, transfer, sweep, compare, plot,
gradcheck.

Every run writes a manifest with the resolved config snapshot, and every
output embeds the snapshot hash; compare refuses to pool runs whose
architecture or dataset identities differ. Exit code is 0 iff everything
succeeded. The environment variable ZAPLAB_DATA_ROOT overrides the dataset
root in configs.
"""

from __future__ import annotations

import argparse
import json
import os
import subprocess
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import metrics as mx
from . import protocols as pr
from .config import config_from_dict, load_config
from .models import load_checkpoint, save_checkpoint, arch_preset
from .runtime import tune_process

DATA_ROOT_ENV = "ZAPLAB_DATA_ROOT"


def _revision():
    try:
        out = subprocess.run(["git", "rev-parse", "--short", "HEAD"], capture_output=True,
                             text=True, timeout=10)
        if out.returncode == 0:
            return out.stdout.strip()
    except Exception:
        pass
    return "unknown"


def _apply_data_root(config, override):
    root = override or os.environ.get(DATA_ROOT_ENV, "")
    if root:
        config.data.root = root
    return config


def _manifest(config, config_path, out_dir, seeds, trials):
    return {
        "config_path": str(config_path),
        "config": config.to_dict(),
        "config_hash": config.hash(),
        "revision": _revision(),
        "seeds": seeds,
        "out_dir": str(out_dir),
        "trials": trials,
    }


def _write_json(path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _dataset_and_split(config):
    dataset = pr.build_dataset(config)
    split = pr.build_split(config, dataset)
    return dataset, split


def cmd_pretrain(args):
    config = _apply_data_root(load_config(args.config), args.data_root)
    out = Path(args.out or f"runs/pretrain-{config.hash()}")
    out.mkdir(parents=True, exist_ok=True)
    dataset, split = _dataset_and_split(config)
    seeds = {"pretrain_seed": config.pretrain_seed, "transfer_seed": config.transfer_seed}

    model, rows = pr.run_pretrain(config, dataset, split)
    header = mx.header_row(config.hash(), seeds)
    mx.write_metrics(out / "metrics.ndjson", [header] + rows)

    meta = {
        "config_hash": config.hash(),
        "config": config.to_dict(),
        "seeds": seeds,
        "dataset_fingerprint": dataset.fingerprint(),
    }
    save_checkpoint(model, out / "checkpoint.npz", meta=meta)
    final = [r for r in rows if r.get("record") == "metrics"][-1]
    summary = {
        "kind": "pretrain",
        "method": config.pretrain.method,
        "zap": config.pretrain.zap,
        "config_hash": config.hash(),
        "dataset_fingerprint": dataset.fingerprint(),
        "arch": asdict(model.spec),
        "seeds": seeds,
        "final_train_acc": final["train_acc"],
        "final_val_acc": final["test_acc"],
        "metrics_rows": len(rows),
    }
    _write_json(out / "summary.json", summary)
    _write_json(out / "manifest.json", _manifest(config, args.config, out, seeds,
                                                 [{"id": "pretrain", "status": "done"}]))
    print(f"pretrain done: val acc {final['test_acc']:.3f} -> {out}")
    return 0


def cmd_transfer(args):
    config = _apply_data_root(load_config(args.config), args.data_root)
    model, ckpt_meta = load_checkpoint(args.checkpoint)
    want = arch_preset(config.arch, num_classes=model.spec.num_classes,
                       channels=config.channels or None)
    if (want.input_shape, want.num_blocks, want.channels, want.final_pool) != (
            model.spec.input_shape, model.spec.num_blocks, model.spec.channels,
            model.spec.final_pool):
        raise SystemExit(
            f"checkpoint architecture {asdict(model.spec)} does not match config preset "
            f"{config.arch!r} ({asdict(want)})")
    out = Path(args.out or f"runs/transfer-{config.hash()}")
    out.mkdir(parents=True, exist_ok=True)
    dataset, split = _dataset_and_split(config)
    if ckpt_meta.get("dataset_fingerprint") and ckpt_meta["dataset_fingerprint"] != dataset.fingerprint():
        raise SystemExit("checkpoint was pre-trained on a different dataset")
    seeds = {"pretrain_seed": config.pretrain_seed, "transfer_seed": config.transfer_seed}

    _, rows = pr.run_transfer(model, config, dataset, split)
    mx.write_metrics(out / "metrics.ndjson", [mx.header_row(config.hash(), seeds)] + rows)
    final = [r for r in rows if r.get("record") == "metrics"][-1]
    summary = {
        "kind": "transfer",
        "mode": config.transfer.mode,
        "method": ckpt_meta.get("config", {}).get("pretrain", {}).get("method", "unknown"),
        "zap": ckpt_meta.get("config", {}).get("pretrain", {}).get("zap", "unknown"),
        "config_hash": config.hash(),
        "pretrain_config_hash": ckpt_meta.get("config_hash", "unknown"),
        "dataset_fingerprint": dataset.fingerprint(),
        "arch": asdict(model.spec),
        "seeds": seeds,
        "final_train_acc": final["train_acc"],
        "final_test_acc": final["test_acc"],
        "metrics_rows": len(rows),
    }
    _write_json(out / "summary.json", summary)
    _write_json(out / "manifest.json", _manifest(config, args.config, out, seeds,
                                                 [{"id": "transfer", "status": "done"}]))
    print(f"transfer done: train {final['train_acc']:.3f} test {final['test_acc']:.3f} -> {out}")
    return 0


def cmd_sweep(args):
    with open(args.config) as fh:
        import yaml

        raw = yaml.safe_load(fh) or {}
    sweep = raw.pop("sweep", None)
    if not sweep:
        raise SystemExit("sweep config needs a 'sweep:' section")
    base = raw

    def merge(dst, src):
        out = dict(dst)
        for k, v in src.items():
            out[k] = merge(out.get(k, {}), v) if isinstance(v, dict) and isinstance(out.get(k), dict) else v
        return out

    variants = []
    for var in sweep.get("variants", [{"label": "base"}]):
        var = dict(var)
        label = var.pop("label", "base")
        cfg = config_from_dict(merge(base, var))
        _apply_data_root(cfg, args.data_root)
        variants.append((label, cfg))

    out = Path(args.out or "runs/sweep")
    out.mkdir(parents=True, exist_ok=True)
    workers = args.workers or os.cpu_count() or 1
    try:
        report, summaries = pr.sweep_and_select(
            variants,
            sweep.get("pretrain_lrs", [variants[0][1].pretrain.eta_out]),
            sweep.get("transfer_lrs", [0.01]),
            sweep.get("pretrain_seeds", [0]),
            sweep.get("transfer_seeds", [0]),
            workers=workers,
        )
    except pr.SweepError as e:
        print(f"sweep aborted: {e}", file=sys.stderr)
        return 1
    _write_json(out / "summaries.json", summaries)
    _write_json(out / "report.json", report)
    trials = sorted({f"{s['label']}/pre_lr={s['pretrain_lr']}/seed={s['pretrain_seed']}"
                     for s in summaries})
    _write_json(out / "manifest.json", _manifest(variants[0][1], args.config, out,
                                                 {"pretrain_seeds": sweep.get("pretrain_seeds", [0]),
                                                  "transfer_seeds": sweep.get("transfer_seeds", [0])},
                                                 [{"id": t, "status": "done"} for t in trials]))
    lines = [f"{'method':24s} {'transfer lr':>11s} {'mean':>7s} {'std':>6s} {'n':>3s}"]
    for label, rep in sorted(report.items()):
        lines.append(f"{label:24s} {rep['transfer_lr']:>11g} {rep['mean']:>7.3f} "
                     f"{rep['std']:>6.3f} {rep['n']:>3d}")
    table = "\n".join(lines)
    (out / "table.txt").write_text(table + "\n")
    print(table)
    return 0


def _collect_summaries(dirs):
    groups = []
    for d in dirs:
        d = Path(d)
        files = sorted(d.rglob("summary.json"))
        rows = []
        for f in files:
            s = json.loads(f.read_text())
            if "final_test_acc" in s:
                rows.append(s)
        if len(rows) < 2:
            raise SystemExit(f"{d}: need at least 2 transfer trials, found {len(rows)}")
        groups.append((d.name, rows))
    ident = {(s.get("dataset_fingerprint"), json.dumps(s.get("arch"), sort_keys=True))
             for _, rows in groups for s in rows}
    if len(ident) > 1:
        raise SystemExit("refusing to pool trials with differing architecture or dataset hashes")
    return groups


def cmd_compare(args):
    groups = _collect_summaries(args.dirs)
    lines = [f"{'method':24s} {'transfer mean':>13s} {'std':>6s} {'n':>3s}"]
    finals = {}
    for name, rows in groups:
        accs = [s["final_test_acc"] for s in rows]
        finals[name] = accs
        lines.append(f"{name:24s} {np.mean(accs):>13.3f} {np.std(accs):>6.3f} {len(accs):>3d}")
    lines.append("")
    lines.append("pairwise two-sided Mann-Whitney U:")
    names = [n for n, _ in groups]
    report = {"methods": {n: {"mean": float(np.mean(finals[n])), "std": float(np.std(finals[n])),
                              "n": len(finals[n])} for n in names},
              "pairwise": {}}
    for i in range(len(names)):
        for j in range(i + 1, len(names)):
            u, p = pr.mann_whitney_u(finals[names[i]], finals[names[j]])
            lines.append(f"  {names[i]} vs {names[j]}: U={u:.1f} p={p:.4g}")
            report["pairwise"][f"{names[i]} vs {names[j]}"] = {"U": float(u), "p": float(p)}
    text = "\n".join(lines)
    print(text)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        _write_json(out / "compare.json", report)
        (out / "compare.txt").write_text(text + "\n")
    return 0


def cmd_plot(args):
    from .plots import plot_finals, plot_trajectories

    out = Path(args.out or ".")
    out.mkdir(parents=True, exist_ok=True)
    runs = []
    finals = []
    for d in args.dirs:
        d = Path(d)
        metric_files = sorted(d.rglob("metrics.ndjson"))
        summary_files = sorted(d.rglob("summary.json"))
        if not metric_files:
            raise SystemExit(f"{d}: no metrics.ndjson found")
        summaries = [json.loads(f.read_text()) for f in summary_files]
        transfer = [s for s in summaries if "final_test_acc" in s]
        zap = any(s.get("zap") not in ("off", None, "unknown") for s in summaries)
        rows = [r for f in metric_files for r in mx.read_metrics(f)]
        runs.append({"label": d.name, "zap": zap, "rows": rows})
        if transfer:
            finals.append({
                "label": d.name, "zap": zap,
                "transfer_accs": [s["final_test_acc"] for s in transfer],
                "pretrain_accs": [s.get("final_val_acc", s.get("pretrain_acc", 0.0))
                                  for s in summaries if "final_val_acc" in s or "pretrain_acc" in s]
                                 or [0.0],
            })
    plot_trajectories(runs, out / "trajectories.svg")
    made = [str(out / "trajectories.svg")]
    if finals:
        plot_finals(finals, out / "finals.svg")
        made.append(str(out / "finals.svg"))
    print("wrote " + ", ".join(made))
    return 0


def cmd_gradcheck(args):
    from .gradcheck import run_all

    failures = 0
    for name, ok, err in run_all(seed=args.seed):
        print(f"{'PASS' if ok else 'FAIL'}  {name:28s} rel err {err:.3e}")
        failures += not ok
    print(f"{failures} failure(s)" if failures else "all gradient checks passed")
    return 1 if failures else 0


def build_parser():
    p = argparse.ArgumentParser(prog="zaplab",
                                description="zapping / ASB pre-training and transfer lab")
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("pretrain", help="pre-train a model per a config file")
    sp.add_argument("config")
    sp.add_argument("--out")
    sp.add_argument("--data-root")
    sp.set_defaults(fn=cmd_pretrain)

    sp = sub.add_parser("transfer", help="transfer a checkpoint to unseen classes")
    sp.add_argument("checkpoint")
    sp.add_argument("config")
    sp.add_argument("--out")
    sp.add_argument("--data-root")
    sp.set_defaults(fn=cmd_transfer)

    sp = sub.add_parser("sweep", help="run a learning-rate/seed grid and select the best")
    sp.add_argument("config")
    sp.add_argument("--out")
    sp.add_argument("--workers", type=int, default=0)
    sp.add_argument("--data-root")
    sp.set_defaults(fn=cmd_sweep)

    sp = sub.add_parser("compare", help="mean/std and significance across method dirs")
    sp.add_argument("dirs", nargs="+")
    sp.add_argument("--out")
    sp.set_defaults(fn=cmd_compare)

    sp = sub.add_parser("plot", help="trajectory and final-accuracy charts")
    sp.add_argument("dirs", nargs="+")
    sp.add_argument("--out")
    sp.set_defaults(fn=cmd_plot)

    sp = sub.add_parser("gradcheck", help="run the finite-difference oracle suites")
    sp.add_argument("--seed", type=int, default=0)
    sp.set_defaults(fn=cmd_gradcheck)
    return p


def main(argv=None):
    tune_process()
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (ValueError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
