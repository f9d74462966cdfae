"""Continual (sequential) transfer: one SGD step per image, classes in a row.

A pre-trained model gets a fresh random head sized for unseen classes, then
sees those classes one at a time, one example per update. Accuracy on
everything trained so far and on held-out examples of seen classes tracks
how much earlier classes are forgotten while new ones are learned.
"""

import copy
from pathlib import Path

from zaplab.config import config_from_dict
from zaplab.plots import plot_trajectories
from zaplab.protocols import build_dataset, build_split, run_pretrain, transfer_sequential

base = config_from_dict({
    "data": {"n_classes": 40, "n_per_class": 20, "seed": 11},
    "split": {"n_pretrain": 28, "n_transfer": 12, "seed": 3},
    "pretrain": {"method": "asb", "zap": "episode", "k_inner": 10, "r_remember": 32,
                 "outer_steps": 400, "eval_every": 400},
    "transfer": {"mode": "sequential", "freeze": True, "beta": 0.003,
                 "eval_every_classes": 2},
})

dataset = build_dataset(base)
split = build_split(base, dataset)

runs = []
for label, zap in (("asb+zap", "episode"), ("asb", "off")):
    cfg = copy.deepcopy(base)
    cfg.pretrain.zap = zap
    model, _ = run_pretrain(cfg, dataset, split)
    _, rows = transfer_sequential(model, cfg, dataset, split)
    runs.append({"label": label, "zap": zap != "off", "rows": rows})
    print(f"\n{label}: frozen sequential transfer over "
          f"{len(split.transfer_classes)} unseen classes")
    print(f"{'classes seen':>12s} {'train-so-far':>13s} {'held-out':>9s}")
    for r in rows:
        if r.get("record") == "metrics":
            print(f"{r['classes_seen']:>12d} {r['train_acc']:>13.3f} {r['test_acc']:>9.3f}")

out = Path("demo_outputs")
out.mkdir(exist_ok=True)
plot_trajectories(runs, out / "sequential_transfer.svg")
print(f"\nwrote {out / 'sequential_transfer.svg'} (dashed line = zapped)")
