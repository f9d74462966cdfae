"""Pre-training and transfer protocols.

Pre-training comes in three flavors: plain i.i.d. mini-batch training,
alternating sequential-and-batch episodes (ASB), and the meta variant that
differentiates the batch update through the unrolled sequential steps
back to the episode's starting parameters. Each can run with or without
zapping. Transfer evaluates a pre-trained feature extractor under a fresh
classifier head, either continually (one SGD step per image, classes in
sequence) or as standard i.i.d. fine-tuning.
"""

from __future__ import annotations

import copy
import itertools
import math
import time
from concurrent.futures import ProcessPoolExecutor

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, backward, no_grad
from .config import ExperimentConfig
from .data import sample_episode, split_arrays, synth_glyphs, load_imagefolder, make_split
from .metrics import MetricsRecord, zap_event
from .models import arch_preset, build_convnet, replace_head
from .optim import AdamState, adam_step, sgd_step_inplace, sgd_step_functional
from .runtime import tune_process
from .seeding import rng_stream
from .zapping import ZapPolicy, zap_class, zap_iid


def _np_dtype(config):
    return np.float32 if config.dtype == "float32" else np.float64


def build_dataset(config):
    """Materialize the dataset named by the config's data section."""
    d = config.data
    cap = d.train_per_class or None
    if d.preset == "synth":
        return synth_glyphs(d.n_classes, d.n_per_class, image_size=d.image_size,
                            seed=d.seed, train_per_class=cap)
    if d.preset in ("omniglot", "mini-imagenet"):
        if not d.root:
            raise FileNotFoundError(f"dataset preset {d.preset!r} needs data.root (or the env override)")
        return load_imagefolder(d.root, d.preset, train_per_class=cap)
    if d.preset == "imagefolder":
        if not d.root or not d.ingest:
            raise ValueError("imagefolder dataset needs data.root and data.ingest")
        return load_imagefolder(d.root, d.ingest, train_per_class=cap)
    raise ValueError(f"data.preset: unknown preset {d.preset!r}")


def build_split(config, dataset):
    return make_split(dataset, config.split.n_pretrain, config.split.n_transfer, config.split.seed)


def build_pretrain_model(config, split):
    spec = arch_preset(config.arch, num_classes=len(split.pretrain_classes),
                       channels=config.channels or None)
    rng = rng_stream(config.pretrain_seed, "model-init")
    return build_convnet(spec, rng, dtype=_np_dtype(config))


def evaluate_classifier(model, x, y, batch_size=512):
    """(accuracy, mean cross-entropy loss) without touching any state."""
    n = len(x)
    if n == 0:
        return 0.0, 0.0
    correct = 0
    loss_sum = 0.0
    with no_grad():
        for i in range(0, n, batch_size):
            xb = x[i : i + batch_size].astype(model.dtype, copy=False)
            yb = y[i : i + batch_size]
            logits = model.forward(xb)
            correct += int((np.argmax(logits.data, axis=1) == yb).sum())
            loss_sum += float(ad.softmax_cross_entropy(logits, yb).data) * len(yb)
    return correct / n, loss_sum / n


def _zap_policy(config):
    p = config.pretrain
    if p.zap == "off":
        return ZapPolicy(mode="off")
    if p.zap == "episode":
        return ZapPolicy(mode="per_episode_class")
    return ZapPolicy(mode="iid_cadence", k_classes=p.zap_k, cadence_epochs=p.zap_every_epochs)


def _reset_adam_fc(model, adam, classes, config):
    if not config.pretrain.zap_resets_adam or not classes:
        return
    names = model.param_names()
    rows = sorted(classes)
    adam.reset_rows(names.index("fc.weight"), rows)
    adam.reset_rows(names.index("fc.bias"), rows)


# ---------------------------------------------------------------------------
# pre-training


def pretrain_iid(config, dataset, split, model=None):
    """Standard shuffled mini-batch training with Adam, optional cadence zaps.

    Returns (model, metrics rows). Validation accuracy is logged per epoch;
    a zap event row is appended whenever the policy fires.
    """
    tune_process()
    if config.pretrain.method != "iid":
        raise ValueError(f"pretrain_iid called with method {config.pretrain.method!r}")
    if model is None:
        model = build_pretrain_model(config, split)
    dtype = _np_dtype(config)
    policy = _zap_policy(config)
    shuffle_rng = rng_stream(config.pretrain_seed, "iid-shuffle")
    zap_rng = rng_stream(config.pretrain_seed, "zap")

    x_train, y_train = split_arrays(dataset, split.pretrain_classes, "train")
    x_val, y_val = split_arrays(dataset, split.pretrain_classes, "val")
    x_train = x_train.astype(dtype)

    params = model.param_list()
    adam = AdamState(params)
    bs = config.pretrain.batch_size
    rows = []
    t0 = time.perf_counter()

    def record(step):
        tr_acc, _ = evaluate_classifier(model, x_train, y_train)
        va_acc, va_loss = evaluate_classifier(model, x_val, y_val)
        rows.append(MetricsRecord(step=step, phase="pretrain",
                                  classes_seen=len(split.pretrain_classes),
                                  train_acc=tr_acc, test_acc=va_acc, loss=va_loss,
                                  wall_clock=time.perf_counter() - t0).to_row())

    step = 0
    record(step)
    for epoch in range(config.pretrain.epochs):
        if policy.mode == "iid_cadence":
            zapped = zap_iid(model, policy, epoch, zap_rng)
            if zapped:
                _reset_adam_fc(model, adam, zapped, config)
                rows.append(zap_event(step, policy.mode, zapped))
        order = shuffle_rng.permutation(len(x_train))
        for i in range(0, len(order), bs):
            idx = order[i : i + bs]
            loss = ad.softmax_cross_entropy(model.forward(x_train[idx]), y_train[idx])
            grads = backward(loss, params)
            adam_step(adam, params, grads, config.pretrain.eta_out)
            step += 1
        record(step)
    return model, rows


def _asb_episode_nonmeta(model, params, episode, config):
    dtype = _np_dtype(config)
    for i in range(len(episode.x_inner)):
        xi = episode.x_inner[i : i + 1].astype(dtype)
        yi = episode.y_inner[i : i + 1]
        loss = ad.softmax_cross_entropy(model.forward(xi), yi)
        grads = backward(loss, params)
        sgd_step_inplace(params, grads, config.pretrain.eta_in)
    return ad.softmax_cross_entropy(
        model.forward(episode.x_outer.astype(dtype)), episode.y_outer
    )


def _asb_episode_meta(model, params, episode, config):
    dtype = _np_dtype(config)
    names = model.param_names()
    current = dict(model.params)  # theta_0: the live leaves
    for i in range(len(episode.x_inner)):
        xi = episode.x_inner[i : i + 1].astype(dtype)
        yi = episode.y_inner[i : i + 1]
        loss = ad.softmax_cross_entropy(model.forward(xi, params=current), yi)
        grads = backward(loss, [current[n] for n in names], create_graph=True)
        stepped = sgd_step_functional([current[n] for n in names], grads, config.pretrain.eta_in)
        current = dict(zip(names, stepped))
    return ad.softmax_cross_entropy(
        model.forward(episode.x_outer.astype(dtype), params=current), episode.y_outer
    )


def pretrain_asb(config, dataset, split, model=None):
    """Alternating sequential-and-batch pre-training, plain or meta.

    Per episode: sample one class, optionally zap it, take K single-example
    SGD steps on it, then one Adam batch update on the episode examples plus
    the remember set. In meta mode the inner steps are functional and the
    batch gradient is taken with respect to the episode's starting
    parameters, which never move in between; otherwise the inner steps mutate
    the model and the batch gradient is taken where they ended.
    """
    tune_process()
    method = config.pretrain.method
    if method not in ("asb", "meta_asb"):
        raise ValueError(f"pretrain_asb called with method {method!r}")
    meta = method == "meta_asb"
    if model is None:
        model = build_pretrain_model(config, split)
    policy = _zap_policy(config)
    episode_rng = rng_stream(config.pretrain_seed, "episodes")
    zap_rng = rng_stream(config.pretrain_seed, "zap")

    x_val, y_val = split_arrays(dataset, split.pretrain_classes, "val")
    x_train, y_train = split_arrays(dataset, split.pretrain_classes, "train")

    params = model.param_list()
    adam = AdamState(params)
    rows = []
    t0 = time.perf_counter()

    def record(step):
        tr_acc, _ = evaluate_classifier(model, x_train, y_train)
        va_acc, va_loss = evaluate_classifier(model, x_val, y_val)
        rows.append(MetricsRecord(step=step, phase="pretrain",
                                  classes_seen=len(split.pretrain_classes),
                                  train_acc=tr_acc, test_acc=va_acc, loss=va_loss,
                                  wall_clock=time.perf_counter() - t0).to_row())

    record(0)
    steps = config.pretrain.outer_steps
    every = max(1, config.pretrain.eval_every)
    for s in range(1, steps + 1):
        episode = sample_episode(dataset, split, config.pretrain.k_inner,
                                 config.pretrain.r_remember, episode_rng)
        if policy.mode == "per_episode_class":
            zap_class(model, episode.class_index, zap_rng)
            _reset_adam_fc(model, adam, [episode.class_index], config)
            rows.append(zap_event(s - 1, policy.mode, [episode.class_index]))
        if meta:
            outer_loss = _asb_episode_meta(model, params, episode, config)
        else:
            outer_loss = _asb_episode_nonmeta(model, params, episode, config)
        grads = backward(outer_loss, params)
        adam_step(adam, params, grads, config.pretrain.eta_out)
        if s % every == 0 or s == steps:
            record(s)
    return model, rows


def run_pretrain(config, dataset, split, model=None):
    if config.pretrain.method == "iid":
        return pretrain_iid(config, dataset, split, model=model)
    return pretrain_asb(config, dataset, split, model=model)


# ---------------------------------------------------------------------------
# transfer


def _transfer_train_indices(dataset, class_id, cap, transfer_seed):
    """Seeded few-shot selection and presentation order for one class."""
    rng = rng_stream(transfer_seed, f"transfer-examples-{class_id}")
    n = dataset.n_train[class_id]
    order = rng.permutation(n)
    return order[:cap] if cap else order


def transfer_sequential(model, config, dataset, split):
    """Continual transfer: unseen classes one at a time, one SGD step per image.

    The final layer is replaced by a fresh random head sized for the transfer
    classes. In frozen mode (linear probing) only the head is updated and
    features are cached; unfrozen mode updates everything. At each evaluation
    point both the accuracy on everything trained so far and on held-out
    examples of seen classes are recorded.
    """
    tune_process()
    classes = split.transfer_classes
    if set(classes) & set(split.pretrain_classes):
        raise ValueError("transfer classes overlap the pretrain split")
    if not classes:
        raise ValueError("empty transfer split")
    dtype = _np_dtype(config)
    freeze = config.transfer.freeze
    beta = config.transfer.beta
    cap = config.transfer.train_per_class or 0

    net = replace_head(model, len(classes), rng_stream(config.transfer_seed, "transfer-head"))
    order_rng = rng_stream(config.transfer_seed, "transfer-order")
    trajectory = [classes[i] for i in order_rng.permutation(len(classes))]
    label_of = {c: i for i, c in enumerate(classes)}

    if freeze:
        head_params = [net.params["fc.weight"], net.params["fc.bias"]]

    seen_train = []  # (features-or-images, labels) accumulated in trajectory order
    seen_val = []
    rows = []
    t0 = time.perf_counter()
    step = 0

    def embed(x):
        with no_grad():
            return net.forward_features(x.astype(dtype)).data

    def eval_pair():
        xs_tr = np.concatenate([p[0] for p in seen_train])
        ys_tr = np.concatenate([p[1] for p in seen_train])
        xs_va = np.concatenate([p[0] for p in seen_val])
        ys_va = np.concatenate([p[1] for p in seen_val])
        if freeze:
            # features were cached; only the linear head runs
            with no_grad():
                w, b = net.params["fc.weight"], net.params["fc.bias"]
                lo_tr = ad.linear(Tensor(xs_tr), w, b)
                lo_va = ad.linear(Tensor(xs_va), w, b)
            tr_acc = float((np.argmax(lo_tr.data, axis=1) == ys_tr).mean())
            va_acc = float((np.argmax(lo_va.data, axis=1) == ys_va).mean())
            va_loss = float(ad.softmax_cross_entropy(lo_va, ys_va).data)
            return tr_acc, va_acc, va_loss
        tr_acc, _ = evaluate_classifier(net, xs_tr, ys_tr)
        va_acc, va_loss = evaluate_classifier(net, xs_va, ys_va)
        return tr_acc, va_acc, va_loss

    every = max(1, config.transfer.eval_every_classes)
    for n_seen, class_id in enumerate(trajectory, start=1):
        label = label_of[class_id]
        idx = _transfer_train_indices(dataset, class_id, cap, config.transfer_seed)
        x_cls = dataset.images[class_id][idx]
        y_cls = np.full(len(idx), label, dtype=np.int64)
        x_val_cls = dataset.val_examples(class_id)
        y_val_cls = np.full(len(x_val_cls), label, dtype=np.int64)

        if freeze:
            feats = embed(x_cls)
            for i in range(len(feats)):
                logits = ad.linear(Tensor(feats[i : i + 1]), net.params["fc.weight"], net.params["fc.bias"])
                loss = ad.softmax_cross_entropy(logits, y_cls[i : i + 1])
                grads = backward(loss, head_params)
                sgd_step_inplace(head_params, grads, beta)
                step += 1
            seen_train.append((feats, y_cls))
            seen_val.append((embed(x_val_cls), y_val_cls))
        else:
            all_params = net.param_list()
            for i in range(len(x_cls)):
                loss = ad.softmax_cross_entropy(net.forward(x_cls[i : i + 1].astype(dtype)), y_cls[i : i + 1])
                grads = backward(loss, all_params)
                sgd_step_inplace(all_params, grads, beta)
                step += 1
            seen_train.append((x_cls, y_cls))
            seen_val.append((x_val_cls, y_val_cls))

        if n_seen % every == 0 or n_seen == len(trajectory):
            tr_acc, va_acc, va_loss = eval_pair()
            rows.append(MetricsRecord(step=step, phase="transfer_sequential",
                                      classes_seen=n_seen, train_acc=tr_acc,
                                      test_acc=va_acc, loss=va_loss,
                                      wall_clock=time.perf_counter() - t0).to_row())
    return net, rows


def transfer_iid(model, config, dataset, split):
    """Standard fine-tuning: fresh head, Adam over shuffled batches, all
    weights unfrozen. Metrics start with an initial evaluation, so zero
    epochs leaves exactly that row."""
    tune_process()
    classes = split.transfer_classes
    if set(classes) & set(split.pretrain_classes):
        raise ValueError("transfer classes overlap the pretrain split")
    if not classes:
        raise ValueError("empty transfer split")
    dtype = _np_dtype(config)
    cap = config.transfer.train_per_class or 0

    net = replace_head(model, len(classes), rng_stream(config.transfer_seed, "transfer-head"))
    shuffle_rng = rng_stream(config.transfer_seed, "transfer-shuffle")

    xs, ys = [], []
    for label, class_id in enumerate(classes):
        idx = _transfer_train_indices(dataset, class_id, cap, config.transfer_seed)
        xs.append(dataset.images[class_id][idx])
        ys.append(np.full(len(idx), label, dtype=np.int64))
    x_train = np.concatenate(xs).astype(dtype)
    y_train = np.concatenate(ys)
    x_test, y_test = split_arrays(dataset, classes, "val")

    params = net.param_list()
    adam = AdamState(params)
    rows = []
    t0 = time.perf_counter()

    def record(step):
        tr_acc, _ = evaluate_classifier(net, x_train, y_train)
        te_acc, te_loss = evaluate_classifier(net, x_test, y_test)
        rows.append(MetricsRecord(step=step, phase="transfer_iid",
                                  classes_seen=len(classes), train_acc=tr_acc,
                                  test_acc=te_acc, loss=te_loss,
                                  wall_clock=time.perf_counter() - t0).to_row())

    step = 0
    record(step)
    every = config.transfer.eval_every_batches
    bs = config.transfer.batch_size
    for _epoch in range(config.transfer.epochs):
        order = shuffle_rng.permutation(len(x_train))
        for i in range(0, len(order), bs):
            idx = order[i : i + bs]
            loss = ad.softmax_cross_entropy(net.forward(x_train[idx]), y_train[idx])
            grads = backward(loss, params)
            adam_step(adam, params, grads, config.transfer.adam_lr)
            step += 1
            if every and step % every == 0:
                record(step)
        if not every:
            record(step)
    if not rows or rows[-1]["step"] != step:
        record(step)
    return net, rows


def run_transfer(model, config, dataset, split):
    if config.transfer.mode == "sequential":
        return transfer_sequential(model, config, dataset, split)
    return transfer_iid(model, config, dataset, split)


# ---------------------------------------------------------------------------
# statistics


def _midranks(values):
    order = np.argsort(values, kind="stable")
    ranks = np.empty(len(values))
    sv = values[order]
    i = 0
    while i < len(sv):
        j = i
        while j + 1 < len(sv) and sv[j + 1] == sv[i]:
            j += 1
        ranks[order[i : j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def mann_whitney_u(sample_a, sample_b):
    """Two-sided Mann-Whitney U test.

    Returns (U, p) where U counts (a, b) pairs with a > b (ties half). Small
    samples get an exact permutation p-value over all rank assignments (which
    handles ties); larger ones use the normal approximation with tie
    correction and continuity correction.
    """
    a = np.asarray(sample_a, dtype=np.float64)
    b = np.asarray(sample_b, dtype=np.float64)
    n1, n2 = len(a), len(b)
    if n1 == 0 or n2 == 0:
        raise ValueError("mann_whitney_u needs nonempty samples")
    pooled = np.concatenate([a, b])
    ranks = _midranks(pooled)
    r1 = float(ranks[:n1].sum())
    u = r1 - n1 * (n1 + 1) / 2.0
    mu = n1 * n2 / 2.0

    if math.comb(n1 + n2, n1) <= 200_000:
        combos = np.array(list(itertools.combinations(range(n1 + n2), n1)))
        r1_all = ranks[combos].sum(axis=1)
        dev = np.abs(r1_all - (mu + n1 * (n1 + 1) / 2.0))
        p = float(np.mean(dev >= abs(u - mu) - 1e-12))
        return u, p

    n = n1 + n2
    _, counts = np.unique(pooled, return_counts=True)
    tie_term = float(((counts**3 - counts).sum()) / (n * (n - 1)))
    sigma2 = n1 * n2 / 12.0 * ((n + 1) - tie_term)
    if sigma2 <= 0:
        return u, 1.0
    z = (abs(u - mu) - 0.5) / math.sqrt(sigma2)
    if z < 0:
        z = 0.0
    p = min(1.0, math.erfc(z / math.sqrt(2.0)))
    return u, p


# ---------------------------------------------------------------------------
# sweeps


class SweepError(RuntimeError):
    def __init__(self, trial_id, cause):
        super().__init__(f"trial {trial_id} failed: {cause}")
        self.trial_id = trial_id


def run_trial(config):
    """One pretrain followed by one transfer; returns the summary dict."""
    dataset = build_dataset(config)
    split = build_split(config, dataset)
    model, pre_rows = run_pretrain(config, dataset, split)
    _, tr_rows = run_transfer(model, config, dataset, split)
    pre_final = [r for r in pre_rows if r.get("record") == "metrics"][-1]
    tr_final = [r for r in tr_rows if r.get("record") == "metrics"][-1]
    return {
        "method": config.pretrain.method,
        "zap": config.pretrain.zap,
        "pretrain_lr": config.pretrain.eta_out,
        "transfer_lr": config.transfer.beta if config.transfer.mode == "sequential"
                       else config.transfer.adam_lr,
        "pretrain_seed": config.pretrain_seed,
        "transfer_seed": config.transfer_seed,
        "pretrain_acc": pre_final["test_acc"],
        "final_train_acc": tr_final["train_acc"],
        "final_test_acc": tr_final["test_acc"],
        "config_hash": config.hash(),
    }


def _pretrain_job(args):
    trial_id, label, config, transfer_lrs, transfer_seeds = args
    try:
        dataset = build_dataset(config)
        split = build_split(config, dataset)
        model, pre_rows = run_pretrain(config, dataset, split)
        pre_final = [r for r in pre_rows if r.get("record") == "metrics"][-1]
        out = []
        for lr in transfer_lrs:
            for t_seed in transfer_seeds:
                cfg = transfer_variant(config, lr, t_seed)
                _, rows = run_transfer(model, cfg, dataset, split)
                final = [r for r in rows if r.get("record") == "metrics"][-1]
                out.append({
                    "label": label,
                    "method": config.pretrain.method,
                    "zap": config.pretrain.zap,
                    "pretrain_lr": config.pretrain.eta_out,
                    "transfer_lr": lr,
                    "pretrain_seed": config.pretrain_seed,
                    "transfer_seed": t_seed,
                    "pretrain_acc": pre_final["test_acc"],
                    "final_train_acc": final["train_acc"],
                    "final_test_acc": final["test_acc"],
                    "config_hash": config.hash(),
                })
        return out
    except Exception as e:  # surfaced as SweepError by the caller
        raise RuntimeError(f"{trial_id}: {e}") from e


def transfer_variant(config, transfer_lr, transfer_seed):
    """Copy of the config with one transfer learning rate and seed."""
    cfg = copy.deepcopy(config)
    cfg.transfer_seed = transfer_seed
    if cfg.transfer.mode == "sequential":
        cfg.transfer.beta = transfer_lr
    else:
        cfg.transfer.adam_lr = transfer_lr
    return cfg


def select_best(summaries):
    """Per method: pick the learning-rate pair with the best mean final
    transfer accuracy over seed pairs; report mean and std there."""
    report = {}
    keyfn = lambda s: s["label"]
    for label, group in itertools.groupby(sorted(summaries, key=keyfn), key=keyfn):
        group = list(group)
        by_lr = {}
        for s in group:
            by_lr.setdefault((s["pretrain_lr"], s["transfer_lr"]), []).append(s)
        scored = sorted(
            ((float(np.mean([s["final_test_acc"] for s in v])), -k[0], -k[1], k) for k, v in by_lr.items()),
            reverse=True,
        )
        best_key = scored[0][3]
        accs = [s["final_test_acc"] for s in by_lr[best_key]]
        pre = [s["pretrain_acc"] for s in by_lr[best_key]]
        report[label] = {
            "pretrain_lr": best_key[0],
            "transfer_lr": best_key[1],
            "mean": float(np.mean(accs)),
            "std": float(np.std(accs)),
            "n": len(accs),
            "accs": [float(a) for a in accs],
            "pretrain_mean": float(np.mean(pre)),
            "pretrain_std": float(np.std(pre)),
        }
    return report


def sweep_and_select(variants, pretrain_lrs, transfer_lrs, pretrain_seeds, transfer_seeds,
                     workers=1):
    """Run the grid (variants x pretrain lrs x seeds, each transferred at every
    transfer lr and seed) and select per-variant best learning rates.

    ``variants`` is a list of (label, ExperimentConfig). Any failed trial
    aborts the sweep, naming the trial. Returns (report, all summaries).
    """
    tune_process()
    jobs = []
    for label, cfg in variants:
        for lr in pretrain_lrs:
            for seed in pretrain_seeds:
                c = copy.deepcopy(cfg)
                c.pretrain.eta_out = lr
                c.pretrain_seed = seed
                jobs.append((f"{label}/pre_lr={lr}/seed={seed}", label, c,
                             list(transfer_lrs), list(transfer_seeds)))
    summaries = []
    if workers <= 1:
        for job in jobs:
            try:
                summaries.extend(_pretrain_job(job))
            except RuntimeError as e:
                raise SweepError(job[0], e) from e
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = {pool.submit(_pretrain_job, job): job[0] for job in jobs}
            for fut, trial_id in futures.items():
                try:
                    summaries.extend(fut.result())
                except Exception as e:
                    raise SweepError(trial_id, e) from e
    summaries.sort(key=lambda s: (s["label"], s["pretrain_lr"], s["transfer_lr"],
                                  s["pretrain_seed"], s["transfer_seed"]))
    return select_best(summaries), summaries
