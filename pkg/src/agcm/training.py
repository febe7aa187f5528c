"""Optimizer and training loops for the visual model.

Runs are bit-reproducible for a fixed seed: parameter init, the train/val
split, epoch shuffles, and dropout each draw from their own seed-keyed
Philox stream, and every numeric kernel is single-threaded.

Two schedules exist.  The end-to-end loop optimizes the full joint loss;
the by-step loop first fits the concept and map terms alone, then freezes
everything and fits only the task head on detached concept embeddings.
"""

import csv
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import kernels
from .concept_model import VisualModel, joint_loss
from .data import batch_ranges, split_indices


class TrainingDiverged(RuntimeError):
    """Loss became non-finite; carries the epoch/step it happened at."""

    def __init__(self, epoch, step, value):
        super().__init__(f"non-finite loss {value!r} at epoch {epoch}, step {step}")
        self.epoch = epoch
        self.step = step


class Adam:
    """Adam with bias correction over a subset of a parameter store."""

    def __init__(self, store, tc, names=None):
        self.tc = tc
        self.slots = []
        for name in (names if names is not None else store.names()):
            t = store[name]
            self.slots.append((name, t, np.zeros_like(t.values), np.zeros_like(t.values)))
        self.t = 0

    def step(self):
        tc = self.tc
        self.t += 1
        b1t = tc.beta1 ** self.t
        b2t = tc.beta2 ** self.t
        for _, p, m, v in self.slots:
            g = p.grad
            if g is None:
                g = np.zeros_like(p.values)
            pv = p.values.reshape(-1)
            kernels.adam_step(pv, np.ascontiguousarray(g, dtype=np.float64).reshape(-1),
                              m.reshape(-1), v.reshape(-1),
                              tc.lr, tc.beta1, tc.beta2, tc.eps, b1t, b2t)


@dataclass
class TrainResult:
    model: object
    logs: list = field(default_factory=list)
    best_epoch: int = 0
    stopped_epoch: int = 0
    stage_logs: dict = field(default_factory=dict)


def _streams(seed):
    return {
        "shuffle": np.random.Generator(np.random.Philox(key=[int(seed), 2])),
        "dropout": np.random.Generator(np.random.Philox(key=[int(seed), 3])),
    }


def _snapshot(store):
    return {n: t.values.copy() for n, t in store.items()}


def _restore(store, snap):
    for n, t in store.items():
        t.values[:] = snap[n]


def _term_selector(mode):
    # which loss terms drive optimization and early stopping per schedule stage
    if mode == "concepts":
        return lambda task, concept, mapt, cfg: concept * cfg.lambda_concept + mapt * cfg.lambda_map
    if mode == "task":
        return lambda task, concept, mapt, cfg: task
    return lambda task, concept, mapt, cfg: task + concept * cfg.lambda_concept + mapt * cfg.lambda_map


def evaluate_visual(model, ds, batch_size=64):
    """Frozen-weights pass over a dataset.

    Returns probs (N, n_concepts), maps (N, n_concepts, n_tokens), the raw
    task outputs, per-sample predictions, mixed embeddings, and mean loss
    parts.
    """
    cfg = model.cfg
    n = len(ds)
    probs = np.zeros((n, cfg.n_concepts))
    maps = np.zeros((n, cfg.n_concepts, cfg.n_tokens()))
    mixed = np.zeros((n, cfg.n_concepts * cfg.concept_embed_size))
    raw = np.zeros((n, cfg.task_width())) if cfg.task == "classification" else np.zeros(n)
    parts_sum = {"task": 0.0, "concept": 0.0, "map": 0.0}
    for lo, hi in batch_ranges(n, batch_size):
        out = model.forward(ds.patches[lo:hi])
        total, parts = joint_loss(out, ds.labels[lo:hi], ds.concepts[lo:hi],
                                  ds.maps[lo:hi], cfg)
        w = (hi - lo) / n
        for k in parts_sum:
            parts_sum[k] += parts[k] * w
        probs[lo:hi] = out["probs"].values
        maps[lo:hi] = out["maps"].values
        mixed[lo:hi] = out["mixed"].values
        raw[lo:hi] = out["logits"].values if cfg.task == "classification" else out["pred"].values
    res = {"probs": probs, "maps": maps, "mixed": mixed, "loss_parts": parts_sum}
    if cfg.task == "classification":
        res["logits"] = raw
        res["preds"] = raw.argmax(axis=1)
        res["accuracy"] = float(np.mean(res["preds"] == ds.labels))
    else:
        res["pred"] = raw
    return res


def _run_epochs(model, opt, train_ds, val_ds, cfg, tc, streams, mode, log_rows,
                stage_label, epoch_offset=0):
    """Shared epoch loop; returns (best_epoch, stopped_epoch)."""
    select = _term_selector(mode)
    best = np.inf
    best_snap = _snapshot(model.store)
    best_epoch = 0
    bad_epochs = 0
    stopped = 0
    n = len(train_ds)
    for epoch in range(1, tc.max_epochs + 1):
        order = streams["shuffle"].permutation(n)
        sums = {"task": 0.0, "concept": 0.0, "map": 0.0}
        steps = 0
        for lo, hi in batch_ranges(n, tc.batch_size):
            idx = order[lo:hi]
            model.store.zero_grad()
            with ad.Graph() as g:
                out = model.forward(train_ds.patches[idx], train=True, rng=streams["dropout"])
                if mode == "concepts":
                    objective, parts = _concept_objective(out, train_ds, idx, cfg)
                else:
                    objective, parts = joint_loss(out, train_ds.labels[idx],
                                                  train_ds.concepts[idx], train_ds.maps[idx], cfg)
            val = objective.item()
            if not np.isfinite(val):
                raise TrainingDiverged(epoch_offset + epoch, steps, val)
            g.backward(objective)
            opt.step()
            for k in sums:
                sums[k] += parts[k]
            steps += 1

        ev = evaluate_visual(model, val_ds, batch_size=max(tc.batch_size, 64))
        vp = ev["loss_parts"]
        monitor = select(vp["task"], vp["concept"], vp["map"], cfg)
        row = {
            "stage": stage_label,
            "epoch": epoch_offset + epoch,
            "train_task": sums["task"] / max(steps, 1),
            "train_concept": sums["concept"] / max(steps, 1),
            "train_map": sums["map"] / max(steps, 1),
            "val_task": vp["task"],
            "val_concept": vp["concept"],
            "val_map": vp["map"],
            "val_monitor": monitor,
        }
        if cfg.task == "classification":
            row["val_accuracy"] = ev["accuracy"]
        log_rows.append(row)

        if monitor < best - 1e-12:
            best = monitor
            best_snap = _snapshot(model.store)
            best_epoch = epoch_offset + epoch
            bad_epochs = 0
        else:
            bad_epochs += 1
            if bad_epochs >= tc.patience:
                stopped = epoch_offset + epoch
                break
        stopped = epoch_offset + epoch
    _restore(model.store, best_snap)
    return best_epoch, stopped


def _concept_objective(out, ds, idx, cfg):
    """Concept + map terms only (stage 1 of the by-step schedule)."""
    ct = ad.tensor(ds.concepts[idx])
    concept = ad.tensor_sum(ad.tensor_mean(ad.bce(out["probs"], ct), axis=0))
    obj = ad.scale(concept, cfg.lambda_concept)
    parts = {"task": 0.0, "concept": concept.item(), "map": 0.0}
    if cfg.use_cml:
        mt = ds.maps[idx]
        valid = (mt > 0).any(axis=-1).astype(np.float64)
        sim = ad.cosine_sim(out["maps"], ad.tensor(mt))
        masked = ad.mul(ad.sub(ad.tensor(np.ones_like(valid)), sim), ad.tensor(valid))
        map_term = ad.tensor_sum(ad.tensor_mean(masked, axis=0))
        parts["map"] = map_term.item()
        obj = ad.add(obj, ad.scale(map_term, cfg.lambda_map))
    return obj, parts


def train_visual(dataset, cfg, tc, seed):
    """End-to-end training on the joint loss; early stop on validation
    task loss with keep-best restore."""
    cfg.validate()
    tc.validate()
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    model = VisualModel(cfg, seed)
    tr_idx, va_idx = split_indices(len(dataset), tc.val_fraction, seed)
    train_ds, val_ds = dataset.subset(tr_idx), dataset.subset(va_idx)
    streams = _streams(seed)
    opt = Adam(model.store, tc)
    logs = []
    best, stopped = _run_epochs(model, opt, train_ds, val_ds, cfg, tc, streams,
                                mode="task", log_rows=logs, stage_label="e2e")
    return TrainResult(model, logs, best, stopped)


def train_by_step(dataset, cfg, tc, seed):
    """Two-stage schedule: concepts/maps first, then the frozen-input task head."""
    cfg.validate()
    tc.validate()
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    model = VisualModel(cfg, seed)
    tr_idx, va_idx = split_indices(len(dataset), tc.val_fraction, seed)
    train_ds, val_ds = dataset.subset(tr_idx), dataset.subset(va_idx)
    streams = _streams(seed)

    logs = []
    opt1 = Adam(model.store, tc)
    best1, stop1 = _run_epochs(model, opt1, train_ds, val_ds, cfg, tc, streams,
                               mode="concepts", log_rows=logs, stage_label="stage1")

    # stage 2: everything upstream of the task head is frozen; concept
    # embeddings are detached so no gradient can reach the frozen branch
    task_names = [n for n in model.store.names() if n.startswith("acg.task.")]
    opt2 = Adam(model.store, tc, names=task_names)
    frozen = {n: t.values.copy() for n, t in model.store.items() if n not in task_names}

    mixed_train = evaluate_visual(model, train_ds)["mixed"]
    mixed_val = evaluate_visual(model, val_ds)["mixed"]

    best_val = np.inf
    best_snap = _snapshot(model.store)
    best2 = 0
    bad = 0
    stop2 = stop1
    n = len(train_ds)
    for epoch in range(1, tc.max_epochs + 1):
        order = streams["shuffle"].permutation(n)
        tsum, steps = 0.0, 0
        for lo, hi in batch_ranges(n, tc.batch_size):
            idx = order[lo:hi]
            model.store.zero_grad()
            with ad.Graph() as g:
                logits = model.acg.task_predict(ad.tensor(mixed_train[idx]))
                if cfg.task == "regression":
                    diff = ad.sub(logits, ad.tensor(train_ds.labels[idx].astype(np.float64)))
                    loss = ad.tensor_mean(ad.mul(diff, diff))
                else:
                    loss = ad.cross_entropy(logits, train_ds.labels[idx])
            val = loss.item()
            if not np.isfinite(val):
                raise TrainingDiverged(stop1 + epoch, steps, val)
            g.backward(loss)
            opt2.step()
            tsum += val
            steps += 1

        vout = model.acg.task_predict(ad.tensor(mixed_val))
        if cfg.task == "regression":
            vloss = float(np.mean((vout.values - val_ds.labels) ** 2))
            row_metric = {}
        else:
            vloss = ad.cross_entropy(vout, val_ds.labels).item()
            row_metric = {"val_accuracy": float(np.mean(vout.values.argmax(axis=1) == val_ds.labels))}
        logs.append({"stage": "stage2", "epoch": stop1 + epoch,
                     "train_task": tsum / max(steps, 1), "train_concept": 0.0,
                     "train_map": 0.0, "val_task": vloss, "val_concept": 0.0,
                     "val_map": 0.0, "val_monitor": vloss, **row_metric})
        if vloss < best_val - 1e-12:
            best_val = vloss
            best_snap = _snapshot(model.store)
            best2 = stop1 + epoch
            bad = 0
        else:
            bad += 1
            if bad >= tc.patience:
                stop2 = stop1 + epoch
                break
        stop2 = stop1 + epoch
    _restore(model.store, best_snap)

    for name, arr in frozen.items():
        if not np.array_equal(model.store[name].values, arr):
            raise AssertionError(f"frozen parameter {name} changed during stage 2")

    return TrainResult(model, logs, best2, stop2,
                       stage_logs={"stage1_best": best1, "stage1_stop": stop1})


def write_epoch_log(path, rows):
    """Epoch metrics as CSV; column set is the union over rows."""
    cols = ["stage", "epoch", "train_task", "train_concept", "train_map",
            "val_task", "val_concept", "val_map", "val_monitor", "val_accuracy"]
    present = [c for c in cols if any(c in r for r in rows)]
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=present, extrasaction="ignore")
        w.writeheader()
        for r in rows:
            w.writerow({k: (f"{v:.10g}" if isinstance(v, float) else v)
                        for k, v in r.items() if k in present})
