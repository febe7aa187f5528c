"""Second-stage multimodal fusion.

A trained visual model is frozen and its per-frame mixed concept
embeddings become constants.  Temporal branches (acoustic by default)
derive their own concept probabilities and mixed embeddings from a
per-clip descriptor window, every frame's visual embeddings are
concatenated with the clip's temporal embeddings, and a one-block
bidirectional sequence predictor emits a task output per frame.

The acoustic concept targets are not hand-annotated: they are derived
from raw per-frame measurement tracks (pitch, loudness, jitter, speech
rate) by fixed rules, so generated corpora can plant them exactly.
"""

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .backbone import add_block_params, encoder_block
from .checkpoint import load_params, assign_params, params_digest, save_params
from .concept_model import add_concept_head_params, concept_mixture
from .config import ModelConfig, TrainConfig
from .data import batch_ranges, split_indices
from .training import Adam, TrainResult, TrainingDiverged, _snapshot, _restore, _streams

ACOUSTIC_RULES = ("mean", "mean_abs_diff", "percentage")
TRACK_COLUMNS = ("pitch", "loudness", "jitter", "rate")


@dataclass(frozen=True)
class AcousticConceptSpec:
    """How one temporal concept target is read off a raw measurement track.

    rule "mean" averages the column, "mean_abs_diff" averages the absolute
    first difference (a variation measure), "percentage" divides the mean
    by 100; mean and variation are then affine-normalized by bounds.
    """

    name: str
    rule: str
    column: int
    bounds: tuple

    def validate(self):
        if not self.name:
            raise ValueError("acoustic concept needs a name")
        if self.rule not in ACOUSTIC_RULES:
            raise ValueError(f"{self.name}: unknown rule {self.rule!r}")
        if not 0 <= self.column < len(TRACK_COLUMNS):
            raise ValueError(f"{self.name}: track has no column {self.column}")
        if self.bounds is None or len(self.bounds) != 2:
            raise ValueError(f"{self.name}: normalization bounds missing")
        lo, hi = self.bounds
        if not lo < hi:
            raise ValueError(f"{self.name}: bounds ({lo}, {hi}) need lo < hi")

    def to_dict(self):
        return {"name": self.name, "rule": self.rule, "column": self.column,
                "bounds": list(self.bounds)}

    @classmethod
    def from_dict(cls, d):
        return cls(d["name"], d["rule"], int(d["column"]),
                   (float(d["bounds"][0]), float(d["bounds"][1])))


def default_acoustic_inventory():
    """The six temporal concepts, in reporting order."""
    return (
        AcousticConceptSpec("pitch", "mean", 0, (0.0, 300.0)),
        AcousticConceptSpec("pitch_variation", "mean_abs_diff", 0, (0.0, 60.0)),
        AcousticConceptSpec("jitter", "percentage", 2, (0.0, 100.0)),
        AcousticConceptSpec("loudness", "mean", 1, (0.0, 80.0)),
        AcousticConceptSpec("loudness_variation", "mean_abs_diff", 1, (0.0, 24.0)),
        AcousticConceptSpec("speech_rate", "mean", 3, (0.0, 8.0)),
    )


def default_track_bounds():
    # per-column (lo, hi) used to normalize raw tracks into model features
    return ((0.0, 300.0), (0.0, 80.0), (0.0, 100.0), (0.0, 8.0))


def derive_acoustic_labels(track, inventory):
    """Per-clip concept targets in [0, 1] from a raw measurement track.

    A silent clip (all-zero loudness column) forces the pitch and loudness
    level targets to 0 regardless of normalization bounds; their variation
    targets follow from the zero track anyway.
    """
    track = np.asarray(track, dtype=np.float64)
    if track.ndim != 2 or track.shape[1] != len(TRACK_COLUMNS):
        raise ValueError(f"track must be (frames, {len(TRACK_COLUMNS)}), got {track.shape}")
    if len(track) < 2:
        raise ValueError("track needs at least 2 frames")
    silent = bool(np.all(track[:, 1] == 0.0))
    out = np.empty(len(inventory), dtype=np.float64)
    for j, spec in enumerate(inventory):
        spec.validate()
        col = track[:, spec.column]
        if spec.rule == "percentage":
            out[j] = float(np.clip(col.mean() / 100.0, 0.0, 1.0))
            continue
        if spec.rule == "mean":
            if silent and spec.column in (0, 1):
                out[j] = 0.0
                continue
            raw = float(col.mean())
        else:
            raw = float(np.mean(np.abs(np.diff(col))))
        lo, hi = spec.bounds
        out[j] = float(np.clip((raw - lo) / (hi - lo), 0.0, 1.0))
    return out


def acoustic_features(track, track_bounds):
    """Flatten a raw track into the normalized descriptor vector G consumes."""
    track = np.asarray(track, dtype=np.float64)
    tb = np.asarray(track_bounds, dtype=np.float64)
    if tb.shape != (len(TRACK_COLUMNS), 2):
        raise ValueError(f"track bounds must be ({len(TRACK_COLUMNS)}, 2), got {tb.shape}")
    lo, hi = tb[:, 0], tb[:, 1]
    return np.clip((track - lo) / (hi - lo), 0.0, 1.0).ravel()


@dataclass(frozen=True)
class BranchSpec:
    """One temporal-concept branch: its parameter prefix, concept count,
    and descriptor length."""

    name: str
    n_concepts: int
    feature_len: int

    def validate(self):
        if not self.name or not self.name.isidentifier():
            raise ValueError(f"branch name {self.name!r} must be an identifier")
        if self.n_concepts < 1 or self.feature_len < 1:
            raise ValueError(f"branch {self.name}: need positive concept count and feature length")

    def to_dict(self):
        return {"name": self.name, "n_concepts": self.n_concepts,
                "feature_len": self.feature_len}

    @classmethod
    def from_dict(cls, d):
        return cls(d["name"], int(d["n_concepts"]), int(d["feature_len"]))


@dataclass
class FusionConfig:
    clip_len: int = 30
    branches: tuple = (BranchSpec("aco", 6, 120),)
    g_hidden: int = 64
    g_out: int = 64
    seq_heads: int = 4
    seq_mlp_hidden: int = 0          # 0 -> twice the fused width
    pos_embed: bool = True
    dropout: float = 0.0
    lambda_concept: float = 1.0

    def validate(self):
        if self.clip_len < 1:
            raise ValueError(f"clip_len must be positive, got {self.clip_len}")
        if not self.branches:
            raise ValueError("at least one temporal branch required")
        names = [b.name for b in self.branches]
        if len(set(names)) != len(names):
            raise ValueError(f"duplicate branch names in {names}")
        for b in self.branches:
            b.validate()
        if self.g_hidden < 1 or self.g_out < 1 or self.seq_heads < 1:
            raise ValueError("g_hidden, g_out and seq_heads must be positive")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout {self.dropout} outside [0, 1)")
        if self.lambda_concept < 0:
            raise ValueError("lambda_concept must be non-negative")

    def to_dict(self):
        return {"clip_len": self.clip_len,
                "branches": [b.to_dict() for b in self.branches],
                "g_hidden": self.g_hidden, "g_out": self.g_out,
                "seq_heads": self.seq_heads, "seq_mlp_hidden": self.seq_mlp_hidden,
                "pos_embed": self.pos_embed, "dropout": self.dropout,
                "lambda_concept": self.lambda_concept}

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["branches"] = tuple(BranchSpec.from_dict(b) for b in d["branches"])
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown fusion config keys {sorted(unknown)}")
        return cls(**d)


class FusionModel:
    """Temporal concept branches plus the fused sequence predictor.

    Owns only second-stage parameters; the visual branch stays in its own
    checkpoint and enters forward() as constant per-frame embeddings, so
    no gradient can reach it.
    """

    def __init__(self, vcfg: ModelConfig, fcfg: FusionConfig, seed: int):
        vcfg.validate()
        fcfg.validate()
        self.vcfg = vcfg
        self.fcfg = fcfg
        self.seed = int(seed)
        m = vcfg.concept_embed_size
        self.width = (vcfg.n_concepts + sum(b.n_concepts for b in fcfg.branches)) * m
        if self.width % fcfg.seq_heads:
            raise ValueError(f"fused width {self.width} not divisible by "
                             f"{fcfg.seq_heads} attention heads")
        self.store = ad.ParamStore()
        init = ad.Initializer(seed)
        add = self.store.add
        for br in fcfg.branches:
            add(f"{br.name}.g.w1", init.draw((br.feature_len, fcfg.g_hidden)))
            add(f"{br.name}.g.b1", init.draw((fcfg.g_hidden,), "zeros"))
            add(f"{br.name}.g.w2", init.draw((fcfg.g_hidden, fcfg.g_out)))
            add(f"{br.name}.g.b2", init.draw((fcfg.g_out,), "zeros"))
            for i in range(br.n_concepts):
                add_concept_head_params(self.store, init, f"{br.name}.concept{i}.",
                                        fcfg.g_out, m)
        if fcfg.pos_embed:
            add("seq.pos", init.draw((fcfg.clip_len, self.width)))
        hidden = fcfg.seq_mlp_hidden or 2 * self.width
        add_block_params(self.store, init, "seq.block0.", self.width, hidden)
        add("seq.head.w", init.draw((self.width, vcfg.task_width())))
        add("seq.head.b", init.draw((vcfg.task_width(),), "zeros"))

    def branch_concepts(self, br, features):
        """Probabilities (B, n) and concatenated mixed embeddings (B, n*m)
        for one temporal branch."""
        s = self.store
        x = features if isinstance(features, ad.DTensor) else \
            ad.tensor(np.asarray(features, dtype=np.float64))
        h = ad.leaky_relu(ad.add(ad.matmul(x, s[f"{br.name}.g.w1"]), s[f"{br.name}.g.b1"]))
        ctx = ad.leaky_relu(ad.add(ad.matmul(h, s[f"{br.name}.g.w2"]), s[f"{br.name}.g.b2"]))
        probs, mixed = [], []
        for i in range(br.n_concepts):
            p, mix, _, _ = concept_mixture(s, f"{br.name}.concept{i}.", ctx)
            probs.append(p)
            mixed.append(mix)
        return ad.concat(probs, axis=1), ad.concat(mixed, axis=1)

    def forward(self, visual_mixed, features, train=False, rng=None):
        """Fuse frozen visual embeddings with temporal branches.

        visual_mixed: (B, k, n_v*m) constants from the frozen branch;
        features: {branch name: (B, feature_len)}.  k must equal clip_len
        when positional embeddings are enabled.
        """
        vm = visual_mixed if isinstance(visual_mixed, ad.DTensor) else \
            ad.tensor(np.asarray(visual_mixed, dtype=np.float64))
        b, k, dv = vm.shape
        if dv != self.vcfg.n_concepts * self.vcfg.concept_embed_size:
            raise ad.ShapeError(f"visual embeddings last dim {dv}, expected "
                                f"{self.vcfg.n_concepts * self.vcfg.concept_embed_size}")
        fcfg = self.fcfg
        if fcfg.pos_embed and k != fcfg.clip_len:
            raise ad.ShapeError(f"clip length {k} vs positional table {fcfg.clip_len}")
        out = {}
        parts = [vm]
        m = self.vcfg.concept_embed_size
        for br in fcfg.branches:
            if br.name not in features:
                raise ValueError(f"missing features for branch {br.name!r}")
            p, mix = self.branch_concepts(br, features[br.name])
            out[f"{br.name}_probs"] = p
            out[f"{br.name}_mixed"] = mix
            tiled = ad.broadcast_to(ad.reshape(mix, (b, 1, br.n_concepts * m)),
                                    (b, k, br.n_concepts * m))
            parts.append(tiled)
        x = ad.concat(parts, axis=2)
        if fcfg.pos_embed:
            x = ad.add(x, self.store["seq.pos"])
        x = encoder_block(self.store, "seq.block0.", x, fcfg.seq_heads,
                          fcfg.dropout, train, rng)
        logits = ad.add(ad.matmul(x, self.store["seq.head.w"]), self.store["seq.head.b"])
        if self.vcfg.task == "regression":
            out["pred"] = ad.reshape(ad.sigmoid(logits), (b, k))
        else:
            out["frame_logits"] = logits
        return out


def fusion_loss(out, frame_labels, targets, vcfg, fcfg):
    """Frame task term plus per-branch concept BCE.

    Returns (total: scalar DTensor, parts: unscaled {"task", "concept"}),
    so total = task + lambda_concept * concept.
    """
    labels = np.asarray(frame_labels)
    if vcfg.task == "regression":
        diff = ad.sub(out["pred"], ad.tensor(labels.astype(np.float64)))
        task = ad.tensor_mean(ad.mul(diff, diff))
    else:
        logits = out["frame_logits"]
        b, k, c = logits.shape
        if labels.shape != (b, k):
            raise ad.ShapeError(f"frame labels {labels.shape} vs logits {(b, k)}")
        task = ad.cross_entropy(ad.reshape(logits, (b * k, c)), labels.reshape(-1))

    total = task
    concept_total = None
    for br in fcfg.branches:
        t = np.asarray(targets[br.name], dtype=np.float64)
        p = out[f"{br.name}_probs"]
        if t.shape != p.shape:
            raise ad.ShapeError(f"branch {br.name}: targets {t.shape} vs probs {p.shape}")
        term = ad.tensor_sum(ad.tensor_mean(ad.bce(p, ad.tensor(t)), axis=0))
        concept_total = term if concept_total is None else ad.add(concept_total, term)
    parts = {"task": task.item(), "concept": concept_total.item()}
    total = ad.add(total, ad.scale(concept_total, fcfg.lambda_concept))
    return total, parts


def visual_mixed_for_frames(visual_model, patches, batch_size=256):
    """Frozen-branch mixed embeddings for (N, k, n_tokens, patch_dim) frames."""
    patches = np.asarray(patches, dtype=np.float64)
    n, k = patches.shape[:2]
    flat = patches.reshape(n * k, *patches.shape[2:])
    width = visual_model.cfg.n_concepts * visual_model.cfg.concept_embed_size
    mixed = np.zeros((n * k, width))
    for lo, hi in batch_ranges(n * k, batch_size):
        mixed[lo:hi] = visual_model.forward(flat[lo:hi])["mixed"].values
    return mixed.reshape(n, k, width)


def evaluate_fusion(model, visual_mixed, features, frame_labels, targets, batch_size=32):
    """Frozen-weights pass over clips; returns predictions and loss parts."""
    n, k = frame_labels.shape
    vcfg = model.vcfg
    width = vcfg.task_width()
    raw = np.zeros((n, k, width)) if vcfg.task == "classification" else np.zeros((n, k))
    probs = {br.name: np.zeros((n, br.n_concepts)) for br in model.fcfg.branches}
    parts_sum = {"task": 0.0, "concept": 0.0}
    for lo, hi in batch_ranges(n, batch_size):
        feats = {name: f[lo:hi] for name, f in features.items()}
        targ = {name: t[lo:hi] for name, t in targets.items()}
        out = model.forward(visual_mixed[lo:hi], feats)
        _, parts = fusion_loss(out, frame_labels[lo:hi], targ, vcfg, model.fcfg)
        w = (hi - lo) / n
        for key in parts_sum:
            parts_sum[key] += parts[key] * w
        raw[lo:hi] = out["frame_logits"].values if vcfg.task == "classification" \
            else out["pred"].values
        for br in model.fcfg.branches:
            probs[br.name][lo:hi] = out[f"{br.name}_probs"].values
    res = {"loss_parts": parts_sum, "branch_probs": probs}
    if vcfg.task == "classification":
        res["frame_logits"] = raw
        res["frame_preds"] = raw.argmax(axis=2)
        res["frame_accuracy"] = float(np.mean(res["frame_preds"] == frame_labels))
    else:
        res["pred"] = raw
    return res


def fuse_and_predict(fusion_model, visual_model, patches, features):
    """End-to-end inference over clips: frozen visual forward, temporal
    branches, sequence predictor.  Returns numpy outputs."""
    vm = visual_mixed_for_frames(visual_model, patches)
    labels_shape = vm.shape[:2]
    out = fusion_model.forward(vm, features)
    res = {name + "_probs": out[name + "_probs"].values
           for name in (br.name for br in fusion_model.fcfg.branches)}
    if fusion_model.vcfg.task == "classification":
        res["frame_logits"] = out["frame_logits"].values
        res["frame_preds"] = res["frame_logits"].argmax(axis=2)
    else:
        res["pred"] = out["pred"].values
    res["visual_mixed"] = vm
    assert res[next(iter(res))].shape[0] == labels_shape[0]
    return res


def train_fusion(dataset, visual_model, fcfg, tc: TrainConfig, seed,
                 features=None, targets=None):
    """Fit the temporal branches and sequence predictor on clip data.

    The visual model is never touched: its embeddings are precomputed as
    constants, and a parameter digest asserts bit-identity afterwards.
    Early stopping mirrors the visual trainer (best validation task loss,
    patience window, best-snapshot restore).
    """
    tc.validate()
    vcfg = visual_model.cfg
    model = FusionModel(vcfg, fcfg, seed)
    if features is None:
        features = {"aco": dataset.acoustic}
    if targets is None:
        targets = {"aco": dataset.acoustic_concepts}

    visual_before = params_digest(visual_model.store)
    vm_all = visual_mixed_for_frames(visual_model, dataset.patches)
    frame_labels = np.asarray(dataset.frame_labels)

    tr_idx, va_idx = split_indices(len(dataset), tc.val_fraction, seed)
    streams = _streams(seed)
    opt = Adam(model.store, tc)

    def val_loss():
        ev = evaluate_fusion(model, vm_all[va_idx],
                             {k: v[va_idx] for k, v in features.items()},
                             frame_labels[va_idx],
                             {k: v[va_idx] for k, v in targets.items()},
                             batch_size=tc.batch_size)
        return ev

    logs = []
    best = (np.inf, -1, None)
    for epoch in range(1, tc.max_epochs + 1):
        perm = tr_idx[streams["shuffle"].permutation(len(tr_idx))]
        train_parts = {"task": 0.0, "concept": 0.0}
        nb = 0
        for lo, hi in batch_ranges(len(perm), tc.batch_size):
            idx = perm[lo:hi]
            model.store.zero_grad()
            with ad.Graph() as g:
                out = model.forward(vm_all[idx],
                                    {k: v[idx] for k, v in features.items()},
                                    train=True, rng=streams["dropout"])
                total, parts = fusion_loss(out, frame_labels[idx],
                                           {k: v[idx] for k, v in targets.items()},
                                           vcfg, fcfg)
                value = total.item()
                if not np.isfinite(value):
                    raise TrainingDiverged(epoch, nb, value)
                g.backward(total)
            opt.step()
            for key in train_parts:
                train_parts[key] += parts[key]
            nb += 1
        ev = val_loss()
        monitor = ev["loss_parts"]["task"]
        row = {"stage": "fusion", "epoch": epoch,
               "train_task": train_parts["task"] / nb,
               "train_concept": train_parts["concept"] / nb,
               "val_task": ev["loss_parts"]["task"],
               "val_concept": ev["loss_parts"]["concept"],
               "val_monitor": monitor}
        if "frame_accuracy" in ev:
            row["val_accuracy"] = ev["frame_accuracy"]
        logs.append(row)
        if monitor < best[0] - 1e-12:
            best = (monitor, epoch, _snapshot(model.store))
        elif epoch - best[1] >= tc.patience:
            break
    if best[2] is not None:
        _restore(model.store, best[2])

    if params_digest(visual_model.store) != visual_before:
        raise AssertionError("frozen visual parameters changed during fusion training")
    return TrainResult(model=model, logs=logs, best_epoch=best[1], stopped_epoch=len(logs))


def save_fusion(path, model, extra=None):
    config = {"visual": model.vcfg.to_dict(), "fusion": model.fcfg.to_dict()}
    save_params(path, model.store, config, "fusion", model.seed, extra=extra)


def load_fusion(path):
    """Rebuild a FusionModel from a checkpoint."""
    header, params = load_params(path)
    if header.get("kind") != "fusion":
        raise ValueError(f"{path}: checkpoint kind {header.get('kind')!r}, expected 'fusion'")
    vcfg = ModelConfig.from_dict(header["config"]["visual"])
    fcfg = FusionConfig.from_dict(header["config"]["fusion"])
    model = FusionModel(vcfg, fcfg, seed=header["seed"])
    assign_params(model.store, params)
    return model, header


def write_frame_predictions(path, clip_ids, frame_preds, visual_probs,
                            acoustic_probs, visual_names, acoustic_names):
    """Per-frame prediction CSV: clip, frame, label, then every concept
    probability (acoustic values repeat per frame, they are clip-level)."""
    frame_preds = np.asarray(frame_preds)
    header = ["clip_id", "frame_idx", "prediction"]
    header += [f"v_{n}" for n in visual_names] + [f"a_{n}" for n in acoustic_names]
    lines = [",".join(header)]
    for ci, cid in enumerate(clip_ids):
        for f in range(frame_preds.shape[1]):
            cells = [str(cid), str(f), str(int(frame_preds[ci, f]))]
            cells += [f"{v:.10g}" for v in visual_probs[ci, f]]
            cells += [f"{v:.10g}" for v in acoustic_probs[ci]]
            lines.append(",".join(cells))
    with open(path, "w", encoding="ascii", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")
