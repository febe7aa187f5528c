"""Planted-ground-truth corpus generation.

Every sample is procedural: a textured background, distractor shapes in a
band that never touches any concept region, and one motif per active
concept drawn at that concept's (jittered) landmark.  Because rendering
decisions ARE the labels, concept supervision, attention-map supervision,
and occlusion behavior can all be verified exactly.

Class templates activate a redundancy pair, two concepts on opposite
image halves either of which identifies the class, so occluding one half
must leave the class recoverable from the other.  Multimodal corpora add
a per-clip acoustic track whose derived concept levels carry one label
bit the visual stream cannot see.

Determinism: sample ``i`` draws from the Philox stream keyed ``(seed,
i)``, clip-level draws from ``(seed, 2**32 + clip)``, so generation could
be parallelized per sample without changing a byte of output.
"""

import json
import os
from dataclasses import dataclass, field

import numpy as np

from . import manifest as mf
from .fusion import (AcousticConceptSpec, default_acoustic_inventory,
                     default_track_bounds, derive_acoustic_labels)
from .ppm import float_to_image, write_ppm

SHAPES = ("disk", "ring", "cross", "square")

PALETTE = ((0.95, 0.25, 0.20), (0.20, 0.85, 0.30), (0.25, 0.40, 0.95),
           (0.95, 0.85, 0.20), (0.90, 0.30, 0.90), (0.25, 0.90, 0.85),
           (0.95, 0.55, 0.20), (0.75, 0.75, 0.95))


@dataclass(frozen=True)
class AcousticPlant:
    """Per-clip acoustic planting: which raw column carries the label bit,
    the two levels it is planted at, and how often clips are silent."""

    inventory: tuple = field(default_factory=default_acoustic_inventory)
    track_bounds: tuple = field(default_factory=default_track_bounds)
    bit_column: int = 1                 # loudness carries the label bit
    high: float = 0.85
    low: float = 0.15
    silence_prob: float = 0.1
    frame_noise: float = 0.01           # per-frame noise, fraction of range

    def validate(self):
        for spec in self.inventory:
            spec.validate()
        if not 0.0 <= self.low < self.high <= 1.0:
            raise ValueError(f"acoustic levels need 0 <= low < high <= 1, "
                             f"got ({self.low}, {self.high})")
        if not 0.0 <= self.silence_prob < 1.0:
            raise ValueError(f"silence_prob {self.silence_prob} outside [0, 1)")
        if self.bit_column not in (0, 1, 3):
            raise ValueError("label bit must ride a level column (pitch, loudness, rate)")


@dataclass(frozen=True)
class PlantSpec:
    """Complete recipe for a planted corpus."""

    image_size: tuple = (64, 64)            # (height, width)
    channels: int = 3
    patch_size: int = 16
    concept_names: tuple = ()
    concept_centers: tuple = ()             # (x, y) per concept
    class_templates: tuple = ()             # per class: activation prob per concept
    redundancy_pairs: tuple = ()            # one (i, j) per class
    label_noise: float = 0.0
    motif_radius: float = 4.5
    motif_alpha: float = 0.85
    center_jitter: float = 1.5
    distractor_count: tuple = (3, 7)        # [lo, hi) shapes per image
    acoustic: AcousticPlant = None

    @property
    def n_concepts(self):
        return len(self.concept_names)

    @property
    def n_visual_classes(self):
        return len(self.class_templates)

    @property
    def n_classes(self):
        # acoustic corpora double the label space with the planted bit
        return self.n_visual_classes * (2 if self.acoustic else 1)

    def validate(self):
        h, w = self.image_size
        if h % self.patch_size or w % self.patch_size:
            raise ValueError(f"image size {self.image_size} not divisible by "
                             f"patch {self.patch_size}")
        n = self.n_concepts
        if n == 0 or len(self.concept_centers) != n:
            raise ValueError("concept names and centers must align and be non-empty")
        for tmpl in self.class_templates:
            if len(tmpl) != n:
                raise ValueError("class template length must equal concept count")
            if max(tmpl) < 0.5:
                raise ValueError("each class must activate at least one concept")
            if min(tmpl) < 0.0 or max(tmpl) > 1.0:
                raise ValueError("activation probabilities must lie in [0, 1]")
        if not self.class_templates:
            raise ValueError("need at least one class template")
        for i, j in self.redundancy_pairs:
            if self.concept_centers[i] == self.concept_centers[j]:
                raise ValueError(f"redundancy pair ({i}, {j}) shares one region")
        if not 0.0 <= self.label_noise < 1.0:
            raise ValueError(f"label_noise {self.label_noise} outside [0, 1)")
        if not 0.0 < self.motif_alpha <= 1.0:
            raise ValueError(f"motif_alpha {self.motif_alpha} outside (0, 1]")
        if self.acoustic is not None:
            self.acoustic.validate()
        return self


def default_plant(**overrides):
    """The 4-class, 8-concept visual corpus.

    Upper-row concepts pair with lower-row ones; class k activates pair
    (k, k+4) with high probability and everything else rarely.
    """
    names = ("left_brow", "right_brow", "left_eye", "right_eye",
             "left_cheek", "right_cheek", "lip_corner", "chin")
    xs = (8.0, 24.0, 40.0, 56.0)
    centers = tuple((x, 8.0) for x in xs) + tuple((x, 56.0) for x in xs)
    templates = []
    for k in range(4):
        templates.append(tuple(0.95 if i in (k, k + 4) else 0.05 for i in range(8)))
    spec = dict(concept_names=names, concept_centers=centers,
                class_templates=tuple(templates),
                redundancy_pairs=((0, 4), (1, 5), (2, 6), (3, 7)))
    spec.update(overrides)
    return PlantSpec(**spec).validate()


def multimodal_plant(**overrides):
    """Two visual classes crossed with one acoustic level bit (4 labels)."""
    base = default_plant()
    templates = tuple(base.class_templates[:2])
    spec = dict(concept_names=base.concept_names,
                concept_centers=base.concept_centers,
                class_templates=templates,
                redundancy_pairs=((0, 4), (1, 5)),
                acoustic=AcousticPlant())
    spec.update(overrides)
    return PlantSpec(**spec).validate()


def _motif_mask(shape, cx, cy, radius, extent_hw):
    h, w = extent_hw
    yy, xx = np.mgrid[0:h, 0:w]
    dx = xx - cx
    dy = yy - cy
    if shape == "disk":
        m = dx * dx + dy * dy <= radius * radius
    elif shape == "ring":
        rr = np.hypot(dx, dy)
        m = (rr <= radius) & (rr >= radius - 1.8)
    elif shape == "cross":
        m = ((np.abs(dx) <= 1.6) | (np.abs(dy) <= 1.6)) & \
            (np.maximum(np.abs(dx), np.abs(dy)) <= radius)
    elif shape == "square":
        m = np.maximum(np.abs(dx), np.abs(dy)) <= 0.8 * radius
    else:
        raise ValueError(f"unknown motif shape {shape!r}")
    return m.astype(np.float64)


def _draw(image, shape, cx, cy, radius, color, alpha):
    m = _motif_mask(shape, cx, cy, radius, image.shape[1:]) * alpha
    for c in range(3):
        image[c] = image[c] * (1.0 - m) + color[c] * m


def _background(rng, extent_hw):
    h, w = extent_hw
    ch, cw = -(-h // 8), -(-w // 8)
    coarse = rng.uniform(-0.12, 0.12, size=(ch, cw))
    tex = np.kron(coarse, np.ones((8, 8)))[:h, :w]
    lum = np.clip(0.35 + tex + rng.uniform(-0.04, 0.04, size=(h, w)), 0.0, 1.0)
    return np.repeat(lum[None], 3, axis=0)


def render_sample(plant, rng, visual_class=None):
    """One planted image; returns (image (C, H, W), landmarks (n, 2),
    visual_class, active (n,))."""
    h, w = plant.image_size
    n = plant.n_concepts
    if visual_class is None:
        visual_class = int(rng.integers(plant.n_visual_classes))
    template = np.asarray(plant.class_templates[visual_class])
    active = (rng.uniform(size=n) < template).astype(np.float64)
    image = _background(rng, (h, w))
    centers = np.asarray(plant.concept_centers, dtype=np.float64)
    landmarks = centers + rng.uniform(-plant.center_jitter, plant.center_jitter,
                                      size=(n, 2))
    lo, hi = plant.distractor_count
    for _ in range(int(rng.integers(lo, hi))):
        shape = SHAPES[rng.integers(len(SHAPES))]
        color = PALETTE[rng.integers(len(PALETTE))]
        # distractors stay in a middle band that no concept region reaches
        cx = rng.uniform(0.19 * w, 0.81 * w)
        cy = rng.uniform(0.41 * h, 0.59 * h)
        _draw(image, shape, cx, cy, plant.motif_radius, color, plant.motif_alpha)
    for i in np.flatnonzero(active):
        _draw(image, SHAPES[i % len(SHAPES)], landmarks[i, 0], landmarks[i, 1],
              plant.motif_radius, PALETTE[i % len(PALETTE)], plant.motif_alpha)
    return image, landmarks, visual_class, active


def _sample_rng(seed, index):
    return np.random.Generator(np.random.Philox(key=[int(seed), int(index)]))


def _clip_rng(seed, clip_index):
    return np.random.Generator(np.random.Philox(key=[int(seed), (1 << 32) + int(clip_index)]))


def _noisy_label(label, n_classes, noise, rng):
    if noise > 0 and rng.uniform() < noise:
        return int((label + 1 + rng.integers(n_classes - 1)) % n_classes)
    return int(label)


def _concept_inventory(plant):
    inv = []
    for i, name in enumerate(plant.concept_names):
        inv.append({"name": name, "index": i, "modality": "visual",
                    "kind": "binary", "landmarks": [i],
                    "roi_mode": "landmarks", "bounds": [0.0, 1.0]})
    return inv


def _write_sample(root, sid, image, landmarks, label, active, plant):
    rel_img = f"images/{sid}.ppm"
    rel_side = f"images/{sid}.json"
    write_ppm(os.path.join(root, rel_img), float_to_image(image))
    side = {"id": sid, "label": int(label),
            "landmarks": [[float(x), float(y)] for x, y in landmarks],
            "concepts": {name: float(active[i])
                         for i, name in enumerate(plant.concept_names)}}
    with open(os.path.join(root, rel_side), "w", encoding="ascii", newline="\n") as fh:
        json.dump(side, fh, sort_keys=True, separators=(",", ":"))
        fh.write("\n")
    return rel_img, rel_side


def _base_manifest(plant, kind, seed):
    h, w = plant.image_size
    return {"version": mf.MANIFEST_VERSION, "kind": kind,
            "image_size": [h, w], "channels": plant.channels,
            "patch_size": plant.patch_size, "task": "classification",
            "n_classes": plant.n_classes, "seed": int(seed),
            "concepts": _concept_inventory(plant),
            "redundancy_pairs": [list(p) for p in plant.redundancy_pairs]}


def generate_visual(plant, counts, seed, root):
    """Write a visual corpus under root and return its manifest.

    counts: samples per split, e.g. {"train": 2000, "test": 500}, or a
    bare int meaning train only.  Sample i derives its randomness from
    (seed, i), independent of split boundaries.
    """
    plant.validate()
    if isinstance(counts, int):
        counts = {"train": counts}
    if not counts or min(counts.values()) <= 0:
        raise ValueError(f"sample counts must be positive, got {counts}")
    os.makedirs(os.path.join(root, "images"), exist_ok=True)
    m = _base_manifest(plant, "visual", seed)
    samples = []
    idx = 0
    for split in mf.SPLITS:
        for _ in range(counts.get(split, 0)):
            rng = _sample_rng(seed, idx)
            image, lm, vc, active = render_sample(plant, rng)
            label = _noisy_label(vc, plant.n_classes, plant.label_noise, rng)
            sid = f"s{idx:06d}"
            rel_img, rel_side = _write_sample(root, sid, image, lm, label, active, plant)
            samples.append({"id": sid, "image": rel_img, "sidecar": rel_side,
                            "label": label, "split": split})
            idx += 1
    m["samples"] = samples
    mf.save_manifest(m, root)
    mf.validate_manifest(m, root, deep=True)
    return m


def _synth_track(levels, silent, k, rng, plant):
    """Raw (k, 4) measurement track realizing the chosen levels.

    Level columns get a constant base; variation levels ride as an
    alternating +/- half-amplitude pattern whose mean absolute first
    difference equals the planted amplitude exactly (before noise).
    """
    if silent:
        return np.zeros((k, 4))
    aco = plant.acoustic
    mean_bounds = {s.column: s.bounds for s in aco.inventory if s.rule == "mean"}
    var_bounds = {s.column: s.bounds for s in aco.inventory if s.rule == "mean_abs_diff"}
    sign = np.where(np.arange(k) % 2 == 0, 1.0, -1.0)
    track = np.zeros((k, 4))
    for col in range(4):
        if ("pct", col) in levels:
            track[:, col] = levels[("pct", col)] * 100.0
        else:
            mlo, mhi = mean_bounds[col]
            track[:, col] = mlo + levels[("mean", col)] * (mhi - mlo)
            if col in var_bounds:
                vlo, vhi = var_bounds[col]
                amp = vlo + levels[("var", col)] * (vhi - vlo)
                track[:, col] += 0.5 * amp * sign
        lo, hi = aco.track_bounds[col]
        if aco.frame_noise > 0:
            track[:, col] += rng.uniform(-aco.frame_noise * (hi - lo),
                                         aco.frame_noise * (hi - lo), size=k)
    return np.clip(track, 0.0, None)


def _clip_levels(plant, rng, bit):
    aco = plant.acoustic
    levels = {}
    for s in aco.inventory:
        key = ("pct", s.column) if s.rule == "percentage" else \
            (("var", s.column) if s.rule == "mean_abs_diff" else ("mean", s.column))
        levels[key] = float(rng.choice([0.25, 0.75]))
    levels[("mean", aco.bit_column)] = aco.high if bit else aco.low
    return levels


def write_track(path, track):
    lines = ["frame_idx,pitch,loudness,jitter,rate"]
    for j, row in enumerate(np.asarray(track)):
        lines.append(",".join([str(j)] + [repr(float(v)) for v in row]))
    with open(path, "w", encoding="ascii", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def generate_multimodal(plant, clip_counts, seed, root, k=30):
    """Write a clip corpus: k frames per clip plus one acoustic track whose
    derived concept levels carry a label bit the frames cannot show."""
    plant.validate()
    if plant.acoustic is None:
        raise ValueError("plant has no acoustic block")
    if isinstance(clip_counts, int):
        clip_counts = {"train": clip_counts}
    if not clip_counts or min(clip_counts.values()) <= 0:
        raise ValueError(f"clip counts must be positive, got {clip_counts}")
    if k < 2:
        raise ValueError("clips need at least 2 frames")
    os.makedirs(os.path.join(root, "images"), exist_ok=True)
    os.makedirs(os.path.join(root, "tracks"), exist_ok=True)
    aco = plant.acoustic
    m = _base_manifest(plant, "multimodal", seed)
    m["clip_len"] = k
    m["acoustic_concepts"] = [s.to_dict() for s in aco.inventory]
    m["track_bounds"] = [list(b) for b in aco.track_bounds]
    samples, clips = [], []
    ci = 0
    for split in mf.SPLITS:
        for _ in range(clip_counts.get(split, 0)):
            crng = _clip_rng(seed, ci)
            silent = bool(crng.uniform() < aco.silence_prob)
            bit = 0 if silent else int(crng.integers(2))
            vc = int(crng.integers(plant.n_visual_classes))
            label = plant.n_visual_classes * bit + vc
            levels = _clip_levels(plant, crng, bit)
            track = _synth_track(levels, silent, k, crng, plant)
            cid = f"c{ci:05d}"
            write_track(os.path.join(root, "tracks", f"{cid}.csv"), track)
            frame_ids = []
            for f in range(k):
                gidx = ci * k + f
                rng = _sample_rng(seed, gidx)
                image, lm, _, active = render_sample(plant, rng, visual_class=vc)
                flabel = _noisy_label(label, plant.n_classes, plant.label_noise, rng)
                sid = f"s{gidx:06d}"
                rel_img, rel_side = _write_sample(root, sid, image, lm, flabel,
                                                  active, plant)
                samples.append({"id": sid, "image": rel_img, "sidecar": rel_side,
                                "label": flabel, "split": split})
                frame_ids.append(sid)
            clips.append({"id": cid, "frames": frame_ids,
                          "track": f"tracks/{cid}.csv",
                          "frame_labels": [s["label"] for s in samples[-k:]],
                          "split": split})
            ci += 1
    m["samples"] = samples
    m["clips"] = clips
    mf.save_manifest(m, root)
    mf.validate_manifest(m, root, deep=True)
    return m


def _rotate_points(points, theta, center):
    c, s = np.cos(theta), np.sin(theta)
    rel = points - center
    return np.stack([center[0] + c * rel[:, 0] - s * rel[:, 1],
                     center[1] + s * rel[:, 0] + c * rel[:, 1]], axis=1)


def augment(sample, ops, seed):
    """Label-preserving augmentation of one sample dict.

    ops keys: hflip (probability), rotate (max degrees, nearest-neighbor
    resampling), erase (area fraction, noise filled).  Landmarks follow
    the geometry exactly; labels and concept values never change, and
    ground-truth maps are meant to be rebuilt from the new landmarks.
    """
    known = {"hflip", "rotate", "erase"}
    unknown = set(ops) - known
    if unknown:
        raise ValueError(f"unknown augmentation ops {sorted(unknown)}")
    rng = np.random.Generator(np.random.Philox(key=seed))
    image = np.array(sample["image"], dtype=np.float64)
    landmarks = np.array(sample["landmarks"], dtype=np.float64)
    _, h, w = image.shape

    if rng.uniform() < ops.get("hflip", 0.0):
        image = image[:, :, ::-1].copy()
        landmarks[:, 0] = (w - 1) - landmarks[:, 0]

    max_deg = ops.get("rotate", 0.0)
    if max_deg:
        theta = np.deg2rad(rng.uniform(-max_deg, max_deg))
        center = np.array([(w - 1) / 2.0, (h - 1) / 2.0])
        yy, xx = np.mgrid[0:h, 0:w]
        # inverse map: each output pixel samples the source rotated by -theta
        c, s = np.cos(theta), np.sin(theta)
        sx = center[0] + c * (xx - center[0]) + s * (yy - center[1])
        sy = center[1] - s * (xx - center[0]) + c * (yy - center[1])
        ix = np.clip(np.rint(sx).astype(np.int64), 0, w - 1)
        iy = np.clip(np.rint(sy).astype(np.int64), 0, h - 1)
        image = image[:, iy, ix]
        landmarks = _rotate_points(landmarks, theta, center)
        landmarks[:, 0] = np.clip(landmarks[:, 0], 0.0, w - 1)
        landmarks[:, 1] = np.clip(landmarks[:, 1], 0.0, h - 1)

    area = ops.get("erase", 0.0)
    if area:
        aspect = rng.uniform(0.5, 2.0)
        ew = max(1, int(round(np.sqrt(area * w * h * aspect))))
        eh = max(1, int(round(area * w * h / ew)))
        ew, eh = min(ew, w), min(eh, h)
        x0 = int(rng.integers(0, w - ew + 1))
        y0 = int(rng.integers(0, h - eh + 1))
        image[:, y0:y0 + eh, x0:x0 + ew] = rng.uniform(size=(image.shape[0], eh, ew))

    return {"image": image, "landmarks": landmarks,
            "label": sample["label"], "concepts": np.array(sample["concepts"])}
