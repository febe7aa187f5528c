"""Dataset manifest: one versioned JSON file tying together images,
per-sample sidecars, acoustic tracks, and split assignment.

Layout under a corpus root:
    manifest.json                the index (this module's schema)
    images/<id>.ppm              binary P6 pixels
    images/<id>.json             sidecar: label, landmarks, concept values
    tracks/<clip_id>.csv         raw acoustic measurements per frame

The manifest stores image extents as [height, width] (matching the model
config); landmark points are [x, y] pixel coordinates.  Ground-truth
patch maps are not stored: they are regenerated from landmarks at load
time, which keeps augmented copies consistent by construction.
"""

import json
import os

import numpy as np

from .backbone import patch_rows
from .data import MultimodalDataset, VisualDataset
from .fusion import AcousticConceptSpec, acoustic_features, derive_acoustic_labels
from .ppm import image_to_float, read_ppm
from .roimaps import ConceptSpec, LandmarkSet, patchify, roi_from_landmarks

MANIFEST_VERSION = 1
SPLITS = ("train", "val", "test")


def manifest_path(root):
    return root if root.endswith(".json") else os.path.join(root, "manifest.json")


def save_manifest(m, root):
    path = manifest_path(root)
    with open(path, "w", encoding="ascii", newline="\n") as fh:
        json.dump(m, fh, sort_keys=True, separators=(",", ":"))
        fh.write("\n")
    return path


def load_manifest(root, check_files=True):
    path = manifest_path(root)
    with open(path, "r", encoding="ascii") as fh:
        m = json.load(fh)
    validate_manifest(m, os.path.dirname(path), check_files=check_files)
    return m


def validate_manifest(m, root, check_files=True, deep=False):
    """Structural checks: version, unique ids, legal splits, referenced
    files present, clips consistent.  deep=True also opens every sidecar
    and verifies its concept names against the inventory."""
    if m.get("version") != MANIFEST_VERSION:
        raise ValueError(f"unsupported manifest version {m.get('version')!r}, "
                         f"expected {MANIFEST_VERSION}")
    for key in ("kind", "image_size", "channels", "patch_size", "task",
                "n_classes", "concepts", "samples"):
        if key not in m:
            raise ValueError(f"manifest missing required key {key!r}")
    if m["kind"] not in ("visual", "multimodal"):
        raise ValueError(f"unknown manifest kind {m['kind']!r}")
    names = [c["name"] for c in m["concepts"]]
    if len(set(names)) != len(names):
        raise ValueError("duplicate concept names in inventory")
    ids = [s["id"] for s in m["samples"]]
    if len(set(ids)) != len(ids):
        raise ValueError("duplicate sample ids")
    for s in m["samples"]:
        if s["split"] not in SPLITS:
            raise ValueError(f"sample {s['id']}: unknown split {s['split']!r}")
        if check_files:
            for key in ("image", "sidecar"):
                p = os.path.join(root, s[key])
                if not os.path.exists(p):
                    raise ValueError(f"sample {s['id']}: missing file {s[key]}")
    if m["kind"] == "multimodal":
        for key in ("clips", "clip_len", "acoustic_concepts", "track_bounds"):
            if key not in m:
                raise ValueError(f"multimodal manifest missing key {key!r}")
        by_id = {s["id"]: s for s in m["samples"]}
        seen = set()
        for c in m["clips"]:
            if len(c["frames"]) != m["clip_len"] or len(c["frame_labels"]) != m["clip_len"]:
                raise ValueError(f"clip {c['id']}: frame count != clip_len {m['clip_len']}")
            for fid in c["frames"]:
                if fid not in by_id:
                    raise ValueError(f"clip {c['id']}: unknown frame {fid}")
                if fid in seen:
                    raise ValueError(f"frame {fid} referenced by more than one clip")
                seen.add(fid)
                if by_id[fid]["split"] != c["split"]:
                    raise ValueError(f"clip {c['id']}: frame {fid} in split "
                                     f"{by_id[fid]['split']}, clip in {c['split']}")
            if check_files and not os.path.exists(os.path.join(root, c["track"])):
                raise ValueError(f"clip {c['id']}: missing track {c['track']}")
    if deep:
        known = set(names)
        for s in m["samples"]:
            side = load_sidecar(root, s)
            for name in side["concepts"]:
                if name not in known:
                    raise ValueError(f"sample {s['id']}: concept {name!r} not in inventory")


def visual_concepts(m):
    """Visual inventory entries as ConceptSpec objects, in index order."""
    specs = []
    for c in m["concepts"]:
        if c["modality"] != "visual":
            continue
        spec = ConceptSpec(name=c["name"], index=c["index"], modality="visual",
                           kind=c["kind"], landmarks=tuple(c["landmarks"]),
                           roi_mode=c["roi_mode"],
                           bounds=tuple(c["bounds"]))
        spec.validate()
        specs.append(spec)
    return sorted(specs, key=lambda s: s.index)


def acoustic_concepts_from_manifest(m):
    return [AcousticConceptSpec.from_dict(d) for d in m["acoustic_concepts"]]


def load_sidecar(root, sample):
    with open(os.path.join(root, sample["sidecar"]), "r", encoding="ascii") as fh:
        return json.load(fh)


def ground_truth_maps(landmarks, specs, active, extent_wh, patch_size):
    """Planted patch maps: the block-averaged ROI for each active concept,
    all-zeros for inactive ones (nothing is planted there)."""
    lm = LandmarkSet(np.asarray(landmarks, dtype=np.float64), extent_wh)
    maps = []
    for i, spec in enumerate(specs):
        if active[i] >= 0.5:
            roi = roi_from_landmarks(lm, spec)
            maps.append(patchify(roi, patch_size, patch_size).ravel())
        else:
            h, w = extent_wh[1] // patch_size, extent_wh[0] // patch_size
            maps.append(np.zeros(h * w))
    return np.stack(maps)


def _sample_arrays(root, m, sample, specs, augment_ops, augment_seed, ordinal):
    from . import synthdata
    side = load_sidecar(root, sample)
    image = image_to_float(read_ppm(os.path.join(root, sample["image"])))
    landmarks = np.asarray(side["landmarks"], dtype=np.float64)
    concepts = np.array([float(side["concepts"][s.name]) for s in specs])
    label = sample["label"]
    if augment_ops:
        out = synthdata.augment({"image": image, "landmarks": landmarks,
                                 "label": label, "concepts": concepts},
                                augment_ops, [int(augment_seed), ordinal])
        image, landmarks = out["image"], out["landmarks"]
    return image, landmarks, concepts, label


def load_visual_dataset(root, split, augment_ops=None, augment_seed=0):
    """Build the patch-level dataset for one split.

    Works for both manifest kinds (a multimodal manifest's samples are its
    clip frames, labeled per frame).  augment_ops, when given, transforms
    each image and its landmarks before patching; maps always come from
    the (possibly transformed) landmarks.
    """
    m = load_manifest(root)
    root = os.path.dirname(manifest_path(root))
    specs = visual_concepts(m)
    h, w = m["image_size"]
    p = m["patch_size"]
    chosen = [s for s in m["samples"] if s["split"] == split]
    if not chosen:
        raise ValueError(f"no samples in split {split!r}")
    images, labels, concepts, maps = [], [], [], []
    for ordinal, s in enumerate(chosen):
        img, lm, act, label = _sample_arrays(root, m, s, specs, augment_ops,
                                             augment_seed, ordinal)
        images.append(img)
        labels.append(label)
        concepts.append(act)
        maps.append(ground_truth_maps(lm, specs, act, (w, h), p))
    patches = patch_rows(np.stack(images), p)
    labels = np.asarray(labels)
    if m["task"] == "classification":
        labels = labels.astype(np.int64)
    meta = {"ids": [s["id"] for s in chosen], "split": split, "root": root,
            "task": m["task"], "n_classes": m["n_classes"],
            "concept_names": [s.name for s in specs]}
    return VisualDataset(patches, labels, np.stack(concepts), np.stack(maps), meta)


def read_track(root, clip):
    track = np.loadtxt(os.path.join(root, clip["track"]), delimiter=",",
                       skiprows=1, ndmin=2)
    return np.ascontiguousarray(track[:, 1:])      # drop the frame_idx column


def load_multimodal_dataset(root, split):
    """Build the clip-level dataset for one split: per-frame patch rows,
    one normalized acoustic window per clip, and derived concept targets."""
    m = load_manifest(root)
    if m["kind"] != "multimodal":
        raise ValueError(f"manifest kind {m['kind']!r} has no clips")
    root = os.path.dirname(manifest_path(root))
    specs = visual_concepts(m)
    inventory = acoustic_concepts_from_manifest(m)
    bounds = m["track_bounds"]
    h, w = m["image_size"]
    p = m["patch_size"]
    by_id = {s["id"]: s for s in m["samples"]}
    chosen = [c for c in m["clips"] if c["split"] == split]
    if not chosen:
        raise ValueError(f"no clips in split {split!r}")
    patches, acoustic, frame_labels, targets = [], [], [], []
    for c in chosen:
        frames = []
        for fid in c["frames"]:
            img, _, _, _ = _sample_arrays(root, m, by_id[fid], specs, None, 0, 0)
            frames.append(img)
        patches.append(patch_rows(np.stack(frames), p))
        track = read_track(root, c)
        acoustic.append(acoustic_features(track, bounds))
        targets.append(derive_acoustic_labels(track, inventory))
        frame_labels.append(c["frame_labels"])
    meta = {"ids": [c["id"] for c in chosen], "split": split, "root": root,
            "task": m["task"], "n_classes": m["n_classes"],
            "clip_len": m["clip_len"],
            "acoustic_names": [s.name for s in inventory],
            "concept_names": [s.name for s in specs]}
    return MultimodalDataset(np.stack(patches), np.stack(acoustic),
                             np.asarray(frame_labels, dtype=np.int64),
                             np.stack(targets), meta)
