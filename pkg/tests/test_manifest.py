import json
import os

import numpy as np
import pytest

from agcm import manifest as mf
from agcm import synthdata as sd
from agcm.fusion import acoustic_features, derive_acoustic_labels
from agcm.roimaps import LandmarkSet, patchify, roi_from_landmarks


@pytest.fixture(scope="module")
def visual_root(tmp_path_factory):
    root = str(tmp_path_factory.mktemp("vis"))
    sd.generate_visual(sd.default_plant(), {"train": 8, "test": 3}, seed=9, root=root)
    return root


@pytest.fixture(scope="module")
def mm_root(tmp_path_factory):
    root = str(tmp_path_factory.mktemp("mm"))
    sd.generate_multimodal(sd.multimodal_plant(), {"train": 3, "test": 2},
                           seed=9, root=root, k=5)
    return root


def rewrite(root, mutate):
    m = json.load(open(os.path.join(root, "manifest.json")))
    mutate(m)
    json.dump(m, open(os.path.join(root, "manifest.json"), "w"))


class TestValidation:
    def test_loads_clean(self, visual_root):
        m = mf.load_manifest(visual_root)
        assert m["kind"] == "visual"
        assert len(m["samples"]) == 11

    def test_version_gate(self, visual_root, tmp_path):
        import shutil
        root = str(tmp_path / "v")
        shutil.copytree(visual_root, root)
        rewrite(root, lambda m: m.update(version=99))
        with pytest.raises(ValueError, match="version"):
            mf.load_manifest(root)

    def test_missing_file_detected(self, visual_root, tmp_path):
        import shutil
        root = str(tmp_path / "m")
        shutil.copytree(visual_root, root)
        os.remove(os.path.join(root, "images", "s000002.ppm"))
        with pytest.raises(ValueError, match="missing file"):
            mf.load_manifest(root)

    def test_duplicate_ids_detected(self, visual_root, tmp_path):
        import shutil
        root = str(tmp_path / "d")
        shutil.copytree(visual_root, root)
        rewrite(root, lambda m: m["samples"].append(dict(m["samples"][0])))
        with pytest.raises(ValueError, match="duplicate sample ids"):
            mf.load_manifest(root)

    def test_unknown_split_detected(self, visual_root, tmp_path):
        import shutil
        root = str(tmp_path / "s")
        shutil.copytree(visual_root, root)
        rewrite(root, lambda m: m["samples"][0].update(split="holdout"))
        with pytest.raises(ValueError, match="split"):
            mf.load_manifest(root)

    def test_deep_check_catches_alien_concept(self, visual_root, tmp_path):
        import shutil
        root = str(tmp_path / "a")
        shutil.copytree(visual_root, root)
        m = mf.load_manifest(root)
        side_path = os.path.join(root, m["samples"][0]["sidecar"])
        side = json.load(open(side_path))
        side["concepts"]["phantom"] = 1.0
        json.dump(side, open(side_path, "w"))
        with pytest.raises(ValueError, match="phantom"):
            mf.validate_manifest(m, root, deep=True)

    def test_clip_consistency_checked(self, mm_root, tmp_path):
        import shutil
        root = str(tmp_path / "c")
        shutil.copytree(mm_root, root)
        rewrite(root, lambda m: m["clips"][0]["frames"].__setitem__(0, "s999999"))
        with pytest.raises(ValueError, match="unknown frame"):
            mf.load_manifest(root)


class TestVisualLoading:
    def test_shapes_and_split_selection(self, visual_root):
        tr = mf.load_visual_dataset(visual_root, "train")
        te = mf.load_visual_dataset(visual_root, "test")
        assert len(tr) == 8 and len(te) == 3
        assert tr.patches.shape == (8, 16, 768)
        assert tr.concepts.shape == (8, 8)
        assert tr.maps.shape == (8, 8, 16)
        with pytest.raises(ValueError, match="split"):
            mf.load_visual_dataset(visual_root, "val")

    def test_maps_match_independent_roi_route(self, visual_root):
        m = mf.load_manifest(visual_root)
        ds = mf.load_visual_dataset(visual_root, "train")
        specs = mf.visual_concepts(m)
        h, w = m["image_size"]
        side = mf.load_sidecar(visual_root, m["samples"][0])
        lset = LandmarkSet(np.asarray(side["landmarks"]), (w, h))
        for i, spec in enumerate(specs):
            if side["concepts"][spec.name] >= 0.5:
                want = patchify(roi_from_landmarks(lset, spec), 16, 16).ravel()
                assert np.array_equal(ds.maps[0, i], want)
            else:
                assert np.all(ds.maps[0, i] == 0)

    def test_pixels_match_written_image(self, visual_root):
        from agcm.ppm import image_to_float, read_ppm
        m = mf.load_manifest(visual_root)
        ds = mf.load_visual_dataset(visual_root, "train")
        img = image_to_float(read_ppm(os.path.join(visual_root, m["samples"][0]["image"])))
        from agcm.backbone import patch_rows
        assert np.array_equal(ds.patches[0], patch_rows(img[None], 16)[0])

    def test_augmented_load_differs_but_labels_match(self, visual_root):
        plain = mf.load_visual_dataset(visual_root, "train")
        aug = mf.load_visual_dataset(visual_root, "train",
                                     augment_ops={"hflip": 1.0}, augment_seed=1)
        assert not np.array_equal(plain.patches, aug.patches)
        assert np.array_equal(plain.labels, aug.labels)
        assert np.array_equal(plain.concepts, aug.concepts)
        # maps regenerated from mirrored landmarks: per-sample mass preserved
        assert np.allclose(plain.maps.sum(axis=2), aug.maps.sum(axis=2), atol=1e-9)


class TestMultimodalLoading:
    def test_shapes_and_normalization(self, mm_root):
        mm = mf.load_multimodal_dataset(mm_root, "train")
        assert mm.patches.shape == (3, 5, 16, 768)
        assert mm.acoustic.shape == (3, 20)
        assert mm.frame_labels.shape == (3, 5)
        assert mm.acoustic_concepts.shape == (3, 6)
        assert mm.acoustic.min() >= 0.0 and mm.acoustic.max() <= 1.0

    def test_targets_match_direct_derivation(self, mm_root):
        m = mf.load_manifest(mm_root)
        mm = mf.load_multimodal_dataset(mm_root, "train")
        inv = mf.acoustic_concepts_from_manifest(m)
        for j, clip in enumerate(c for c in m["clips"] if c["split"] == "train"):
            track = mf.read_track(mm_root, clip)
            assert np.array_equal(mm.acoustic_concepts[j],
                                  derive_acoustic_labels(track, inv))
            assert np.array_equal(mm.acoustic[j],
                                  acoustic_features(track, m["track_bounds"]))

    def test_visual_kind_has_no_clips(self, visual_root):
        with pytest.raises(ValueError, match="clips"):
            mf.load_multimodal_dataset(visual_root, "train")
