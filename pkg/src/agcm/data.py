"""In-memory dataset containers shared by the loaders and the trainers."""

from dataclasses import dataclass, field

import numpy as np


@dataclass
class VisualDataset:
    """Patch-level supervised samples.

    patches: (N, n_tokens, patch_dim) rows ready for the encoder;
    labels: (N,) int class ids or float regression targets;
    concepts: (N, n_concepts) soft targets in [0, 1];
    maps: (N, n_concepts, n_tokens) ground-truth patch maps.
    """

    patches: np.ndarray
    labels: np.ndarray
    concepts: np.ndarray
    maps: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        n = len(self.labels)
        if not (len(self.patches) == len(self.concepts) == len(self.maps) == n):
            raise ValueError("dataset arrays disagree on sample count")

    def __len__(self):
        return len(self.labels)

    def subset(self, idx):
        idx = np.asarray(idx)
        return VisualDataset(self.patches[idx], self.labels[idx],
                             self.concepts[idx], self.maps[idx], dict(self.meta))


@dataclass
class MultimodalDataset:
    """Clip-level samples: per-frame visual patches plus one acoustic window.

    patches: (N, n_frames, n_tokens, patch_dim); acoustic: (N, feat) one
    normalized descriptor vector per clip, shared by all its frames;
    frame_labels: (N, n_frames) int; acoustic_concepts: (N, n_acoustic)
    per-clip supervision targets in [0, 1].
    """

    patches: np.ndarray
    acoustic: np.ndarray
    frame_labels: np.ndarray
    acoustic_concepts: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        n = len(self.frame_labels)
        if not (len(self.patches) == len(self.acoustic) == len(self.acoustic_concepts) == n):
            raise ValueError("dataset arrays disagree on sample count")

    def __len__(self):
        return len(self.frame_labels)

    def subset(self, idx):
        idx = np.asarray(idx)
        return MultimodalDataset(self.patches[idx], self.acoustic[idx],
                                 self.frame_labels[idx], self.acoustic_concepts[idx],
                                 dict(self.meta))


def split_indices(n, val_fraction, seed):
    """Deterministic shuffled train/validation split."""
    rng = np.random.Generator(np.random.Philox(key=[int(seed), 0x5EED]))
    order = rng.permutation(n)
    n_val = max(1, int(round(n * val_fraction)))
    if n_val >= n:
        raise ValueError(f"validation split consumes all {n} samples")
    return order[n_val:], order[:n_val]


def batch_ranges(n, batch_size):
    return [(i, min(i + batch_size, n)) for i in range(0, n, batch_size)]
