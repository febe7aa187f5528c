"""Ground-truth spatial supervision.

Concept regions of interest are built as unions of soft-edged disks around
declared landmark subsets, then reduced to the model's patch grid by exact
block averaging.  Which landmarks belong to which concept, and how raw
annotation values map onto [0, 1], is declared per dataset in its manifest;
this module only executes those declarations.
"""

from dataclasses import dataclass, field

import numpy as np

from . import kernels

ROI_FALLOFF_PX = 2.0        # linear ramp width at the disk border
ROI_RADIUS_FRAC = 0.12      # default disk radius as a fraction of image width

ROI_MODES = ("landmarks", "centroid")


@dataclass(frozen=True)
class ConceptSpec:
    """Declaration of one concept: identity, spatial grounding, value scaling.

    modality is "visual" (may carry an ROI on the image) or "acoustic"
    (temporal track, never spatial); kind is "binary" (present/absent) or
    "continuous" (graded annotation normalized through bounds).  landmarks
    holds indices into the dataset's landmark scheme; roi_mode "landmarks"
    places one disk per landmark while "centroid" places a single disk at
    the subset's mean position (used for whole-face concepts such as head
    orientation).  bounds = (lo, hi) is the affine normalization window for
    raw continuous values.
    """

    name: str
    index: int
    modality: str = "visual"
    kind: str = "binary"
    landmarks: tuple = ()
    roi_mode: str = "landmarks"
    bounds: tuple = (0.0, 1.0)

    @property
    def roi_bearing(self):
        return len(self.landmarks) > 0

    def validate(self):
        if self.modality not in ("visual", "acoustic"):
            raise ValueError(f"concept {self.name!r}: unknown modality {self.modality!r}")
        if self.kind not in ("binary", "continuous"):
            raise ValueError(f"concept {self.name!r}: unknown kind {self.kind!r}")
        if self.roi_bearing and self.modality != "visual":
            raise ValueError(f"concept {self.name!r}: only visual concepts carry landmarks")
        if self.roi_mode not in ROI_MODES:
            raise ValueError(f"concept {self.name!r}: roi_mode must be one of {ROI_MODES}")
        lo, hi = self.bounds
        if not lo < hi:
            raise ValueError(f"concept {self.name!r}: bounds must satisfy lo < hi, got {self.bounds}")
        return self


@dataclass
class LandmarkSet:
    """Ordered pixel landmarks for one image; extent is (width, height)."""

    points: np.ndarray
    image_extent: tuple

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 2)
        w, h = self.image_extent
        x, y = self.points[:, 0], self.points[:, 1]
        if np.any(x < 0) or np.any(x >= w) or np.any(y < 0) or np.any(y >= h):
            raise ValueError(f"landmarks out of bounds for extent {self.image_extent}")


def roi_from_landmarks(landmarks, concept, radius=None):
    """Pixel-level ROI for one concept: union of disks over its landmark
    subset, value 1 inside each disk with a 2-pixel linear falloff outside.

    Returns an (H, W) float64 grid in [0, 1].
    """
    idx = np.asarray(concept.landmarks, dtype=np.int64)
    if idx.size == 0:
        raise ValueError(f"concept {concept.name!r} has no landmark subset; cannot build ROI")
    w, h = landmarks.image_extent
    if radius is None:
        radius = ROI_RADIUS_FRAC * w
    if radius <= 0:
        raise ValueError(f"radius must be positive, got {radius}")
    pts = landmarks.points[idx]
    if concept.roi_mode == "centroid":
        pts = pts.mean(axis=0, keepdims=True)
    return kernels.disk_union_map(int(h), int(w), np.ascontiguousarray(pts[:, 0]),
                                  np.ascontiguousarray(pts[:, 1]),
                                  float(radius), ROI_FALLOFF_PX)


def patchify(roi, sx, sy):
    """Average-pool an (H, W) map onto the (H/sy, W/sx) patch grid.

    Each patch cell is the exact arithmetic mean of its sy x sx pixel block.
    """
    roi = np.asarray(roi, dtype=np.float64)
    h, w = roi.shape
    if h % sy != 0 or w % sx != 0:
        raise ValueError(f"patchify: extents ({h}, {w}) not divisible by scale ({sy}, {sx})")
    return kernels.block_mean(roi, int(sy), int(sx))


def scalar_concept_value(raw, concept):
    """Normalize a raw annotation onto [0, 1] via the concept's declared
    bounds, clamping outside values to the endpoints."""
    lo, hi = concept.bounds
    if not lo < hi:
        raise ValueError(f"concept {concept.name!r}: degenerate bounds {concept.bounds}")
    return float(np.clip((float(raw) - lo) / (hi - lo), 0.0, 1.0))
