"""Rotation, cutout/patch-swap and histogram-shift augmentations.

Each augmentation returns enough provenance to replay it exactly; the
rotation class and the clean (pre-cutout) image are the labels of the
rotation and inpainting proxy tasks.
"""
import enum
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import BatchTooSmall

APPLIED_ORDER = ("rotate", "cutout_swap", "histogram_shift")

CUTOUT_VOLUME_FRACTION = 0.30
CUTOUT_EDGE_MIN = 0.05
CUTOUT_EDGE_MAX = 0.25
SWAP_SOURCE_TRIES = 10


class Fill(str, enum.Enum):
    NOISE = "NOISE"
    SWAP = "SWAP"


@dataclass
class CutoutRegion:
    origin: tuple
    extent: tuple
    fill: Fill
    swap_source: tuple | None = None
    noise_seed: int | None = None

    @property
    def volume(self):
        return int(np.prod(self.extent))

    def slices(self, origin=None):
        o = self.origin if origin is None else origin
        return tuple(slice(a, a + e) for a, e in zip(o, self.extent))


@dataclass
class AugmentationRecord:
    rotation_class: int = 0
    cutouts: list = field(default_factory=list)
    # one list of (source, target) pairs per channel; empty if not applied
    histogram_points: list = field(default_factory=list)
    applied_order: tuple = APPLIED_ORDER

    def to_json(self):
        d = asdict(self)
        for c in d["cutouts"]:
            c["fill"] = Fill(c["fill"]).value
        return json.dumps(d)

    @classmethod
    def from_json(cls, text):
        d = json.loads(text)
        cutouts = [
            CutoutRegion(
                origin=tuple(c["origin"]),
                extent=tuple(c["extent"]),
                fill=Fill(c["fill"]),
                swap_source=None if c["swap_source"] is None else tuple(c["swap_source"]),
                noise_seed=c["noise_seed"],
            )
            for c in d["cutouts"]
        ]
        points = [[tuple(p) for p in ch] for ch in d["histogram_points"]]
        return cls(d["rotation_class"], cutouts, points, tuple(d["applied_order"]))


@dataclass
class ContrastiveBatch:
    views: list
    records: list
    targets: list  # rotated clean images, the inpainting targets
    subject_of: list
    view_of: list


def cutout_limits(size):
    """(min edge, max edge, volume cap) for a ``size``^3 sub-volume."""
    lo = math.ceil(CUTOUT_EDGE_MIN * size - 1e-9)
    hi = math.floor(CUTOUT_EDGE_MAX * size + 1e-9)
    return lo, hi, math.floor(CUTOUT_VOLUME_FRACTION * size**3)


# ----------------------------------------------------------------------------
# rotation


def rotate_array(a, k):
    """Rotate the last three axes by ``90 * k`` degrees about the third one.

    Voxel (x, y, z) goes to (y, S-1-x, z) for k = 1.
    """
    return np.ascontiguousarray(np.rot90(a, k % 4, axes=(a.ndim - 2, a.ndim - 3)))


def apply_rotation(sv, k):
    return sv.copy(
        data=rotate_array(sv.data, k),
        mask=None if sv.mask is None else rotate_array(sv.mask, k),
        slice_label_mask=None if sv.slice_label_mask is None else rotate_array(sv.slice_label_mask, k),
    )


def random_rotate(sv, rng):
    k = int(rng.integers(0, 4))
    return apply_rotation(sv, k), k


# ----------------------------------------------------------------------------
# cutout / patch swap


def apply_cutouts(data, regions, clean=None):
    """Corrupt ``data`` (copy) with ``regions``; swaps read from ``clean``."""
    clean = data if clean is None else clean
    out = data.copy()
    for reg in regions:
        dst = (slice(None),) + reg.slices()
        if reg.fill == Fill.NOISE:
            noise = np.random.default_rng(reg.noise_seed).uniform(0.0, 1.0, (data.shape[0], *reg.extent))
            out[dst] = noise.astype(data.dtype)
        else:
            out[dst] = clean[(slice(None),) + reg.slices(reg.swap_source)]
    return out


def _draw_swap_source(rng, data, extent, origin):
    size = data.shape[1:]
    src = origin
    for _ in range(SWAP_SOURCE_TRIES):
        src = tuple(int(rng.integers(0, n - e + 1)) for n, e in zip(size, extent))
        if src == tuple(origin):
            continue
        block = data[(0,) + tuple(slice(a, a + e) for a, e in zip(src, extent))]
        # prefer a patch from inside the brain
        if np.count_nonzero(block) >= 0.5 * block.size:
            break
    return src


def draw_cutouts(data, rng):
    """Random regions until the next one would push the total to the cap."""
    size = data.shape[1:]
    lo, hi, cap = cutout_limits(min(size))
    regions = []
    total = 0
    while True:
        extent = tuple(int(rng.integers(lo, hi + 1)) for _ in range(3))
        vol = int(np.prod(extent))
        if total + vol >= cap:
            break
        origin = tuple(int(rng.integers(0, n - e + 1)) for n, e in zip(size, extent))
        if rng.random() < 0.5:
            regions.append(CutoutRegion(origin, extent, Fill.NOISE, noise_seed=int(rng.integers(0, 2**31 - 1))))
        else:
            src = _draw_swap_source(rng, data, extent, origin)
            regions.append(CutoutRegion(origin, extent, Fill.SWAP, swap_source=src))
        total += vol
    return regions


def random_cutout_swap(sv, rng):
    """Returns (corrupted copy, regions, clean copy)."""
    clean = sv.copy()
    regions = draw_cutouts(sv.data, rng)
    out = sv.copy(data=apply_cutouts(sv.data, regions))
    return out, regions, clean


# ----------------------------------------------------------------------------
# histogram shift


def histogram_map(x, points):
    """Piecewise-linear map through ``points`` with 0 -> 0 and 1 -> 1 pinned."""
    src = [0.0] + [p[0] for p in points] + [1.0]
    tgt = [0.0] + [p[1] for p in points] + [1.0]
    return np.interp(x, src, tgt)


def draw_histogram_points(rng, n_channels):
    points = []
    for _ in range(n_channels):
        n = 1 if rng.random() < 0.5 else 3
        src = np.sort(rng.uniform(0.0, 1.0, n))
        tgt = np.sort(rng.uniform(0.0, 1.0, n))
        points.append([(float(a), float(b)) for a, b in zip(src, tgt)])
    return points


def apply_histogram(data, points):
    out = np.empty_like(data)
    for c, pts in enumerate(points):
        out[c] = histogram_map(data[c], pts).astype(data.dtype)
    return out


def random_histogram_shift(sv, rng):
    points = draw_histogram_points(rng, sv.data.shape[0])
    return sv.copy(data=apply_histogram(sv.data, points)), points


# ----------------------------------------------------------------------------
# full chain


def augment_view(sv, rng):
    """rotate -> cutout/swap -> histogram shift.

    Returns (view, record, target) where target is the rotated clean image.
    """
    rotated, k = random_rotate(sv, rng)
    cut, regions, clean = random_cutout_swap(rotated, rng)
    view, points = random_histogram_shift(cut, rng)
    return view, AugmentationRecord(k, regions, points), clean


def replay(record, sv):
    """Re-apply a recorded augmentation chain; returns (view, target)."""
    rotated = apply_rotation(sv, record.rotation_class)
    data = apply_cutouts(rotated.data, record.cutouts)
    if record.histogram_points:
        data = apply_histogram(data, record.histogram_points)
    return rotated.copy(data=data), rotated


def build_contrastive_batch(sources, rng):
    """Two independent augmentation chains per source sub-volume."""
    if len(sources) < 2:
        raise BatchTooSmall(f"contrastive batch needs N >= 2 subjects, got {len(sources)}")
    views, records, targets, subject_of, view_of = [], [], [], [], []
    for i, sv in enumerate(sources):
        for j in (1, 2):
            view, rec, clean = augment_view(sv, rng)
            views.append(view)
            records.append(rec)
            targets.append(clean)
            subject_of.append(i)
            view_of.append(j)
    return ContrastiveBatch(views, records, targets, subject_of, view_of)
