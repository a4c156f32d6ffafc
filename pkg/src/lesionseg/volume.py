"""Volumes, samples, normalization, cropping, sub-volume sampling and folds."""
import enum
from dataclasses import dataclass, replace

import numpy as np

from .errors import ConstantVolume, EmptyBrain, ShapeMismatch, TooFewSubjects

DEFAULT_SPACING = (0.9, 0.9, 0.9)
LOW_PERCENTILE = 0.5
HIGH_PERCENTILE = 99.5
MAX_SLICE_TRIES = 100


class Modality(str, enum.Enum):
    T1W = "T1w"
    FLAIR = "FLAIR"
    MASK = "MASK"
    PROB = "PROB"  # model output, values in [0, 1]


@dataclass
class Volume:
    data: np.ndarray
    spacing: tuple = DEFAULT_SPACING
    modality: Modality = Modality.T1W

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim != 3:
            raise ShapeMismatch(f"volume must be 3D, got shape {self.data.shape}")
        self.spacing = tuple(float(s) for s in self.spacing)
        self.modality = Modality(self.modality)

    @property
    def shape(self):
        return self.data.shape


@dataclass
class Sample:
    subject_id: str
    t1: Volume
    flair: Volume
    lesion_mask: Volume | None = None
    labeled_slices: np.ndarray | None = None
    labeled: bool = False
    # position of this sample's grid inside the grid it was cropped from
    offset: tuple = (0, 0, 0)
    source_shape: tuple | None = None

    def __post_init__(self):
        shape = self.t1.shape
        if self.flair.shape != shape:
            raise ShapeMismatch(f"{self.subject_id}: FLAIR {self.flair.shape} != T1w {shape}")
        if self.t1.spacing != self.flair.spacing:
            raise ShapeMismatch(f"{self.subject_id}: T1w/FLAIR spacing differs")
        if self.lesion_mask is not None and self.lesion_mask.shape != shape:
            raise ShapeMismatch(f"{self.subject_id}: mask {self.lesion_mask.shape} != {shape}")
        if self.labeled and self.lesion_mask is None:
            raise ValueError(f"{self.subject_id}: labeled sample without lesion mask")
        if self.labeled_slices is not None:
            self.labeled_slices = np.asarray(self.labeled_slices, dtype=bool)
            if self.labeled_slices.shape != (shape[2],):
                raise ShapeMismatch(
                    f"{self.subject_id}: labeled_slices length {self.labeled_slices.shape} != {shape[2]}"
                )
        if self.source_shape is None:
            self.source_shape = tuple(shape)

    @property
    def shape(self):
        return self.t1.shape

    def image(self):
        """The 2-channel (T1w, FLAIR) array, float32."""
        return np.stack([self.t1.data, self.flair.data]).astype(np.float32)


@dataclass
class SubVolume:
    data: np.ndarray  # (2, S, S, S)
    origin: tuple = (0, 0, 0)
    mask: np.ndarray | None = None
    slice_label_mask: np.ndarray | None = None
    subject_id: str = ""

    @property
    def size(self):
        return self.data.shape[-1]

    def copy(self, **changes):
        out = replace(
            self,
            data=self.data.copy(),
            mask=None if self.mask is None else self.mask.copy(),
            slice_label_mask=None if self.slice_label_mask is None else self.slice_label_mask.copy(),
        )
        return replace(out, **changes) if changes else out


@dataclass
class FoldSpec:
    fold_index: int
    train_ids: list
    test_ids: list


@dataclass
class PhantomSpec:
    extent: tuple = (64, 64, 64)
    n_lesions: tuple = (3, 8)
    lesion_radius: tuple = (2.0, 4.0)
    background_texture: float = 3.0
    seed: int = 0
    spacing: tuple = DEFAULT_SPACING
    brain_fill: float = 0.8
    labeled: bool = True
    n_distractors: tuple = (1, 3)
    lesion_contrast: float = 0.3
    noise_sigma: float = 0.04


# ----------------------------------------------------------------------------
# intensity normalization


def percentile_bounds(values, low=LOW_PERCENTILE, high=HIGH_PERCENTILE):
    """Nearest-rank percentile bounds (lower rank for ``low``, upper for ``high``).

    Using ranks rather than interpolation keeps normalization idempotent: the
    clipped mass sits exactly on the bounds the second pass will pick.
    """
    flat = np.asarray(values, dtype=np.float64).ravel()
    lo = np.percentile(flat, low, method="lower")
    hi = np.percentile(flat, high, method="higher")
    return float(lo), float(hi)


def normalize_intensity(v, low=LOW_PERCENTILE, high=HIGH_PERCENTILE):
    """Monotone map of ``v`` onto [0, 1]: percentile clip then min-max rescale."""
    data = np.asarray(v.data, dtype=np.float64)
    if not np.all(np.isfinite(data)):
        raise ValueError("volume contains non-finite values")
    vmin, vmax = data.min(), data.max()
    if vmax <= vmin:
        raise ConstantVolume("normalization undefined for a constant volume")
    lo, hi = percentile_bounds(data, low, high)
    if hi <= lo:
        lo, hi = vmin, vmax
    out = np.clip((data - lo) / (hi - lo), 0.0, 1.0)
    return Volume(out.astype(np.float32), v.spacing, v.modality)


def normalize_sample(s):
    return replace(s, t1=normalize_intensity(s.t1), flair=normalize_intensity(s.flair))


# ----------------------------------------------------------------------------
# brain bounding box


def bounding_box(support):
    """(start, stop) per axis of the nonzero region of ``support``."""
    idx = [np.flatnonzero(np.any(support, axis=tuple(a for a in range(support.ndim) if a != ax)))
           for ax in range(support.ndim)]
    if any(len(i) == 0 for i in idx):
        raise EmptyBrain("no nonzero voxels in brain support")
    return tuple(int(i[0]) for i in idx), tuple(int(i[-1]) + 1 for i in idx)


def _crop_vol(v, sl):
    return None if v is None else Volume(v.data[sl].copy(), v.spacing, v.modality)


def crop_to_brain_bbox(s):
    """Crop every modality and the mask to the tight box around nonzero T1w."""
    start, stop = bounding_box(s.t1.data != 0)
    sl = tuple(slice(a, b) for a, b in zip(start, stop))
    offset = tuple(o + a for o, a in zip(s.offset, start))
    return replace(
        s,
        t1=_crop_vol(s.t1, sl),
        flair=_crop_vol(s.flair, sl),
        lesion_mask=_crop_vol(s.lesion_mask, sl),
        labeled_slices=None if s.labeled_slices is None else s.labeled_slices[sl[2]].copy(),
        offset=offset,
        source_shape=s.source_shape,
    )


def place_back(data, offset, shape, fill=0):
    """Inverse of cropping: embed ``data`` at ``offset`` in a ``shape`` grid."""
    out = np.full(shape, fill, dtype=data.dtype)
    sl = tuple(slice(o, o + n) for o, n in zip(offset, data.shape))
    out[sl] = data
    return out


# ----------------------------------------------------------------------------
# sub-volume sampling


def pad_to_min(s, size):
    """Zero-pad axes shorter than ``size`` symmetrically (extra voxel at the end)."""
    shape = s.shape
    if all(n >= size for n in shape):
        return s
    pads = []
    for n in shape:
        total = max(0, size - n)
        pads.append((total // 2, total - total // 2))

    def pad(v):
        if v is None:
            return None
        return Volume(np.pad(v.data, pads), v.spacing, v.modality)

    slices = None
    if s.labeled_slices is not None:
        slices = np.pad(s.labeled_slices, pads[2], constant_values=False)
    offset = tuple(o - p[0] for o, p in zip(s.offset, pads))
    return replace(s, t1=pad(s.t1), flair=pad(s.flair), lesion_mask=pad(s.lesion_mask),
                   labeled_slices=slices, offset=offset)


def extract_subvolume(s, origin, size, image=None):
    """Cut the ``size``^3 block at ``origin`` out of an (already padded) sample."""
    image = s.image() if image is None else image
    sl = tuple(slice(o, o + size) for o in origin)
    mask = None
    if s.lesion_mask is not None:
        mask = s.lesion_mask.data[sl].astype(np.uint8)
    slice_mask = None
    if s.labeled_slices is not None:
        z = s.labeled_slices[sl[2]]
        slice_mask = np.broadcast_to(z[None, None, :], (size, size, size)).copy()
    return SubVolume(
        data=np.ascontiguousarray(image[(slice(None),) + sl]),
        origin=tuple(int(o) for o in origin),
        mask=mask,
        slice_label_mask=slice_mask,
        subject_id=s.subject_id,
    )


def sample_subvolumes(s, n=2, size=96, rng=None, require_labeled_slice=True):
    """Draw ``n`` random ``size``^3 sub-volumes from ``s``.

    Origins are uniform over all valid positions. Samples smaller than
    ``size`` are zero-padded first, and origins then refer to the padded grid.
    When ``s`` carries ``labeled_slices`` and ``require_labeled_slice`` is set,
    origins are re-drawn (up to 100 times) until the block covers at least one
    labeled slice.
    """
    rng = np.random.default_rng(rng)
    s = pad_to_min(s, size)
    image = s.image()
    hi = [n_ - size for n_ in s.shape]
    z_ok = None
    if require_labeled_slice and s.labeled_slices is not None and s.labeled_slices.any():
        z_ok = s.labeled_slices
    out = []
    for _ in range(n):
        for _try in range(MAX_SLICE_TRIES):
            origin = tuple(int(rng.integers(0, h + 1)) for h in hi)
            if z_ok is None or z_ok[origin[2]:origin[2] + size].any():
                break
        out.append(extract_subvolume(s, origin, size, image))
    return out


def center_subvolume(s, size):
    s = pad_to_min(s, size)
    origin = tuple((n - size) // 2 for n in s.shape)
    return extract_subvolume(s, origin, size)


# ----------------------------------------------------------------------------
# folds


def make_folds(subject_ids, k=7, rng=None):
    """Shuffle ids, then cut into ``k`` contiguous, near-equal test blocks."""
    ids = list(subject_ids)
    if k < 2 or len(ids) < k:
        raise TooFewSubjects(f"need at least k={k} subjects (k >= 2), got {len(ids)}")
    rng = np.random.default_rng(rng)
    order = [ids[i] for i in rng.permutation(len(ids))]
    blocks = np.array_split(np.arange(len(ids)), k)
    folds = []
    for i, block in enumerate(blocks):
        test = [order[j] for j in block]
        train = [x for x in order if x not in test]
        folds.append(FoldSpec(i, train, test))
    return folds


# ----------------------------------------------------------------------------
# synthetic phantoms


def _smooth_noise(rng, shape, sigma):
    from scipy.ndimage import gaussian_filter

    field_ = gaussian_filter(rng.standard_normal(shape), sigma=sigma, mode="wrap")
    field_ -= field_.mean()
    sd = field_.std()
    return field_ / sd if sd > 0 else field_


def _ellipsoid(shape, center, radii):
    grids = np.ogrid[tuple(slice(0, n) for n in shape)]
    acc = sum(((g - c) / r) ** 2 for g, c, r in zip(grids, center, radii))
    return acc <= 1.0


def _place_blobs(rng, shape, center, semi, count, rmin, rmax, taken):
    """Non-touching ellipsoids fully inside the brain; appends to ``taken``."""
    mask = np.zeros(shape, dtype=bool)
    placed = 0
    attempts = 0
    while placed < count and attempts < 10000:
        attempts += 1
        radii = tuple(rng.uniform(rmin, rmax) for _ in range(3))
        c = tuple(rng.uniform(0, n - 1) for n in shape)
        # inside the brain even at the blob's farthest point
        shrunk = tuple(max(sa - max(radii) - 1, 0.0) for sa in semi)
        if min(shrunk) <= 0 or sum(((ci - cc) / s) ** 2 for ci, cc, s in zip(c, center, shrunk)) > 1:
            continue
        # one-voxel gap to every earlier blob keeps components separate
        if any(np.linalg.norm(np.subtract(c, pc)) <= max(radii) + max(pr) + 2 for pc, pr in taken):
            continue
        blob = _ellipsoid(shape, c, radii)
        if not blob.any():
            continue
        taken.append((c, radii))
        mask |= blob
        placed += 1
    return mask, placed


def generate_phantom(spec, subject_id=None):
    """Synthetic skull-stripped T1w/FLAIR pair with ellipsoidal FLAIR lesions.

    Lesions are hyperintense on FLAIR and isointense on T1w. Distractor blobs
    (not in the mask) are bright on both, so FLAIR alone cannot separate
    them. Every lesion is its own connected component inside the brain.
    """
    rng = np.random.default_rng(spec.seed)
    shape = tuple(int(n) for n in spec.extent)
    center = tuple((n - 1) / 2 for n in shape)
    semi = tuple(spec.brain_fill * n / 2 for n in shape)
    brain = _ellipsoid(shape, center, semi)

    sigma = max(float(spec.background_texture), 0.5)
    tissue = _smooth_noise(rng, shape, sigma)
    fine = _smooth_noise(rng, shape, sigma / 3)
    bias = 1.0 + 0.1 * _smooth_noise(rng, shape, 4 * sigma)
    # smooth field split into white/grey matter, deep troughs act as CSF
    white = tissue > 0
    csf = tissue < -1.5
    t1 = np.select([csf, white], [0.2, 0.75], 0.55) + 0.04 * fine
    flair = np.select([csf, white], [0.15, 0.4], 0.5) + 0.04 * fine

    lo, hi = (int(x) for x in spec.n_lesions)
    count = int(rng.integers(lo, hi + 1)) if hi >= lo else 0
    rmin, rmax = (float(x) for x in spec.lesion_radius)
    taken = []
    mask, placed = _place_blobs(rng, shape, center, semi, count, rmin, rmax, taken)
    if placed < count:
        raise ValueError(f"could only place {placed} of {count} lesions; enlarge extent")
    dlo, dhi = (int(x) for x in spec.n_distractors)
    n_dis = int(rng.integers(dlo, dhi + 1)) if dhi >= dlo else 0
    distractor, _ = _place_blobs(rng, shape, center, semi, n_dis, rmin, rmax, taken)

    flair = flair + spec.lesion_contrast * mask + spec.lesion_contrast * distractor
    t1 = np.where(distractor, 0.95, t1)
    t1 = t1 * bias + spec.noise_sigma * rng.standard_normal(shape)
    flair = flair * bias + spec.noise_sigma * rng.standard_normal(shape)
    # in-brain voxels stay strictly positive so the brain box is the support
    t1 = np.where(brain, np.clip(t1, 1e-3, 1.0), 0.0)
    flair = np.where(brain, np.clip(flair, 1e-3, 1.0), 0.0)

    sid = subject_id or f"phantom_{spec.seed:04d}"
    return Sample(
        subject_id=sid,
        t1=Volume(t1.astype(np.float32), spec.spacing, Modality.T1W),
        flair=Volume(flair.astype(np.float32), spec.spacing, Modality.FLAIR),
        lesion_mask=Volume(mask.astype(np.uint8), spec.spacing, Modality.MASK),
        labeled=bool(spec.labeled),
    )


def preprocess(s):
    """Normalize both modalities, then crop to the brain box."""
    return crop_to_brain_bbox(normalize_sample(s))


def with_labeled_slices(s, level, rng):
    """Mark ``floor(level * S)`` random slices (third axis) as annotated."""
    n_slices = s.shape[2]
    k = int(np.floor(level * n_slices + 1e-9))
    chosen = np.random.default_rng(rng).choice(n_slices, size=k, replace=False)
    flags = np.zeros(n_slices, dtype=bool)
    flags[chosen] = True
    return replace(s, labeled_slices=flags)
