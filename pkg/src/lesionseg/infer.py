"""Sliding-window whole-volume inference, Dice, and overlay rendering."""
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .errors import ShapeMismatch
from .volume import Modality, Volume


@dataclass
class InferenceConfig:
    window: int = 96
    overlap: int = 24
    blend: str = "MEAN"
    threshold: float = 0.5
    batch_size: int = 1

    def validate(self):
        if not 0 <= self.overlap < self.window:
            raise ValueError("overlap must be in [0, window)")
        if self.blend != "MEAN":
            raise ValueError(f"unsupported blend mode {self.blend}")
        return self


def window_starts(n, window, overlap):
    """Window origins along one axis: stride ``window - overlap``, last one clamped."""
    if n <= window:
        return [0]
    stride = window - overlap
    starts = list(range(0, n - window + 1, stride))
    if starts[-1] != n - window:
        starts.append(n - window)
    return starts


def sliding_window(image, fn, window=96, overlap=24, batch_size=1):
    """Apply ``fn`` tile by tile over ``image`` (C, X, Y, Z) and average overlaps.

    ``fn`` maps a (B, C, w, w, w) float tensor to (B, K, w, w, w). Returns the
    blended (K, X, Y, Z) array and the per-voxel window count.
    """
    image = np.asarray(image, dtype=np.float32)
    spatial = image.shape[1:]
    pads = [(0, max(0, window - n)) for n in spatial]
    if any(p[1] for p in pads):
        image = np.pad(image, [(0, 0)] + pads)
    shape = image.shape[1:]
    origins = [
        (a, b, c)
        for a in window_starts(shape[0], window, overlap)
        for b in window_starts(shape[1], window, overlap)
        for c in window_starts(shape[2], window, overlap)
    ]
    acc = None
    count = np.zeros(shape, dtype=np.float64)
    for i in range(0, len(origins), batch_size):
        chunk = origins[i:i + batch_size]
        tiles = np.stack([image[:, a:a + window, b:b + window, c:c + window] for a, b, c in chunk])
        with torch.no_grad():
            out = fn(torch.from_numpy(tiles))
        out = out.detach().cpu().numpy().astype(np.float64)
        if acc is None:
            acc = np.zeros((out.shape[1], *shape), dtype=np.float64)
        for (a, b, c), o in zip(chunk, out):
            acc[:, a:a + window, b:b + window, c:c + window] += o
            count[a:a + window, b:b + window, c:c + window] += 1
    out = acc / count
    crop = tuple(slice(0, n) for n in spatial)
    return out[(slice(None),) + crop], count[crop]


def model_probabilities(model):
    """Wrap a SegModel as a tile function returning softmax probabilities."""

    def fn(x):
        return F.softmax(model(x), dim=1)

    return fn


def sliding_window_predict(model, sample, cfg=None):
    """Foreground-probability Volume for a preprocessed sample."""
    cfg = (cfg or InferenceConfig()).validate()
    was_training = getattr(model, "training", False)
    if hasattr(model, "eval"):
        model.eval()
    fn = model_probabilities(model) if isinstance(model, torch.nn.Module) else model
    probs, _ = sliding_window(sample.image(), fn, cfg.window, cfg.overlap, cfg.batch_size)
    if was_training:
        model.train()
    return Volume(probs[1].astype(np.float32), sample.t1.spacing, Modality.PROB)


def dice_score(pred_mask, gt_mask):
    """2|A & B| / (|A| + |B|); 1.0 when both masks are empty."""
    a = np.asarray(pred_mask).astype(bool)
    b = np.asarray(gt_mask).astype(bool)
    if a.shape != b.shape:
        raise ShapeMismatch(f"{a.shape} != {b.shape}")
    denom = int(a.sum()) + int(b.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int(np.logical_and(a, b).sum()) / denom


def predict_mask(model, sample, cfg=None):
    cfg = cfg or InferenceConfig()
    return sliding_window_predict(model, sample, cfg).data >= cfg.threshold


def evaluate_model(model, samples, cfg=None):
    """Mean Dice of thresholded sliding-window predictions over ``samples``."""
    if cfg is None:
        size = getattr(getattr(model, "cfg", None), "img_size", 96)
        cfg = InferenceConfig(window=size, overlap=size // 4)
    scores = [dice_score(predict_mask(model, s, cfg), s.lesion_mask.data) for s in samples]
    return float(np.mean(scores))


def overlay_rgb(flair_slice, pred_slice, gt_slice):
    """RGB overlay: green true positives, red false negatives, yellow false positives."""
    base = np.clip(np.asarray(flair_slice, dtype=np.float64), 0.0, 1.0)
    rgb = np.stack([base, base, base], axis=-1)
    pred = np.asarray(pred_slice, bool)
    gt = np.asarray(gt_slice, bool)
    rgb[pred & gt] = (0.0, 1.0, 0.0)
    rgb[~pred & gt] = (1.0, 0.0, 0.0)
    rgb[pred & ~gt] = (1.0, 1.0, 0.0)
    return rgb


def save_overlay(sample, pred_mask, path, z=None):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    gt = sample.lesion_mask.data if sample.lesion_mask is not None else np.zeros(sample.shape, bool)
    if z is None:
        per_slice = gt.sum(axis=(0, 1)) + np.asarray(pred_mask).sum(axis=(0, 1))
        z = int(np.argmax(per_slice))
    rgb = overlay_rgb(sample.flair.data[:, :, z], np.asarray(pred_mask)[:, :, z], gt[:, :, z])
    plt.imsave(path, np.transpose(rgb, (1, 0, 2)))
    return path
