"""Helpers shared by the pre-training and fine-tuning loops."""
import csv
import json
import os

import numpy as np
import torch

from .model import SeededDropout


def stack_images(subvolumes):
    return torch.from_numpy(np.stack([sv.data for sv in subvolumes]).astype(np.float32))


def stack_masks(subvolumes):
    return torch.from_numpy(np.stack([sv.mask for sv in subvolumes]).astype(np.int64))


def stack_slice_masks(subvolumes):
    if all(sv.slice_label_mask is None for sv in subvolumes):
        return None
    blocks = [
        np.ones(sv.data.shape[1:], dtype=bool) if sv.slice_label_mask is None else sv.slice_label_mask
        for sv in subvolumes
    ]
    return torch.from_numpy(np.stack(blocks))


def make_optimizer(params, lr, momentum=0.0):
    return torch.optim.SGD(params, lr=lr, momentum=momentum)


def seed_dropout(model, seed):
    for m in model.modules():
        if isinstance(m, SeededDropout):
            m.reseed(seed)


def write_json(obj, path):
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, default=_jsonable)
    return path


def _jsonable(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if hasattr(o, "value"):
        return o.value
    raise TypeError(f"not JSON serializable: {type(o)}")


def write_rows_csv(rows, path):
    """Write a list of flat dicts as CSV (columns from the first row)."""
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    fields = list(rows[0]) if rows else []
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields)
        w.writeheader()
        for r in rows:
            w.writerow(r)
    return path
