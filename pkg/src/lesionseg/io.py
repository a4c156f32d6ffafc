"""NIfTI volumes and JSON dataset manifests."""
import json
import os

import nibabel as nib
import numpy as np

from .errors import ConfigError, MissingFile
from .volume import Modality, Sample, Volume


def save_volume(v, path):
    affine = np.diag([*v.spacing, 1.0])
    data = v.data
    if v.modality == Modality.MASK:
        data = data.astype(np.uint8)
    img = nib.Nifti1Image(np.asarray(data), affine)
    img.header.set_zooms(v.spacing)
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    nib.save(img, path)
    return path


def load_volume(path, modality=Modality.T1W):
    if not os.path.exists(path):
        raise MissingFile(path)
    img = nib.load(path)
    data = np.asarray(img.dataobj)
    if data.ndim == 4 and data.shape[-1] == 1:
        data = data[..., 0]
    spacing = tuple(float(z) for z in img.header.get_zooms()[:3])
    if Modality(modality) == Modality.MASK:
        data = (data > 0).astype(np.uint8)
    else:
        data = data.astype(np.float32)
    return Volume(data, spacing, modality)


def save_sample(s, out_dir):
    """Write a sample's volumes as NIfTI and return its manifest entry."""
    base = os.path.join(out_dir, s.subject_id)
    entry = {
        "subject_id": s.subject_id,
        "t1_path": save_volume(s.t1, base + "_t1.nii.gz"),
        "flair_path": save_volume(s.flair, base + "_flair.nii.gz"),
        "labeled": bool(s.labeled),
    }
    if s.lesion_mask is not None:
        entry["mask_path"] = save_volume(s.lesion_mask, base + "_mask.nii.gz")
    return entry


def _rel(path, root):
    return os.path.relpath(path, root)


def write_manifest(entries, path):
    root = os.path.dirname(os.path.abspath(path))
    out = []
    for e in entries:
        e = dict(e)
        for key in ("t1_path", "flair_path", "mask_path"):
            if key in e:
                e[key] = _rel(os.path.abspath(e[key]), root)
        out.append(e)
    os.makedirs(root, exist_ok=True)
    with open(path, "w") as fh:
        json.dump({"subjects": out}, fh, indent=2)
    return path


def read_manifest(path):
    """Manifest entries with paths resolved relative to the manifest file."""
    if not os.path.exists(path):
        raise MissingFile(path)
    with open(path) as fh:
        doc = json.load(fh)
    entries = doc["subjects"] if isinstance(doc, dict) else doc
    root = os.path.dirname(os.path.abspath(path))
    out = []
    for i, e in enumerate(entries):
        for key in ("subject_id", "t1_path", "flair_path"):
            if key not in e:
                raise ConfigError(f"manifest.subjects[{i}].{key}", "missing")
        e = dict(e)
        e.setdefault("labeled", "mask_path" in e)
        if e["labeled"] and "mask_path" not in e:
            raise ConfigError(f"manifest.subjects[{i}].mask_path", "labeled subject needs a mask")
        for key in ("t1_path", "flair_path", "mask_path"):
            if key in e and not os.path.isabs(e[key]):
                e[key] = os.path.join(root, e[key])
        out.append(e)
    return out


def load_sample(entry):
    mask = None
    if entry.get("mask_path"):
        mask = load_volume(entry["mask_path"], Modality.MASK)
    return Sample(
        subject_id=entry["subject_id"],
        t1=load_volume(entry["t1_path"], Modality.T1W),
        flair=load_volume(entry["flair_path"], Modality.FLAIR),
        lesion_mask=mask,
        labeled=bool(entry.get("labeled", mask is not None)) and mask is not None,
    )


def load_dataset(manifest_path):
    return [load_sample(e) for e in read_manifest(manifest_path)]
