"""Supervised, proxy-task and semi-supervised losses.

Probability maps are (B, C, X, Y, Z) tensors whose channel axis sums to 1.
All reductions are means over voxels so values do not depend on resolution.
"""
from dataclasses import dataclass, field
import math

import torch
import torch.nn.functional as F

from .errors import BatchTooSmall, EmptyMask, ShapeMismatch, ZeroVector

DICE_EPS = 1e-5
LOG_EPS = 1e-12


@dataclass
class PretrainLossWeights:
    lambda_rot: float = 1.0
    lambda_inpaint: float = 1.0
    lambda_contrast: float = 1.0
    temperature_t: float = 0.5

    def validate(self):
        for name in ("lambda_rot", "lambda_inpaint", "lambda_contrast"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.temperature_t <= 0:
            raise ValueError("temperature_t must be > 0")
        return self


def default_strategy_params():
    return {
        "ema_decay": 0.99,
        "mt_noise_sigma": 0.1,
        "fixmatch_tau": 0.95,
        "fixmatch_weak_sigma": 0.05,
        "adversarial_weight": 0.1,
        "uamt_passes": 8,
        "uamt_h_start": 0.75 * math.log(2.0),
        "uamt_h_end": math.log(2.0),
        "cps_average_nets": False,
        # fraction of max_steps over which lambda_semi ramps in (0 = constant)
        "semi_rampup_fraction": 0.0,
    }


@dataclass
class SemiLossWeights:
    lambda_semi: float = 1.0
    strategy_params: dict = field(default_factory=default_strategy_params)

    def validate(self):
        if self.lambda_semi < 0:
            raise ValueError("lambda_semi must be >= 0")
        return self


def _same_shape(a, b):
    if a.shape != b.shape:
        raise ShapeMismatch(f"{tuple(a.shape)} != {tuple(b.shape)}")


def _log(p):
    return torch.log(p.clamp_min(LOG_EPS))


def voxel_ce(P, labels):
    """Per-voxel cross-entropy -log P[label]; labels are (B, X, Y, Z) ints."""
    return -_log(P.gather(1, labels.long().unsqueeze(1))).squeeze(1)


def dice_ce_loss(P, Y, slice_mask=None, eps=DICE_EPS):
    """Soft foreground Dice loss plus mean voxel cross-entropy.

    ``slice_mask`` (broadcastable to (B, X, Y, Z)) restricts both terms to
    the selected voxels.
    """
    Y = Y.long()
    if Y.dim() == P.dim():
        Y = Y.squeeze(1)
    if P.shape[0] != Y.shape[0] or P.shape[2:] != Y.shape[1:]:
        raise ShapeMismatch(f"P {tuple(P.shape)} vs Y {tuple(Y.shape)}")
    if slice_mask is None:
        w = torch.ones_like(Y, dtype=P.dtype)
    else:
        w = torch.broadcast_to(torch.as_tensor(slice_mask, device=P.device), Y.shape).to(P.dtype)
    n = w.sum()
    if n == 0:
        raise EmptyMask("slice mask selects no voxels")
    fg = P[:, 1] * w
    y = Y.to(P.dtype) * w
    dice = 1.0 - (2.0 * (fg * y).sum() + eps) / (fg.sum() + y.sum() + eps)
    ce = (voxel_ce(P, Y) * w).sum() / n
    return dice + ce


def rotation_loss(logits, r):
    """Cross-entropy of softmax(logits) against the rotation class ``r``."""
    r = torch.as_tensor(r, device=logits.device).long().reshape(-1)
    return F.cross_entropy(logits.reshape(-1, logits.shape[-1]), r)


def inpaint_loss(I_pred, I_org):
    _same_shape(I_pred, I_org)
    return (I_pred - I_org).abs().mean()


def contrastive_loss(V, subject_of, view_of, t=0.5):
    """Mean over all 2N anchors of -log(exp(pos/t) / sum_negatives exp(sim/t)).

    The denominator runs over both views of every *other* subject only.
    """
    subject_of = torch.as_tensor(subject_of, device=V.device)
    ids, counts = torch.unique(subject_of, return_counts=True)
    n_subjects = int(ids.numel())
    if bool((counts != 2).any()):
        raise ShapeMismatch("each subject needs exactly two views")
    if n_subjects < 2:
        raise BatchTooSmall("contrastive loss needs at least two subjects")
    norms = V.norm(dim=1)
    if bool((norms == 0).any()):
        raise ZeroVector("zero-norm projection vector")
    U = V / norms[:, None]
    logits = (U @ U.T) / t
    same = subject_of[:, None] == subject_of[None, :]
    eye = torch.eye(len(V), dtype=torch.bool, device=V.device)
    pos = (logits * (same & ~eye)).sum(dim=1)
    neg = torch.logsumexp(logits.masked_fill(same, float("-inf")), dim=1)
    return (neg - pos).mean()


def pretrain_loss(rot, inpaint, contrast, w):
    return w.lambda_rot * rot + w.lambda_inpaint * inpaint + w.lambda_contrast * contrast


def mt_consistency_loss(P1, P2):
    """Voxel mean of sum_c (P2 - P1)^2."""
    _same_shape(P1, P2)
    return ((P2 - P1) ** 2).sum(dim=1).mean()


def cps_loss(P1, P2):
    """(CE(argmax P2, P1), CE(argmax P1, P2)); pseudo-labels carry no gradient."""
    _same_shape(P1, P2)
    L1 = P1.detach().argmax(dim=1)
    L2 = P2.detach().argmax(dim=1)
    return voxel_ce(P1, L2).mean(), voxel_ce(P2, L1).mean()


def entropy_min_loss(P):
    return -torch.xlogy(P, P).sum(dim=1).mean()


def fixmatch_loss(P_weak, P_strong, tau=0.95):
    """Masked CE of strong-view predictions against confident weak argmax."""
    _same_shape(P_weak, P_strong)
    conf, pseudo = P_weak.detach().max(dim=1)
    mask = (conf >= tau).to(P_strong.dtype)
    n = mask.sum()
    if n == 0:
        return P_strong.sum() * 0.0
    return (voxel_ce(P_strong, pseudo) * mask).sum() / n


def adversarial_loss(d_labeled, d_unlabeled):
    """Non-saturating GAN terms on discriminator probabilities.

    ``d_*`` are the discriminator's "came from labeled data" scores.
    Returns (generator term, discriminator term).
    """
    gen = -_log(d_unlabeled).mean()
    disc = 0.5 * (-_log(d_labeled).mean() - _log(1.0 - d_unlabeled).mean())
    return gen, disc


def predictive_entropy(P_mean):
    """Voxelwise entropy of a mean probability map, shape (B, X, Y, Z)."""
    return -torch.xlogy(P_mean, P_mean).sum(dim=1)


def uamt_consistency_loss(P_student, P_teacher, uncertainty, H_thresh):
    """Consistency restricted to voxels whose teacher uncertainty < H_thresh."""
    _same_shape(P_student, P_teacher)
    mask = (uncertainty < H_thresh).to(P_student.dtype)
    n = mask.sum()
    if n == 0:
        return P_student.sum() * 0.0
    return (((P_student - P_teacher) ** 2).sum(dim=1) * mask).sum() / n
