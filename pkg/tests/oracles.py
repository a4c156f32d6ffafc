"""Independent scalar-loop reference implementations shared by the loss tests."""
import itertools
import math

import torch

from lesionseg.losses import contrastive_loss, dice_ce_loss, inpaint_loss, mt_consistency_loss, rotation_loss

LN2 = math.log(2.0)


def voxels(shape):
    return itertools.product(*[range(n) for n in shape])


def oracle_dice_ce(P, Y, w=None, eps=1e-5):
    B, C = P.shape[:2]
    spatial = P.shape[2:]
    inter = psum = ysum = ce = n = 0.0
    for b in range(B):
        for v in voxels(spatial):
            wt = 1.0 if w is None else float(w[(b,) + v])
            if wt == 0:
                continue
            p1 = float(P[(b, 1) + v])
            y = int(Y[(b,) + v])
            inter += p1 * y
            psum += p1
            ysum += y
            ce += -math.log(max(float(P[(b, y) + v]), 1e-12))
            n += 1
    return 1 - (2 * inter + eps) / (psum + ysum + eps) + ce / n


def oracle_softmax_ce(logits, r):
    m = max(logits)
    z = sum(math.exp(x - m) for x in logits)
    return -(logits[r] - m - math.log(z))


def oracle_contrastive(V, subject_of, t):
    V = [list(map(float, v)) for v in V]

    def cos(a, b):
        return sum(x * y for x, y in zip(a, b)) / math.sqrt(sum(x * x for x in a) * sum(y * y for y in b))

    terms = []
    for i, vi in enumerate(V):
        pos = [j for j in range(len(V)) if j != i and subject_of[j] == subject_of[i]][0]
        num = math.exp(cos(vi, V[pos]) / t)
        den = sum(math.exp(cos(vi, V[k]) / t) for k in range(len(V)) if subject_of[k] != subject_of[i])
        terms.append(-math.log(num / den))
    return sum(terms) / len(terms)


def oracle_mse(P1, P2, mask=None):
    B, C = P1.shape[:2]
    tot = n = 0.0
    for b in range(B):
        for v in voxels(P1.shape[2:]):
            if mask is not None and not mask[(b,) + v]:
                continue
            tot += sum((float(P2[(b, c) + v]) - float(P1[(b, c) + v])) ** 2 for c in range(C))
            n += 1
    return tot / n if n else 0.0


def oracle_ce_to_argmax(P_target_src, P):
    B, C = P.shape[:2]
    tot = n = 0.0
    for b in range(B):
        for v in voxels(P.shape[2:]):
            lab = max(range(C), key=lambda c: float(P_target_src[(b, c) + v]))
            tot += -math.log(float(P[(b, lab) + v]))
            n += 1
    return tot / n


def oracle_entropy(P):
    B, C = P.shape[:2]
    tot = n = 0.0
    for b in range(B):
        for v in voxels(P.shape[2:]):
            tot += -sum(p * math.log(p) for p in (float(P[(b, c) + v]) for c in range(C)) if p > 0)
            n += 1
    return tot / n


def oracle_fixmatch(Pw, Ps, tau):
    B, C = Pw.shape[:2]
    tot = n = 0.0
    for b in range(B):
        for v in voxels(Pw.shape[2:]):
            probs = [float(Pw[(b, c) + v]) for c in range(C)]
            if max(probs) < tau:
                continue
            lab = probs.index(max(probs))
            tot += -math.log(float(Ps[(b, lab) + v]))
            n += 1
    return tot / n if n else 0.0


def oracle_adversarial(dl, du):
    dl = [float(x) for x in dl.reshape(-1)]
    du = [float(x) for x in du.reshape(-1)]
    gen = sum(-math.log(x) for x in du) / len(du)
    disc = 0.5 * (sum(-math.log(x) for x in dl) / len(dl) + sum(-math.log(1 - x) for x in du) / len(du))
    return gen, disc


def rand_probs(rng, B=2, C=2, n=4):
    logits = torch.from_numpy(rng.normal(size=(B, C, n, n, n)) * 2)
    return torch.softmax(logits, dim=1)


def rand_labels(rng, B=2, n=4):
    return torch.from_numpy(rng.integers(0, 2, size=(B, n, n, n)))


def pairs(N):
    return [i for i in range(N) for _ in range(2)], [v for _ in range(N) for v in (1, 2)]


# ----------------------------------------------------------------------------
# central differences


def central_grad(f, x, h=1e-6):
    g = torch.zeros_like(x)
    flat = x.view(-1)
    for i in range(flat.numel()):
        old = float(flat[i])
        flat[i] = old + h
        fp = float(f(x))
        flat[i] = old - h
        fm = float(f(x))
        flat[i] = old
        g.view(-1)[i] = (fp - fm) / (2 * h)
    return g


def rel_err(a, b):
    return float((a - b).norm() / max(float(b.norm()), 1e-12))


def check_grad(f, x):
    x = x.clone().requires_grad_()
    (analytic,) = torch.autograd.grad(f(x), x)
    numeric = central_grad(lambda y: f(y), x.detach().clone())
    return rel_err(analytic, numeric)


GRAD_CASES = {
    "dice_ce": lambda rng: (
        (lambda Y: lambda z: dice_ce_loss(torch.softmax(z, 1), Y))(rand_labels(rng, B=1)),
        torch.from_numpy(rng.normal(size=(1, 2, 4, 4, 4))),
    ),
    "contrastive": lambda rng: (
        lambda V: contrastive_loss(V, *pairs(2), t=0.5),
        torch.from_numpy(rng.normal(size=(4, 8))),
    ),
    "mt_consistency": lambda rng: (
        (lambda P2: lambda z: mt_consistency_loss(torch.softmax(z, 1), P2))(rand_probs(rng, B=1)),
        torch.from_numpy(rng.normal(size=(1, 2, 4, 4, 4))),
    ),
    "rotation": lambda rng: (
        lambda z: rotation_loss(z, [1, 3]),
        torch.from_numpy(rng.normal(size=(2, 4))),
    ),
    "inpaint": lambda rng: (
        (lambda ref: lambda x: inpaint_loss(x, ref))(torch.from_numpy(rng.normal(size=(1, 2, 4, 4, 4)))),
        torch.from_numpy(rng.normal(size=(1, 2, 4, 4, 4))),
    ),
}
