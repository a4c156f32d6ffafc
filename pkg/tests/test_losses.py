import math

import numpy as np
import pytest
import torch

from lesionseg.errors import BatchTooSmall, EmptyMask, ShapeMismatch, ZeroVector
from lesionseg.losses import (
    PretrainLossWeights,
    adversarial_loss,
    cps_loss,
    contrastive_loss,
    dice_ce_loss,
    entropy_min_loss,
    fixmatch_loss,
    inpaint_loss,
    mt_consistency_loss,
    predictive_entropy,
    pretrain_loss,
    rotation_loss,
    uamt_consistency_loss,
)

from oracles import (
    GRAD_CASES,
    LN2,
    check_grad,
    oracle_adversarial,
    oracle_ce_to_argmax,
    oracle_contrastive,
    oracle_dice_ce,
    oracle_entropy,
    oracle_fixmatch,
    oracle_mse,
    oracle_softmax_ce,
    pairs,
    rand_labels,
    rand_probs,
)


@pytest.fixture(autouse=True)
def _float64():
    old = torch.get_default_dtype()
    torch.set_default_dtype(torch.float64)
    yield
    torch.set_default_dtype(old)


# ----------------------------------------------------------------------------
# dice + CE


def test_dice_ce_matches_oracle():
    rng = np.random.default_rng(0)
    for _ in range(100):
        P, Y = rand_probs(rng), rand_labels(rng)
        assert float(dice_ce_loss(P, Y)) == pytest.approx(oracle_dice_ce(P.numpy(), Y.numpy()), abs=1e-6)


def test_dice_ce_masked_matches_oracle():
    rng = np.random.default_rng(1)
    for _ in range(30):
        P, Y = rand_probs(rng), rand_labels(rng)
        w = np.zeros((2, 4, 4, 4))
        w[..., rng.choice(4, 2, replace=False)] = 1
        got = float(dice_ce_loss(P, Y, torch.from_numpy(w)))
        assert got == pytest.approx(oracle_dice_ce(P.numpy(), Y.numpy(), w), abs=1e-6)


def test_dice_ce_fixed_points():
    rng = np.random.default_rng(2)
    Y = rand_labels(rng)
    onehot = torch.nn.functional.one_hot(Y, 2).permute(0, 4, 1, 2, 3).double()
    assert float(dice_ce_loss(onehot, Y)) == pytest.approx(0.0, abs=1e-6)
    uniform = torch.full((2, 2, 4, 4, 4), 0.5)
    # CE part of a uniform prediction is exactly ln 2
    ce_only = float(dice_ce_loss(uniform, Y)) - (1 - (2 * 0.5 * float(Y.sum()) + 1e-5) / (0.5 * 128 + float(Y.sum()) + 1e-5))
    assert ce_only == pytest.approx(LN2, abs=1e-12)


def test_dice_ce_full_mask_equals_unmasked():
    rng = np.random.default_rng(3)
    P, Y = rand_probs(rng), rand_labels(rng)
    assert float(dice_ce_loss(P, Y, torch.ones(2, 4, 4, 4))) == float(dice_ce_loss(P, Y))


def test_dice_ce_empty_mask_raises():
    rng = np.random.default_rng(4)
    with pytest.raises(EmptyMask):
        dice_ce_loss(rand_probs(rng), rand_labels(rng), torch.zeros(2, 4, 4, 4))


def test_dice_ce_shape_mismatch():
    rng = np.random.default_rng(5)
    with pytest.raises(ShapeMismatch):
        dice_ce_loss(rand_probs(rng), rand_labels(rng, n=3))


# ----------------------------------------------------------------------------
# rotation / inpaint / pretrain sum


def test_rotation_matches_oracle():
    rng = np.random.default_rng(6)
    for _ in range(100):
        logits = rng.normal(size=4) * 3
        r = int(rng.integers(0, 4))
        got = float(rotation_loss(torch.from_numpy(logits)[None], [r]))
        assert got == pytest.approx(oracle_softmax_ce(list(logits), r), abs=1e-6)


def test_rotation_fixed_points():
    assert float(rotation_loss(torch.zeros(1, 4), [2])) == pytest.approx(math.log(4), abs=1e-12)
    big = torch.tensor([[0.0, 0.0, 200.0, 0.0]])
    assert float(rotation_loss(big, [2])) == pytest.approx(0.0, abs=1e-12)


def test_inpaint_matches_oracle():
    rng = np.random.default_rng(7)
    for _ in range(100):
        a, b = rng.normal(size=(2, 2, 4, 4, 4))
        ref = sum(abs(x - y) for x, y in zip(a.ravel().tolist(), b.ravel().tolist())) / a.size
        assert float(inpaint_loss(torch.from_numpy(a), torch.from_numpy(b))) == pytest.approx(ref, abs=1e-7)


def test_inpaint_fixed_points():
    x = torch.rand(1, 2, 4, 4, 4)
    assert float(inpaint_loss(x, x)) == 0.0
    assert float(inpaint_loss(x + 0.1, x)) == pytest.approx(0.1, abs=1e-12)
    with pytest.raises(ShapeMismatch):
        inpaint_loss(x, x[..., :3])


def test_pretrain_loss_weighting():
    assert pretrain_loss(0.2, 0.3, 0.5, PretrainLossWeights()) == pytest.approx(1.0)
    assert pretrain_loss(0.2, 0.3, 0.5, PretrainLossWeights(0, 0, 1)) == 0.5


# ----------------------------------------------------------------------------
# contrastive


def test_contrastive_matches_oracle():
    rng = np.random.default_rng(8)
    for trial in range(100):
        N = int(rng.integers(2, 5))
        t = float(rng.uniform(0.1, 1.0))
        V = rng.normal(size=(2 * N, 16))
        subj, view = pairs(N)
        got = float(contrastive_loss(torch.from_numpy(V), subj, view, t))
        assert got == pytest.approx(oracle_contrastive(V, subj, t), abs=1e-6)


def test_contrastive_identical_vectors_ln2():
    V = torch.ones(4, 8)
    subj, view = pairs(2)
    assert float(contrastive_loss(V, subj, view, 0.5)) == pytest.approx(LN2, abs=1e-12)


def test_contrastive_orthogonal_positives():
    e = torch.eye(4)
    # subject 0 views both e0; subject 1 views both e1: positives sim 1, negatives sim 0
    V = torch.stack([e[0], e[0], e[1], e[1]])
    subj, view = pairs(2)
    expected = -math.log(math.exp(1 / 0.5) / (2 * math.exp(0.0)))
    assert float(contrastive_loss(V, subj, view, 0.5)) == pytest.approx(expected, abs=1e-6)
    assert oracle_contrastive(V.numpy(), subj, 0.5) == pytest.approx(expected, abs=1e-12)


def test_contrastive_scale_and_permutation_invariant():
    rng = np.random.default_rng(9)
    V = torch.from_numpy(rng.normal(size=(6, 8)))
    subj, view = pairs(3)
    base = float(contrastive_loss(V, subj, view))
    assert float(contrastive_loss(5 * V, subj, view)) == pytest.approx(base, abs=1e-12)
    perm = [4, 5, 0, 1, 2, 3]
    assert float(contrastive_loss(V[perm], [subj[p] for p in perm], [view[p] for p in perm])) == pytest.approx(base, abs=1e-12)


def test_contrastive_errors():
    with pytest.raises(BatchTooSmall):
        contrastive_loss(torch.ones(2, 4), [0, 0], [1, 2])
    V = torch.ones(4, 4)
    V[2] = 0
    with pytest.raises(ZeroVector):
        contrastive_loss(V, *pairs(2))
    with pytest.raises(ShapeMismatch):
        contrastive_loss(torch.rand(5, 4), [0, 0, 1, 1, 1], [1, 2, 1, 2, 1])


# ----------------------------------------------------------------------------
# semi-supervised terms


def test_mt_consistency_matches_oracle():
    rng = np.random.default_rng(10)
    for _ in range(100):
        P1, P2 = rand_probs(rng), rand_probs(rng)
        assert float(mt_consistency_loss(P1, P2)) == pytest.approx(oracle_mse(P1.numpy(), P2.numpy()), abs=1e-7)


def test_mt_consistency_shift():
    P1 = torch.full((1, 2, 4, 4, 4), 0.5)
    P2 = P1.clone()
    P2[:, 0] += 0.1
    P2[:, 1] -= 0.1
    assert float(mt_consistency_loss(P1, P2)) == pytest.approx(0.02, abs=1e-12)
    assert float(mt_consistency_loss(P1, P1)) == 0.0


def test_cps_matches_oracle():
    rng = np.random.default_rng(11)
    for _ in range(100):
        P1, P2 = rand_probs(rng), rand_probs(rng)
        l1, l2 = cps_loss(P1, P2)
        assert float(l1) == pytest.approx(oracle_ce_to_argmax(P2.numpy(), P1.numpy()), abs=1e-6)
        assert float(l2) == pytest.approx(oracle_ce_to_argmax(P1.numpy(), P2.numpy()), abs=1e-6)


def test_cps_disagreeing_nets():
    P1 = torch.zeros(1, 2, 4, 4, 4)
    P1[:, 0], P1[:, 1] = 0.9, 0.1
    P2 = P1.flip(1)
    l1, l2 = cps_loss(P1, P2)
    assert float(l1) == pytest.approx(-math.log(0.1), abs=1e-12)
    assert float(l2) == pytest.approx(-math.log(0.1), abs=1e-12)


def test_cps_stop_gradient_is_exactly_zero():
    rng = np.random.default_rng(12)
    z1 = torch.from_numpy(rng.normal(size=(1, 2, 4, 4, 4))).requires_grad_()
    z2 = torch.from_numpy(rng.normal(size=(1, 2, 4, 4, 4))).requires_grad_()
    l1, _ = cps_loss(torch.softmax(z1, 1), torch.softmax(z2, 1))
    g1, g2 = torch.autograd.grad(l1, [z1, z2], allow_unused=True)
    assert g2 is None or float(g2.abs().sum()) == 0.0
    assert float(g1.abs().sum()) > 0


def test_entropy_matches_oracle():
    rng = np.random.default_rng(13)
    for _ in range(100):
        P = rand_probs(rng)
        assert float(entropy_min_loss(P)) == pytest.approx(oracle_entropy(P.numpy()), abs=1e-6)
    onehot = torch.zeros(1, 2, 4, 4, 4)
    onehot[:, 1] = 1
    assert float(entropy_min_loss(onehot)) == 0.0
    assert float(entropy_min_loss(torch.full((1, 2, 4, 4, 4), 0.5))) == pytest.approx(LN2, abs=1e-12)


def test_fixmatch_matches_oracle():
    rng = np.random.default_rng(14)
    for _ in range(100):
        Pw, Ps = rand_probs(rng), rand_probs(rng)
        tau = float(rng.uniform(0.6, 0.95))
        assert float(fixmatch_loss(Pw, Ps, tau)) == pytest.approx(oracle_fixmatch(Pw.numpy(), Ps.numpy(), tau), abs=1e-6)


def test_fixmatch_fixed_points():
    Pw = torch.full((1, 2, 4, 4, 4), 0.5)
    assert float(fixmatch_loss(Pw, Pw, 0.95)) == 0.0
    onehot = torch.zeros(1, 2, 4, 4, 4)
    onehot[:, 1] = 1
    assert float(fixmatch_loss(onehot, onehot, 0.95)) == pytest.approx(0.0, abs=1e-9)


def test_adversarial_matches_oracle():
    rng = np.random.default_rng(15)
    for _ in range(100):
        dl, du = rng.uniform(0.01, 0.99, size=(2, 3, 1))
        gen, disc = adversarial_loss(torch.from_numpy(dl), torch.from_numpy(du))
        og, od = oracle_adversarial(dl, du)
        assert float(gen) == pytest.approx(og, abs=1e-6)
        assert float(disc) == pytest.approx(od, abs=1e-6)


def test_adversarial_fixed_points():
    half = torch.full((4, 1), 0.5)
    gen, disc = adversarial_loss(half, half)
    assert float(gen) == pytest.approx(LN2, abs=1e-12)
    assert float(disc) == pytest.approx(LN2, abs=1e-12)
    _, disc = adversarial_loss(torch.ones(4, 1), torch.zeros(4, 1))
    assert float(disc) == pytest.approx(0.0, abs=1e-9)


def test_uamt_matches_oracle():
    rng = np.random.default_rng(16)
    for _ in range(100):
        Ps, Pt = rand_probs(rng), rand_probs(rng)
        unc = predictive_entropy(Pt)
        h = float(np.median(unc.numpy()))
        mask = unc.numpy() < h
        got = float(uamt_consistency_loss(Ps, Pt, unc, h))
        assert got == pytest.approx(oracle_mse(Ps.numpy(), Pt.numpy(), mask), abs=1e-7)


def test_uamt_reductions():
    rng = np.random.default_rng(17)
    Ps, Pt = rand_probs(rng), rand_probs(rng)
    unc = predictive_entropy(Pt)
    assert float(uamt_consistency_loss(Ps, Pt, unc, 0.0)) == 0.0
    assert float(uamt_consistency_loss(Ps, Pt, unc, 10.0)) == pytest.approx(float(mt_consistency_loss(Ps, Pt)), abs=1e-12)


def test_losses_non_negative():
    rng = np.random.default_rng(18)
    for _ in range(20):
        P1, P2, Y = rand_probs(rng), rand_probs(rng), rand_labels(rng)
        vals = [dice_ce_loss(P1, Y), mt_consistency_loss(P1, P2), *cps_loss(P1, P2), entropy_min_loss(P1),
                fixmatch_loss(P1, P2, 0.7)]
        assert all(float(v) >= 0 for v in vals)


# ----------------------------------------------------------------------------
# gradient checks against central differences


@pytest.mark.parametrize("name", sorted(GRAD_CASES))
def test_gradients_match_finite_differences(name):
    rng = np.random.default_rng(19)
    f, x = GRAD_CASES[name](rng)
    assert check_grad(f, x) < 1e-4
