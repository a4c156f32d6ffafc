"""Semi-supervised fine-tuning: one step interface over six strategies.

Every step draws its labeled and unlabeled batches from separate random
streams, and dropout masks are reseeded per step and per pass. With
``lambda_semi = 0`` every strategy therefore follows the fully supervised
weight trajectory exactly.
"""
import copy
import enum
import logging
import math
import os
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import rng as rngs
from .augment import apply_cutouts, apply_histogram, draw_cutouts, draw_histogram_points
from .errors import StrategyMismatch
from .losses import (
    SemiLossWeights,
    default_strategy_params,
    adversarial_loss,
    cps_loss,
    dice_ce_loss,
    entropy_min_loss,
    fixmatch_loss,
    mt_consistency_loss,
    predictive_entropy,
    uamt_consistency_loss,
)
from .model import EncoderConfig, build_model, load_encoder_into, save_checkpoint, state_checksum
from .trainutil import (
    make_optimizer,
    seed_dropout,
    stack_images,
    stack_masks,
    stack_slice_masks,
    write_json,
    write_rows_csv,
)
from .volume import sample_subvolumes

log = logging.getLogger(__name__)


class Strategy(str, enum.Enum):
    FULLY_SUPERVISED = "FULLY_SUPERVISED"
    MEAN_TEACHER = "MEAN_TEACHER"
    ENTROPY_MIN = "ENTROPY_MIN"
    ADVERSARIAL = "ADVERSARIAL"
    UAMT = "UAMT"
    FIXMATCH = "FIXMATCH"
    CPS = "CPS"

    @property
    def uses_unlabeled(self):
        return self is not Strategy.FULLY_SUPERVISED


@dataclass
class FinetuneConfig:
    strategy: Strategy = Strategy.CPS
    weights: SemiLossWeights = field(default_factory=SemiLossWeights)
    learning_rate: float = 1e-4
    momentum: float = 0.0
    labeled_per_step: int = 1
    unlabeled_per_step: int = 1
    subvolumes_per_subject: int = 2
    max_steps: int = 1000
    seed: int = 0
    init_checkpoint: str | None = None
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    eval_every: int = 0

    def validate(self):
        self.strategy = Strategy(self.strategy)
        self.weights.validate()
        self.encoder.validate()
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if self.labeled_per_step < 1:
            raise ValueError("labeled_per_step must be >= 1")
        if self.strategy.uses_unlabeled and self.labeled_per_step != self.unlabeled_per_step:
            raise ValueError("semi-supervised strategies need labeled_per_step == unlabeled_per_step")
        return self

    def param(self, name):
        params = self.weights.strategy_params
        return params[name] if name in params else default_strategy_params()[name]


# ----------------------------------------------------------------------------
# state


@dataclass
class EMAState:
    teacher: nn.Module
    decay: float


@dataclass
class DualNetState:
    net1: nn.Module
    net2: nn.Module
    opt1: torch.optim.Optimizer
    opt2: torch.optim.Optimizer


@dataclass
class TrainState:
    strategy: Strategy
    model: nn.Module  # the inference network (net1 for CPS)
    optimizer: torch.optim.Optimizer
    ema: EMAState | None = None
    dual: DualNetState | None = None
    discriminator: nn.Module | None = None
    disc_optimizer: torch.optim.Optimizer | None = None
    step: int = 0
    seed: int = 0

    def networks(self):
        return [self.dual.net1, self.dual.net2] if self.dual else [self.model]


class Discriminator(nn.Module):
    """Four strided 3D convolutions scoring a probability map as "labeled"."""

    def __init__(self, in_channels=2, width=8):
        super().__init__()
        layers = []
        c = in_channels
        for i in range(4):
            layers += [nn.Conv3d(c, width * 2**i, 4, stride=2, padding=1), nn.LeakyReLU(0.2, inplace=True)]
            c = width * 2**i
        self.features = nn.Sequential(*layers)
        self.fc = nn.Linear(c, 1)

    def forward(self, p):
        return torch.sigmoid(self.fc(self.features(p).mean(dim=(2, 3, 4)))).squeeze(1)


def ema_update(state, student):
    """shadow <- decay * shadow + (1 - decay) * student, elementwise."""
    d = state.decay
    with torch.no_grad():
        t_params = dict(state.teacher.named_parameters())
        for name, p in student.named_parameters():
            t_params[name].mul_(d).add_(p.detach(), alpha=1.0 - d)
        t_bufs = dict(state.teacher.named_buffers())
        for name, b in student.named_buffers():
            if b.dtype.is_floating_point:
                t_bufs[name].copy_(b)
    return state


def make_ema(student, decay):
    teacher = copy.deepcopy(student)
    for p in teacher.parameters():
        p.requires_grad_(False)
    return EMAState(teacher, decay)


def _seg_model(cfg, tag):
    model = build_model(
        cfg.encoder,
        with_proxy=False,
        with_decoder=True,
        seed=rngs.sub_seed(cfg.seed, "init", tag),
        dropout_seed=rngs.sub_seed(cfg.seed, "dropout", tag),
    )
    if cfg.init_checkpoint:
        load_encoder_into(model, cfg.init_checkpoint)
    return model


def init_models(cfg):
    """Networks, optimizers and strategy extras for ``cfg.strategy``."""
    cfg.validate()
    model = _seg_model(cfg, 1)
    opt = make_optimizer(model.parameters(), cfg.learning_rate, cfg.momentum)
    state = TrainState(cfg.strategy, model, opt, seed=cfg.seed)
    if cfg.strategy in (Strategy.MEAN_TEACHER, Strategy.UAMT):
        state.ema = make_ema(model, cfg.param("ema_decay"))
    elif cfg.strategy is Strategy.CPS:
        net2 = _seg_model(cfg, 2)
        state.dual = DualNetState(model, net2, opt, make_optimizer(net2.parameters(), cfg.learning_rate, cfg.momentum))
    elif cfg.strategy is Strategy.ADVERSARIAL:
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(rngs.sub_seed(cfg.seed, "init", 3))
            state.discriminator = Discriminator(cfg.encoder.n_classes)
        state.disc_optimizer = make_optimizer(state.discriminator.parameters(), cfg.learning_rate, cfg.momentum)
    return state


# ----------------------------------------------------------------------------
# step


def masked_supervised_loss(P, Y, labeled_slices=None):
    """Dice + CE restricted to annotated slices.

    ``labeled_slices`` is either a per-voxel block broadcastable to Y or a
    1-D indicator over the third spatial axis.
    """
    if labeled_slices is None:
        return dice_ce_loss(P, Y)
    m = torch.as_tensor(labeled_slices, dtype=torch.bool)
    if m.dim() == 1:
        m = m.view(1, 1, 1, -1)
    return dice_ce_loss(P, Y, slice_mask=m)


def _probs(model, x, dropout_seed):
    seed_dropout(model, dropout_seed)
    return F.softmax(model(x), dim=1)


def _gaussian(x, sigma, seed):
    if sigma == 0:
        return x
    g = torch.Generator()
    g.manual_seed(seed)
    return (x + sigma * torch.randn(x.shape, generator=g)).clamp(0.0, 1.0)


def _strong_view(x, seed):
    rng = np.random.default_rng(seed)
    out = []
    for arr in x.numpy():
        arr = apply_cutouts(arr, draw_cutouts(arr, rng))
        out.append(apply_histogram(arr, draw_histogram_points(rng, arr.shape[0])))
    return torch.from_numpy(np.stack(out).astype(np.float32))


def semi_weight(cfg, step):
    """lambda_semi with the optional exp(-5 (1 - t)^2) ramp-up applied."""
    lam = cfg.weights.lambda_semi
    frac = cfg.param("semi_rampup_fraction")
    if frac <= 0:
        return lam
    t = min(step / max(frac * cfg.max_steps, 1.0), 1.0)
    return lam * math.exp(-5.0 * (1.0 - t) ** 2)


def _uamt_threshold(cfg, step):
    frac = min(step / max(cfg.max_steps, 1), 1.0)
    return cfg.param("uamt_h_start") + frac * (cfg.param("uamt_h_end") - cfg.param("uamt_h_start"))


def finetune_step(state, labeled_batch, unlabeled_batch, cfg):
    """One optimisation step; returns a dict of losses per trained network.

    ``labeled_batch`` is a list of SubVolumes with masks; ``unlabeled_batch``
    a list of SubVolumes (masks ignored), empty for FULLY_SUPERVISED.
    """
    strategy = Strategy(cfg.strategy)
    if state.strategy is not strategy:
        raise StrategyMismatch(f"state is {state.strategy.value}, config asks for {strategy.value}")
    state.step += 1
    step_seed = rngs.sub_seed(state.seed, "step", state.step)
    lam = semi_weight(cfg, state.step)
    x_l = stack_images(labeled_batch)
    y_l = stack_masks(labeled_batch)
    sm = stack_slice_masks(labeled_batch)
    x_u = stack_images(unlabeled_batch) if (unlabeled_batch and strategy.uses_unlabeled) else None

    for net in state.networks():
        net.train()

    if strategy is Strategy.CPS:
        return _cps_step(state, x_l, y_l, sm, x_u, lam, step_seed)

    model, opt = state.model, state.optimizer
    opt.zero_grad(set_to_none=False)
    P_l = _probs(model, x_l, step_seed)
    l_sup = masked_supervised_loss(P_l, y_l, sm)
    l_unsup = torch.zeros(())
    extra = {}

    if x_u is not None:
        u_seed = rngs.sub_seed(state.seed, "step-unlabeled", state.step)
        if strategy is Strategy.MEAN_TEACHER:
            P_s = _probs(model, x_u, u_seed)
            teacher = state.ema.teacher
            teacher.eval()
            with torch.no_grad():
                noisy = _gaussian(x_u, cfg.param("mt_noise_sigma"), u_seed)
                P_t = F.softmax(teacher(noisy), dim=1)
            l_unsup = mt_consistency_loss(P_s, P_t)
        elif strategy is Strategy.UAMT:
            P_s = _probs(model, x_u, u_seed)
            teacher = state.ema.teacher
            teacher.train()
            passes = []
            with torch.no_grad():
                for t in range(int(cfg.param("uamt_passes"))):
                    noisy = _gaussian(x_u, cfg.param("mt_noise_sigma"), u_seed + t + 1)
                    passes.append(_probs(teacher, noisy, u_seed + t + 1))
            P_t = torch.stack(passes).mean(dim=0)
            unc = predictive_entropy(P_t)
            h = _uamt_threshold(cfg, state.step)
            l_unsup = uamt_consistency_loss(P_s, P_t, unc, h)
            extra["uamt_threshold"] = h
            extra["uamt_certain_fraction"] = float((unc < h).float().mean())
        elif strategy is Strategy.ENTROPY_MIN:
            l_unsup = entropy_min_loss(_probs(model, x_u, u_seed))
        elif strategy is Strategy.FIXMATCH:
            with torch.no_grad():
                weak = _gaussian(x_u, cfg.param("fixmatch_weak_sigma"), u_seed)
                P_w = _probs(model, weak, u_seed)
            P_st = _probs(model, _strong_view(x_u, u_seed), u_seed + 1)
            l_unsup = fixmatch_loss(P_w, P_st, cfg.param("fixmatch_tau"))
        elif strategy is Strategy.ADVERSARIAL:
            P_u = _probs(model, x_u, u_seed)
            disc = state.discriminator
            gen, _ = adversarial_loss(disc(P_l), disc(P_u))
            l_unsup = cfg.param("adversarial_weight") * gen

    total = l_sup + lam * l_unsup
    total.backward()
    opt.step()
    # the teacher never sees optimizer gradients, only the EMA of the student
    if state.ema is not None:
        ema_update(state.ema, model)
    if strategy is Strategy.ADVERSARIAL and x_u is not None:
        extra["disc"] = _discriminator_step(state, P_l.detach(), P_u.detach())
    return {"net1": {"sup": float(l_sup.detach()), "unsup": float(l_unsup.detach()),
                     "total": float(total.detach()), **extra}}


def _discriminator_step(state, P_l, P_u):
    opt = state.disc_optimizer
    opt.zero_grad(set_to_none=False)
    _, disc = adversarial_loss(state.discriminator(P_l), state.discriminator(P_u))
    disc.backward()
    opt.step()
    return float(disc.detach())


def _cps_step(state, x_l, y_l, sm, x_u, lam, step_seed):
    dual = state.dual
    dual.opt1.zero_grad(set_to_none=False)
    dual.opt2.zero_grad(set_to_none=False)
    s1, s2 = step_seed, rngs.sub_seed(state.seed, "step-net2", state.step)
    l_sup1 = masked_supervised_loss(_probs(dual.net1, x_l, s1), y_l, sm)
    l_sup2 = masked_supervised_loss(_probs(dual.net2, x_l, s2), y_l, sm)
    u1 = u2 = torch.zeros(())
    if x_u is not None:
        P1 = _probs(dual.net1, x_u, rngs.sub_seed(state.seed, "step-unlabeled", state.step))
        P2 = _probs(dual.net2, x_u, rngs.sub_seed(state.seed, "step-unlabeled-net2", state.step))
        u1, u2 = cps_loss(P1, P2)
    t1 = l_sup1 + lam * u1
    t2 = l_sup2 + lam * u2
    # pseudo-labels are detached, so t1 only reaches net1 and t2 only net2
    (t1 + t2).backward()
    dual.opt1.step()
    dual.opt2.step()
    return {
        "net1": {"sup": float(l_sup1.detach()), "unsup": float(u1.detach()), "total": float(t1.detach())},
        "net2": {"sup": float(l_sup2.detach()), "unsup": float(u2.detach()), "total": float(t2.detach())},
    }


# ----------------------------------------------------------------------------
# loop


class CPSEnsemble(nn.Module):
    """Averages the two CPS networks' probabilities (returned as log-probs)."""

    def __init__(self, net1, net2):
        super().__init__()
        self.net1, self.net2 = net1, net2
        self.cfg = net1.cfg

    def forward(self, x):
        p = 0.5 * (F.softmax(self.net1(x), dim=1) + F.softmax(self.net2(x), dim=1))
        return torch.log(p.clamp_min(1e-12))


def inference_model(state, cfg):
    if state.dual is not None and cfg.param("cps_average_nets"):
        return CPSEnsemble(state.dual.net1, state.dual.net2)
    return state.model


@dataclass
class FinetuneReport:
    steps: list = field(default_factory=list)
    eval_curve: list = field(default_factory=list)  # (step, mean Dice)
    checksums: dict = field(default_factory=dict)

    def to_dict(self):
        return {
            "steps": self.steps,
            "eval_curve": [{"step": s, "dice": d} for s, d in self.eval_curve],
            "checksums": self.checksums,
        }

    def write(self, out_dir):
        write_json(self.to_dict(), os.path.join(out_dir, "finetune_report.json"))
        flat = []
        for row in self.steps:
            r = {"step": row["step"]}
            for net, vals in row.items():
                if isinstance(vals, dict):
                    r.update({f"{net}_{k}": v for k, v in vals.items() if k in ("sup", "unsup", "total")})
            flat.append(r)
        if flat:
            write_rows_csv(flat, os.path.join(out_dir, "finetune_losses.csv"))


def _draw(samples, k, n_sub, size, rng):
    picks = rng.choice(len(samples), size=k, replace=len(samples) < k)
    out = []
    for i in picks:
        out.extend(sample_subvolumes(samples[i], n=n_sub, size=size, rng=rng))
    return out


def _strip_labels(samples):
    from dataclasses import replace

    return [replace(s, lesion_mask=None, labeled=False, labeled_slices=None) for s in samples]


def run_finetune(labeled_set, unlabeled_set, cfg, val_set=None, out_dir=None, evaluator=None):
    """Train ``cfg.max_steps`` steps; returns (TrainState, FinetuneReport).

    ``val_set`` with ``cfg.eval_every > 0`` records a Dice curve using
    ``evaluator(model, samples) -> mean dice`` (defaults to sliding-window
    evaluation).
    """
    cfg.validate()
    labeled_set = list(labeled_set)
    if not labeled_set:
        raise ValueError("labeled_set is empty")
    unlabeled_set = list(unlabeled_set or [])
    if cfg.strategy.uses_unlabeled and not unlabeled_set:
        log.warning("no unlabeled data for %s; reusing labeled images without masks", cfg.strategy.value)
        unlabeled_set = _strip_labels(labeled_set)
    state = init_models(cfg)
    size = cfg.encoder.img_size
    lab_rng = rngs.stream(cfg.seed, "data", 0)
    unl_rng = rngs.stream(cfg.seed, "data", 1)
    report = FinetuneReport()
    if evaluator is None and val_set:
        from .infer import evaluate_model

        evaluator = evaluate_model
    for step in range(1, cfg.max_steps + 1):
        lab = _draw(labeled_set, cfg.labeled_per_step, cfg.subvolumes_per_subject, size, lab_rng)
        unl = []
        if cfg.strategy.uses_unlabeled:
            unl = _draw(unlabeled_set, cfg.unlabeled_per_step, cfg.subvolumes_per_subject, size, unl_rng)
        losses = finetune_step(state, lab, unl, cfg)
        report.steps.append({"step": step, **losses})
        if val_set and cfg.eval_every and step % cfg.eval_every == 0:
            report.eval_curve.append((step, float(evaluator(inference_model(state, cfg), val_set))))
    report.checksums = {f"net{i + 1}": state_checksum(n) for i, n in enumerate(state.networks())}
    if out_dir:
        report.write(out_dir)
        save_checkpoint(state.model, os.path.join(out_dir, "finetune_net1.npz"), "finetune", cfg.max_steps)
        if state.dual is not None:
            save_checkpoint(state.dual.net2, os.path.join(out_dir, "finetune_net2.npz"), "finetune", cfg.max_steps)
    return state, report
