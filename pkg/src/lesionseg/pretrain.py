"""Self-supervised pre-training with rotation, inpainting and contrastive heads."""
import logging
import math
import os
from dataclasses import dataclass, field

import numpy as np
import torch

from . import rng as rngs
from .augment import augment_view, build_contrastive_batch
from .errors import BatchTooSmall, HeadsAbsent, TooFewSamples
from .losses import PretrainLossWeights, contrastive_loss, inpaint_loss, pretrain_loss, rotation_loss
from .model import EncoderConfig, build_model, save_checkpoint
from .trainutil import make_optimizer, stack_images, write_json, write_rows_csv
from .volume import center_subvolume, sample_subvolumes

log = logging.getLogger(__name__)


@dataclass
class PretrainConfig:
    weights: PretrainLossWeights = field(default_factory=PretrainLossWeights)
    batch_subjects_N: int = 2
    learning_rate: float = 1e-4
    momentum: float = 0.0
    max_steps: int = 1000
    eval_every: int = 50
    patience: int = 5
    seed: int = 0
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    eval_ratio: float = 0.2

    def validate(self):
        if self.batch_subjects_N < 2:
            raise BatchTooSmall("batch_subjects_N must be >= 2")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if self.eval_every < 1 or self.patience < 1 or self.max_steps < 0:
            raise ValueError("eval_every and patience must be >= 1, max_steps >= 0")
        self.weights.validate()
        self.encoder.validate()
        return self


@dataclass
class PretrainReport:
    steps: list = field(default_factory=list)  # per-step dicts of losses
    eval_curve: list = field(default_factory=list)  # (step, eval L1)
    best_step: int = 0
    best_eval_l1: float = math.inf
    checkpoint_path: str | None = None
    stopped_early: bool = False
    model: object = field(default=None, repr=False, compare=False)

    def to_dict(self):
        return {
            "steps": self.steps,
            "eval_curve": [{"step": s, "eval_l1": v} for s, v in self.eval_curve],
            "best_step": self.best_step,
            "best_eval_l1": self.best_eval_l1,
            "checkpoint_path": self.checkpoint_path,
            "stopped_early": self.stopped_early,
        }

    def write(self, out_dir):
        write_json(self.to_dict(), os.path.join(out_dir, "pretrain_report.json"))
        if self.steps:
            write_rows_csv(self.steps, os.path.join(out_dir, "pretrain_losses.csv"))
        write_rows_csv(
            [{"step": s, "eval_l1": v} for s, v in self.eval_curve],
            os.path.join(out_dir, "pretrain_eval.csv"),
        )


def split_corpus(samples, ratio=0.8, seed=0):
    """Deterministic (train, eval) split; the eval share is rounded down."""
    samples = list(samples)
    if len(samples) < 5:
        raise TooFewSamples(f"need at least 5 samples to split, got {len(samples)}")
    n_eval = int(math.floor(len(samples) * (1.0 - ratio) + 1e-9))
    order = rngs.stream(seed, "split").permutation(len(samples))
    eval_idx = set(order[:n_eval].tolist())
    train = [s for i, s in enumerate(samples) if i not in eval_idx]
    evals = [s for i, s in enumerate(samples) if i in eval_idx]
    return train, evals


def proxy_losses(model, batch, weights):
    """Forward all 2N views once; returns (rot, inpaint, contrast, total) tensors."""
    x = stack_images(batch.views)
    target = stack_images(batch.targets)
    rot_logits, recon, v = model.forward_proxy(x)
    l_rot = rotation_loss(rot_logits, [r.rotation_class for r in batch.records])
    l_inp = inpaint_loss(recon, target)
    l_con = contrastive_loss(v, batch.subject_of, batch.view_of, weights.temperature_t)
    return l_rot, l_inp, l_con, pretrain_loss(l_rot, l_inp, l_con, weights)


def pretrain_step(model, batch, cfg, optimizer):
    """One SGD step on the weighted proxy loss; returns the component values."""
    if model.proxy_heads is None:
        raise HeadsAbsent("pre-training needs proxy heads")
    model.train()
    optimizer.zero_grad(set_to_none=False)
    l_rot, l_inp, l_con, total = proxy_losses(model, batch, cfg.weights)
    total.backward()
    optimizer.step()
    return {
        "rot": float(l_rot.detach()),
        "inpaint": float(l_inp.detach()),
        "contrast": float(l_con.detach()),
        "total": float(total.detach()),
    }


def eval_inpaint_l1(model, eval_samples, size, seed):
    """Mean L1 of inpainting on centre sub-volumes with fixed per-sample corruption."""
    model.eval()
    vals = []
    with torch.no_grad():
        for i, s in enumerate(eval_samples):
            sv = center_subvolume(s, size)
            view, _rec, target = augment_view(sv, rngs.stream(seed, "eval", i))
            _r, recon, _v = model.forward_proxy(stack_images([view]))
            vals.append(float(inpaint_loss(recon, stack_images([target]))))
    model.train()
    return float(np.mean(vals))


def run_pretraining(corpus, cfg, out_dir=None, model=None):
    """Train the encoder and proxy heads; early-stop on eval inpainting L1.

    ``corpus`` holds preprocessed samples. Stops after ``max_steps`` or after
    ``patience`` consecutive evaluations without improvement, and keeps the
    best checkpoint.
    """
    cfg.validate()
    corpus = list(corpus)
    if not corpus:
        raise TooFewSamples("empty pre-training corpus")
    train, evals = split_corpus(corpus, 1.0 - cfg.eval_ratio, cfg.seed)
    if len(train) < cfg.batch_subjects_N:
        raise BatchTooSmall(f"{len(train)} training samples < N={cfg.batch_subjects_N}")
    size = cfg.encoder.img_size
    if model is None:
        model = build_model(cfg.encoder, with_proxy=True, with_decoder=False,
                            seed=rngs.sub_seed(cfg.seed, "init"))
    optimizer = make_optimizer(model.parameters(), cfg.learning_rate, cfg.momentum)
    data_rng = rngs.stream(cfg.seed, "data")
    aug_rng = rngs.stream(cfg.seed, "augment")

    report = PretrainReport()
    best_state = {}
    ckpt = os.path.join(out_dir, "pretrain_best.npz") if out_dir else None

    def evaluate(step):
        l1 = eval_inpaint_l1(model, evals, size, cfg.seed)
        report.eval_curve.append((step, l1))
        improved = l1 < report.best_eval_l1
        if improved:
            report.best_eval_l1 = l1
            report.best_step = step
            best_state.update({k: v.clone() for k, v in model.state_dict().items()})
            if ckpt:
                save_checkpoint(model, ckpt, training_stage="pretrain", step=step,
                                extra={"eval_l1": l1})
        log.info("pretrain step %d eval L1 %.5f%s", step, l1, " *" if improved else "")
        return improved

    evaluate(0)
    bad = 0
    for step in range(1, cfg.max_steps + 1):
        picks = data_rng.choice(len(train), size=cfg.batch_subjects_N, replace=False)
        sources = [sample_subvolumes(train[i], n=1, size=size, rng=data_rng)[0] for i in picks]
        batch = build_contrastive_batch(sources, aug_rng)
        losses = pretrain_step(model, batch, cfg, optimizer)
        report.steps.append({"step": step, **losses})
        if not all(math.isfinite(v) for v in losses.values()):
            raise FloatingPointError(f"non-finite pre-training loss at step {step}: {losses}")
        if step % cfg.eval_every == 0:
            if evaluate(step):
                bad = 0
            else:
                bad += 1
                if bad >= cfg.patience:
                    report.stopped_early = True
                    break
    report.checkpoint_path = ckpt
    model.load_state_dict(best_state)
    report.model = model
    if out_dir:
        report.write(out_dir)
    return report
