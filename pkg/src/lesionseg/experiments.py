"""Cross-validation, label-budget and sparse-slice experiment protocols."""
import csv
import enum
import json
import logging
import os
import zlib
from dataclasses import dataclass, field, replace

import numpy as np

from . import rng as rngs
from .errors import ConfigError
from .infer import InferenceConfig, dice_score, predict_mask
from .semi import FinetuneConfig, Strategy, inference_model, run_finetune
from .volume import make_folds, with_labeled_slices

log = logging.getLogger(__name__)


class Protocol(str, enum.Enum):
    CROSSVAL = "CROSSVAL"
    TRAIN_SIZE = "TRAIN_SIZE"
    SPARSE = "SPARSE"


STRATEGY_NAMES = {
    Strategy.FULLY_SUPERVISED: "Fully Supervised",
    Strategy.MEAN_TEACHER: "Mean Teacher",
    Strategy.ENTROPY_MIN: "Entropy Minimization",
    Strategy.ADVERSARIAL: "Deep Adversarial Networks",
    Strategy.UAMT: "Uncertainty Aware Mean Teacher",
    Strategy.FIXMATCH: "FixMatch",
    Strategy.CPS: "Cross Pseudo Supervision",
}


@dataclass(frozen=True)
class Method:
    name: str
    strategy: Strategy
    pretrained: bool = False


# row order of the label-budget and sparse-slice tables
BUDGET_METHODS = (
    Method("Fully supervised", Strategy.FULLY_SUPERVISED),
    Method("Fully supervised + pre-train", Strategy.FULLY_SUPERVISED, True),
    Method("Mean Teacher", Strategy.MEAN_TEACHER),
    Method("CPS", Strategy.CPS),
    Method("Mean Teacher + pre-train", Strategy.MEAN_TEACHER, True),
    Method("CPS + pre-train", Strategy.CPS, True),
)


def method_by_name(name):
    for m in BUDGET_METHODS:
        if m.name == name:
            return m
    raise ConfigError("experiment.methods", f"unknown method {name!r}")


@dataclass
class ExperimentSpec:
    protocol: Protocol = Protocol.CROSSVAL
    strategies: list = field(default_factory=lambda: [s.value for s in Strategy])
    methods: list = field(default_factory=lambda: [m.name for m in BUDGET_METHODS])
    budgets: list = field(default_factory=lambda: [3, 5, 10])
    sparsity_levels: list = field(default_factory=lambda: [0.1, 0.2, 0.5, 1.0])
    folds: int = 7
    fold_limit: int | None = None
    seed: int = 0
    n_test: int = 2
    pretrain_checkpoint: str | None = None

    def validate(self):
        self.protocol = Protocol(self.protocol)
        for lvl in self.sparsity_levels:
            if not 0 < lvl <= 1:
                raise ConfigError("experiment.sparsity_levels", f"{lvl} not in (0, 1]")
        for s in self.strategies:
            try:
                Strategy(s)
            except ValueError:
                raise ConfigError("experiment.strategies", f"unknown strategy {s!r}") from None
        for m in self.methods:
            method_by_name(m)
        if self.folds < 2:
            raise ConfigError("experiment.folds", "need at least 2 folds")
        return self


@dataclass
class ResultsTable:
    protocol: str
    settings: list
    methods: list = field(default_factory=list)
    cells: dict = field(default_factory=dict)  # (method, setting) -> per-fold Dice list

    def add(self, method, setting, value):
        if method not in self.methods:
            self.methods.append(method)
        self.cells.setdefault((method, setting), []).append(float(value))

    def values(self, method, setting):
        return self.cells.get((method, setting), [])

    def mean(self, method, setting):
        return float(np.mean(self.values(method, setting)))

    def std(self, method, setting):
        v = self.values(method, setting)
        return float(np.std(v, ddof=1)) if len(v) > 1 else 0.0

    # -- serialization -------------------------------------------------------
    def to_dict(self):
        return {
            "protocol": self.protocol,
            "settings": list(self.settings),
            "methods": list(self.methods),
            "cells": [
                {"method": m, "setting": s, "values": v, "mean": self.mean(m, s), "std": self.std(m, s)}
                for (m, s), v in self.cells.items()
            ],
        }

    @classmethod
    def from_dict(cls, d):
        t = cls(d["protocol"], list(d["settings"]), list(d["methods"]))
        for c in d["cells"]:
            t.cells[(c["method"], c["setting"])] = [float(x) for x in c["values"]]
        return t

    def wide_rows(self):
        """Rows laid out like the published tables."""
        rows = []
        if self.protocol == Protocol.CROSSVAL.value:
            setting = self.settings[0]
            n = max((len(self.values(m, setting)) for m in self.methods), default=0)
            header = ["Methods"] + [f"Fold {i + 1}" for i in range(n)] + ["Avg", "Std"]
            for m in self.methods:
                v = self.values(m, setting)
                rows.append([m, *[repr(x) for x in v], repr(self.mean(m, setting)), repr(self.std(m, setting))])
        else:
            header = ["Methods"] + [str(s) for s in self.settings]
            for m in self.methods:
                rows.append([m, *[repr(self.mean(m, s)) if self.values(m, s) else "" for s in self.settings]])
        return header, rows

    def write(self, out_dir, stem):
        os.makedirs(out_dir, exist_ok=True)
        header, rows = self.wide_rows()
        with open(os.path.join(out_dir, f"{stem}.csv"), "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(header)
            w.writerows(rows)
        with open(os.path.join(out_dir, f"{stem}_folds.csv"), "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["method", "setting", "index", "dice"])
            for (m, s), v in self.cells.items():
                for i, x in enumerate(v):
                    w.writerow([m, s, i, repr(x)])
        with open(os.path.join(out_dir, f"{stem}.json"), "w") as fh:
            json.dump(self.to_dict(), fh, indent=2)
        return os.path.join(out_dir, f"{stem}.csv")


# ----------------------------------------------------------------------------
# training / evaluation hooks


def default_trainer(labeled, unlabeled, cfg):
    state, _ = run_finetune(labeled, unlabeled, cfg)
    return inference_model(state, cfg)


def default_evaluator(model, samples, infer_cfg):
    return [dice_score(predict_mask(model, s, infer_cfg), s.lesion_mask.data) for s in samples]


def _infer_cfg(finetune_cfg, infer_cfg):
    if infer_cfg is not None:
        return infer_cfg
    size = finetune_cfg.encoder.img_size
    return InferenceConfig(window=size, overlap=size // 4)


def _strip(samples):
    return [replace(s, lesion_mask=None, labeled=False, labeled_slices=None) for s in samples]


def _folds(dataset, spec):
    labeled = [s for s in dataset if s.labeled]
    folds = make_folds([s.subject_id for s in labeled], spec.folds, rngs.stream(spec.seed, "folds"))
    if spec.fold_limit:
        folds = folds[: spec.fold_limit]
    return {s.subject_id: s for s in labeled}, folds


def run_crossval(dataset, strategies, k=7, finetune_cfg=None, spec=None, unlabeled=(),
                 trainer=default_trainer, evaluator=default_evaluator, infer_cfg=None):
    """k-fold comparison of strategies; one mean test Dice per fold and strategy."""
    spec = replace(spec or ExperimentSpec(), protocol=Protocol.CROSSVAL, folds=k).validate()
    base = finetune_cfg or FinetuneConfig()
    icfg = _infer_cfg(base, infer_cfg)
    by_id, folds = _folds(dataset, spec)
    table = ResultsTable(Protocol.CROSSVAL.value, ["crossval"])
    for fold in folds:
        train = [by_id[i] for i in fold.train_ids]
        test = [by_id[i] for i in fold.test_ids]
        for strat in strategies:
            strat = Strategy(strat)
            cfg = replace(base, strategy=strat, seed=spec.seed + fold.fold_index, init_checkpoint=None)
            model = trainer(train, list(unlabeled), cfg)
            score = float(np.mean(evaluator(model, test, icfg)))
            log.info("fold %d %s dice %.4f", fold.fold_index + 1, strat.value, score)
            table.add(STRATEGY_NAMES[strat], "crossval", score)
    return table


def train_size_partition(fold, budget, seed):
    """Split a fold's training ids into (labeled, re-pooled as unlabeled)."""
    if budget > len(fold.train_ids):
        raise ConfigError("experiment.budgets", f"budget {budget} > fold train size {len(fold.train_ids)}")
    order = rngs.stream(seed, "budget", fold.fold_index, budget).permutation(len(fold.train_ids))
    ids = [fold.train_ids[i] for i in order]
    return ids[:budget], ids[budget:]


def _method_cfg(base, method, seed, spec):
    ckpt = None
    if method.pretrained:
        ckpt = spec.pretrain_checkpoint
        if not ckpt:
            raise ConfigError("experiment.pretrain_checkpoint", f"method {method.name!r} needs a checkpoint")
    return replace(base, strategy=method.strategy, seed=seed, init_checkpoint=ckpt)


def run_train_size(dataset, budgets=(3, 5, 10), methods=None, finetune_cfg=None, spec=None,
                   unlabeled=(), trainer=default_trainer, evaluator=default_evaluator, infer_cfg=None):
    """Label-budget protocol: per fold keep ``budget`` labeled subjects, pool the rest."""
    spec = replace(spec or ExperimentSpec(), protocol=Protocol.TRAIN_SIZE).validate()
    methods = [method_by_name(m) if isinstance(m, str) else m for m in (methods or spec.methods)]
    base = finetune_cfg or FinetuneConfig()
    icfg = _infer_cfg(base, infer_cfg)
    by_id, folds = _folds(dataset, spec)
    settings = [f"{b} labeled" for b in budgets]
    table = ResultsTable(Protocol.TRAIN_SIZE.value, settings)
    for m in methods:
        table.methods.append(m.name)
    for fold in folds:
        test = [by_id[i] for i in fold.test_ids]
        for b, setting in zip(budgets, settings):
            lab_ids, pool_ids = train_size_partition(fold, b, spec.seed)
            labeled = [by_id[i] for i in lab_ids]
            pool = _strip([by_id[i] for i in pool_ids]) + list(unlabeled)
            for m in methods:
                cfg = _method_cfg(base, m, spec.seed + fold.fold_index, spec)
                model = trainer(labeled, pool, cfg)
                score = float(np.mean(evaluator(model, test, icfg)))
                log.info("fold %d %s %s dice %.4f", fold.fold_index + 1, setting, m.name, score)
                table.add(m.name, setting, score)
    return table


def slice_seed(seed, subject_id):
    return rngs.sub_seed(seed, "slices", zlib.crc32(subject_id.encode()))


def run_sparse(dataset, levels=(0.1, 0.2, 0.5, 1.0), methods=None, finetune_cfg=None, spec=None,
               unlabeled=(), trainer=default_trainer, evaluator=default_evaluator, infer_cfg=None):
    """Sparse-slice protocol on a fixed random test set of ``spec.n_test`` subjects.

    Each training subject keeps ``floor(level * S)`` annotated slices; the
    same images (unannotated) join the unlabeled pool unless ``level == 1``.
    """
    spec = replace(spec or ExperimentSpec(), protocol=Protocol.SPARSE).validate()
    methods = [method_by_name(m) if isinstance(m, str) else m for m in (methods or spec.methods)]
    base = finetune_cfg or FinetuneConfig()
    icfg = _infer_cfg(base, infer_cfg)
    labeled = [s for s in dataset if s.labeled]
    order = rngs.stream(spec.seed, "sparse-test").permutation(len(labeled))
    test = [labeled[i] for i in order[: spec.n_test]]
    train = [labeled[i] for i in order[spec.n_test:]]
    settings = [f"{round(lvl * 100)}%" for lvl in levels]
    table = ResultsTable(Protocol.SPARSE.value, settings)
    for m in methods:
        table.methods.append(m.name)
    for lvl, setting in zip(levels, settings):
        sparse = [with_labeled_slices(s, lvl, slice_seed(spec.seed, s.subject_id)) for s in train]
        pool = list(unlabeled) + (_strip(train) if lvl < 1.0 else [])
        for m in methods:
            cfg = _method_cfg(base, m, spec.seed, spec)
            model = trainer(sparse, pool, cfg)
            for score in evaluator(model, test, icfg):
                table.add(m.name, setting, score)
            log.info("sparse %s %s dice %.4f", setting, m.name, table.mean(m.name, setting))
    return table


def run_experiment(spec, dataset, finetune_cfg, unlabeled=(), **kw):
    spec.validate()
    if spec.protocol is Protocol.CROSSVAL:
        return run_crossval(dataset, spec.strategies, spec.folds, finetune_cfg, spec, unlabeled, **kw)
    if spec.protocol is Protocol.TRAIN_SIZE:
        return run_train_size(dataset, spec.budgets, spec.methods, finetune_cfg, spec, unlabeled, **kw)
    return run_sparse(dataset, spec.sparsity_levels, spec.methods, finetune_cfg, spec, unlabeled, **kw)
