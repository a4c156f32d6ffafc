import csv
import json
import statistics

import numpy as np
import pytest

from conftest import TINY, tiny_phantom
from lesionseg.errors import ConfigError
from lesionseg.experiments import (
    BUDGET_METHODS,
    ExperimentSpec,
    Method,
    Protocol,
    ResultsTable,
    run_crossval,
    run_experiment,
    run_sparse,
    run_train_size,
    train_size_partition,
)
from lesionseg.losses import SemiLossWeights
from lesionseg.semi import FinetuneConfig, Strategy
from lesionseg.volume import make_folds


@pytest.fixture(scope="module")
def corpus14():
    return [tiny_phantom(100 + i) for i in range(14)]


def recording_trainer(log):
    def trainer(labeled, unlabeled, cfg):
        log.append({"labeled": [s.subject_id for s in labeled], "unlabeled": [s.subject_id for s in unlabeled],
                    "cfg": cfg, "slices": [None if s.labeled_slices is None else int(s.labeled_slices.sum())
                                           for s in labeled]})
        return len(labeled)

    return trainer


def count_evaluator(model, samples, icfg):
    # a deterministic function of the trained "model" and the test ids
    return [(model * 7 + int(s.subject_id[1:])) % 10 / 10 for s in samples]


def test_crossval_stub_trainer_fixed_model(corpus14):
    table = run_crossval(corpus14, ["FULLY_SUPERVISED", "CPS"], k=7, finetune_cfg=FinetuneConfig(encoder=TINY),
                         trainer=lambda *a: None, evaluator=lambda m, s, c: [0.6] * len(s))
    for m in table.methods:
        assert table.values(m, "crossval") == [0.6] * 7
        assert table.std(m, "crossval") == 0.0


def test_crossval_csv_recomputes(corpus14, tmp_path):
    log = []
    table = run_crossval(corpus14, ["FULLY_SUPERVISED", "MEAN_TEACHER", "CPS"], k=7,
                         finetune_cfg=FinetuneConfig(encoder=TINY), trainer=recording_trainer(log),
                         evaluator=count_evaluator)
    assert len(log) == 21
    for entry in log:
        assert len(entry["labeled"]) == 12
    table.write(str(tmp_path), "crossval")
    with open(tmp_path / "crossval.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["Methods"] + [f"Fold {i}" for i in range(1, 8)] + ["Avg", "Std"]
    assert len(rows) == 4
    for row in rows[1:]:
        folds = [float(x) for x in row[1:8]]
        assert all(0 <= x <= 1 for x in folds)
        assert abs(statistics.fmean(folds) - float(row[8])) < 1e-9
        assert abs(statistics.stdev(folds) - float(row[9])) < 1e-9
    back = ResultsTable.from_dict(json.loads((tmp_path / "crossval.json").read_text()))
    assert back.cells == table.cells


def test_crossval_real_training_grid(corpus14):
    cfg = FinetuneConfig(encoder=TINY, max_steps=1, learning_rate=0.01, weights=SemiLossWeights(1.0))
    table = run_crossval(corpus14, ["FULLY_SUPERVISED", "ENTROPY_MIN"], k=7, finetune_cfg=cfg)
    assert table.methods == ["Fully Supervised", "Entropy Minimization"]
    for m in table.methods:
        v = table.values(m, "crossval")
        assert len(v) == 7 and all(0.0 <= x <= 1.0 for x in v)


def test_train_size_partition():
    fold = make_folds([f"s{i}" for i in range(14)], 7, np.random.default_rng(0))[0]
    lab, pool = train_size_partition(fold, 3, 0)
    assert len(lab) == 3 and len(pool) == 9
    assert sorted(lab + pool + list(fold.test_ids)) == sorted(f"s{i}" for i in range(14))
    lab12, pool12 = train_size_partition(fold, 12, 0)
    assert len(lab12) == 12 and pool12 == []
    with pytest.raises(ConfigError):
        train_size_partition(fold, 13, 0)


def test_train_size_protocol(corpus14, tmp_path):
    log = []
    extra = [tiny_phantom(300, labeled=False)]
    spec = ExperimentSpec(protocol=Protocol.TRAIN_SIZE, fold_limit=1, pretrain_checkpoint="pt.npz")
    table = run_train_size(corpus14, budgets=[3, 5, 10], finetune_cfg=FinetuneConfig(encoder=TINY), spec=spec,
                           unlabeled=extra, trainer=recording_trainer(log), evaluator=count_evaluator)
    header, rows = table.wide_rows()
    assert header == ["Methods", "3 labeled", "5 labeled", "10 labeled"]
    assert [r[0] for r in rows] == [m.name for m in BUDGET_METHODS]
    assert all(len(r) == 4 and all(r[1:]) for r in rows)
    for entry in log:
        n = len(entry["labeled"])
        assert len(entry["unlabeled"]) == 12 - n + 1
        assert not set(entry["labeled"]) & set(entry["unlabeled"])
    ckpts = [e["cfg"].init_checkpoint for e in log]
    assert len(log) == 18 and ckpts.count("pt.npz") == 9 and ckpts.count(None) == 9
    table.write(str(tmp_path), "train_size")
    with open(tmp_path / "train_size.csv") as fh:
        rows = list(csv.reader(fh))
    assert len(rows) == 7 and all(len(r) == 4 for r in rows)


def test_pretrained_method_needs_checkpoint(corpus14):
    with pytest.raises(ConfigError):
        run_train_size(corpus14, budgets=[3], methods=["CPS + pre-train"], spec=ExperimentSpec(fold_limit=1),
                       finetune_cfg=FinetuneConfig(encoder=TINY), trainer=lambda *a: 0,
                       evaluator=count_evaluator)


def test_sparse_protocol(corpus14):
    log = []
    spec = ExperimentSpec(protocol=Protocol.SPARSE, n_test=2)
    methods = [Method("Mean Teacher", Strategy.MEAN_TEACHER)]
    table = run_sparse(corpus14, levels=[0.25, 1.0], methods=methods, finetune_cfg=FinetuneConfig(encoder=TINY),
                       spec=spec, trainer=recording_trainer(log), evaluator=count_evaluator)
    assert table.settings == ["25%", "100%"]
    sparse, full = log
    assert len(sparse["labeled"]) == 12
    depth = {s.subject_id: s.shape[2] for s in corpus14}
    assert sparse["slices"] == [int(0.25 * depth[i]) for i in sparse["labeled"]]
    assert sparse["unlabeled"] == sparse["labeled"]
    assert full["unlabeled"] == [] and full["slices"] == [depth[i] for i in full["labeled"]]
    assert len(table.values("Mean Teacher", "25%")) == 2
    # deterministic per (seed, subject)
    log2 = []
    run_sparse(corpus14, levels=[0.25], methods=methods, finetune_cfg=FinetuneConfig(encoder=TINY), spec=spec,
               trainer=recording_trainer(log2), evaluator=count_evaluator)
    assert log2[0]["labeled"] == sparse["labeled"] and log2[0]["slices"] == sparse["slices"]


def test_spec_validation():
    with pytest.raises(ConfigError):
        ExperimentSpec(sparsity_levels=[0.0]).validate()
    with pytest.raises(ConfigError):
        ExperimentSpec(strategies=["NOPE"]).validate()
    with pytest.raises(ConfigError):
        ExperimentSpec(methods=["NOPE"]).validate()


def test_experiment_tables_reproducible(corpus14):
    cfg = FinetuneConfig(encoder=TINY, max_steps=1, learning_rate=0.01)
    spec = ExperimentSpec(protocol=Protocol.CROSSVAL, strategies=["FULLY_SUPERVISED"], folds=7, fold_limit=2)
    a = run_experiment(spec, corpus14, cfg)
    b = run_experiment(spec, corpus14, cfg)
    assert a.cells == b.cells
