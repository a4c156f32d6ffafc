"""``lesionseg`` command-line interface.

Subcommands: phantom, pretrain, finetune, predict, experiment, report.
Each accepts ``--config run.toml``; flags override the file, the file
overrides defaults. Exit codes: 0 ok, 2 configuration error, 3 runtime error.
A failing run prints one JSON error record on stderr.
"""
import argparse
import json
import logging
import os
import sys
from dataclasses import replace

import numpy as np

from . import config as C
from . import rng as rngs
from .errors import ConfigError
from .volume import Modality, Volume, generate_phantom, place_back, preprocess

log = logging.getLogger("lesionseg")

OUTPUT_ROOT_ENV = "LESIONSEG_OUTPUT_ROOT"

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError("argv", message)


def _flag(name):
    return "--" + name.replace("_", "-")


def build_parser():
    p = _Parser(prog="lesionseg", description="Limited-supervision 3D lesion segmentation.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for command, schema in C.SECTIONS.items():
        sp = sub.add_parser(command)
        sp.add_argument("--config", default=None, help="TOML config file")
        sp.add_argument("--seed", type=int, default=argparse.SUPPRESS)
        sp.add_argument("--out-dir", dest="output_dir", default=argparse.SUPPRESS)
        if command == "report":
            sp.add_argument("--results-dir", dest="manifest", default=argparse.SUPPRESS)
        elif command != "phantom":
            sp.add_argument("--manifest", default=argparse.SUPPRESS, help="dataset manifest JSON")
        for name, opt in schema.items():
            kw = {"dest": f"opt__{name}", "default": argparse.SUPPRESS, "help": opt.help}
            if opt.type is bool:
                kw["type"] = lambda s: C._scalar(bool, s)
            else:
                kw["type"] = opt.type
            if opt.nargs:
                kw["nargs"] = opt.nargs
            if opt.choices:
                kw["choices"] = opt.choices
            sp.add_argument(_flag(name), **kw)
    return p


def parse_run_config(argv):
    """argv -> RunConfig with every value resolved and type-checked."""
    args = vars(build_parser().parse_args(argv))
    command = args["command"]
    doc = C.read_toml(args["config"]) if args.get("config") else {}
    cli_values = {k[len("opt__"):]: v for k, v in args.items() if k.startswith("opt__")}
    values = C.resolve(command, doc, cli_values)
    paths = doc.get("paths", {})
    seed = args.get("seed", doc.get("seed", 0))
    if not isinstance(seed, int) or isinstance(seed, bool):
        raise ConfigError("seed", "must be an integer")
    output_dir = args.get("output_dir") or paths.get("output_dir") or ""
    if not output_dir:
        output_dir = os.path.join(os.environ.get(OUTPUT_ROOT_ENV, "runs"), command)
    return C.RunConfig(
        command=command,
        values=values,
        manifest=args.get("manifest") or paths.get("manifest", ""),
        checkpoint_dir=paths.get("checkpoint_dir", ""),
        output_dir=output_dir,
        seed=seed,
    ), args.get("verbose", False)


# ----------------------------------------------------------------------------
# data helpers


def _require_manifest(rc):
    if not rc.manifest:
        raise ConfigError("paths.manifest", "required for this command")
    if not os.path.exists(rc.manifest):
        raise ConfigError("paths.manifest", f"not found: {rc.manifest}")
    return rc.manifest


def load_preprocessed(manifest):
    """(labeled, unlabeled) lists of normalized, brain-cropped samples."""
    from .io import load_dataset

    samples = [preprocess(s) for s in load_dataset(manifest)]
    labeled = [s for s in samples if s.labeled and s.lesion_mask is not None]
    unlabeled = [s for s in samples if not (s.labeled and s.lesion_mask is not None)]
    return labeled, unlabeled


# ----------------------------------------------------------------------------
# commands


def cmd_phantom(rc):
    from .io import save_sample, write_manifest

    spec = C.phantom_spec(rc.values, rc.seed)
    os.makedirs(rc.output_dir, exist_ok=True)
    entries = []
    n, n_unl = rc.values["n"], rc.values["n_unlabeled"]
    for i in range(n + n_unl):
        labeled = i < n
        sid = f"phantom_{i:03d}"
        s = generate_phantom(replace(spec, seed=rngs.sub_seed(rc.seed, "phantom", i), labeled=labeled), sid)
        if not labeled:
            s = replace(s, lesion_mask=None, labeled=False)
        entries.append(save_sample(s, rc.output_dir))
    path = write_manifest(entries, os.path.join(rc.output_dir, "manifest.json"))
    return {"manifest": path, "n": len(entries)}


def cmd_pretrain(rc):
    from .pretrain import run_pretraining

    cfg = C.pretrain_config(rc.values, rc.seed)
    labeled, unlabeled = load_preprocessed(_require_manifest(rc))
    report = run_pretraining(labeled + unlabeled, cfg, out_dir=rc.output_dir)
    return {"checkpoint": report.checkpoint_path, "best_step": report.best_step,
            "best_eval_l1": report.best_eval_l1, "stopped_early": report.stopped_early}


def cmd_finetune(rc):
    from .semi import run_finetune

    cfg = C.finetune_config(rc.values, rc.seed)
    labeled, unlabeled = load_preprocessed(_require_manifest(rc))
    if not labeled:
        raise ConfigError("paths.manifest", "manifest has no labeled subjects")
    _, report = run_finetune(labeled, unlabeled, cfg, out_dir=rc.output_dir)
    return {"checkpoint": os.path.join(rc.output_dir, "finetune_net1.npz"),
            "final": report.steps[-1] if report.steps else None, "checksums": report.checksums}


def cmd_predict(rc):
    import torch

    from .infer import dice_score, sliding_window_predict
    from .io import load_dataset, save_volume
    from .model import build_model, load_model

    v = rc.values
    if v["checkpoint"]:
        if not os.path.exists(v["checkpoint"]):
            raise ConfigError("predict.checkpoint", f"not found: {v['checkpoint']}")
        model, _ = load_model(v["checkpoint"])
        v = {**v, "img_size": model.cfg.img_size}
    else:
        model = build_model(C.encoder_config("predict", v), seed=rngs.sub_seed(rc.seed, "init"))
    icfg = C.inference_config("predict", v)
    os.makedirs(rc.output_dir, exist_ok=True)
    results = []
    with torch.no_grad():
        for raw in load_dataset(_require_manifest(rc)):
            s = preprocess(raw)
            prob = sliding_window_predict(model, s, icfg)
            full = place_back(prob.data, s.offset, s.source_shape).astype(np.float32)
            base = os.path.join(rc.output_dir, s.subject_id)
            save_volume(Volume(full, raw.t1.spacing, Modality.PROB), base + "_prob.nii.gz")
            pred = full >= icfg.threshold
            save_volume(Volume(pred.astype(np.uint8), raw.t1.spacing, Modality.MASK), base + "_pred.nii.gz")
            row = {"subject_id": s.subject_id, "prob_path": base + "_prob.nii.gz"}
            if raw.lesion_mask is not None:
                row["dice"] = dice_score(pred, raw.lesion_mask.data)
            results.append(row)
    _write_json(os.path.join(rc.output_dir, "predictions.json"), results)
    return {"n": len(results)}


def cmd_experiment(rc):
    from .experiments import run_experiment

    spec = C.experiment_spec(rc.values, rc.seed)
    fcfg = C.finetune_config(rc.values, rc.seed, section="experiment")
    icfg = C.inference_config("experiment", rc.values)
    if spec.pretrain_checkpoint and not os.path.exists(spec.pretrain_checkpoint):
        raise ConfigError("experiment.pretrain_checkpoint", f"not found: {spec.pretrain_checkpoint}")
    labeled, unlabeled = load_preprocessed(_require_manifest(rc))
    table = run_experiment(spec, labeled, fcfg, unlabeled, infer_cfg=icfg)
    path = table.write(rc.output_dir, spec.protocol.value.lower())
    return {"table": path, "methods": table.methods, "settings": table.settings}


def cmd_report(rc):
    from .report import make_report

    results_dir = rc.manifest or rc.output_dir
    out = make_report(results_dir, rc.output_dir if rc.output_dir != results_dir else None)
    return {"summary": out["summary"], "images": [i["path"] for i in out["images"]]}


COMMANDS = {
    "phantom": cmd_phantom,
    "pretrain": cmd_pretrain,
    "finetune": cmd_finetune,
    "predict": cmd_predict,
    "experiment": cmd_experiment,
    "report": cmd_report,
}


def _write_json(path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, default=str)


def _error_record(exc, code):
    rec = {"status": "error", "exit_code": code, "error": type(exc).__name__, "message": str(exc)}
    if isinstance(exc, ConfigError):
        rec["field"] = exc.field
        rec["message"] = exc.message
    return rec


def main(argv=None):
    argv = sys.argv[1:] if argv is None else list(argv)
    rc = None
    try:
        rc, verbose = parse_run_config(argv)
        logging.basicConfig(level=logging.INFO if verbose else logging.WARNING,
                            format="%(asctime)s %(name)s %(message)s")
        os.makedirs(rc.output_dir, exist_ok=True)
        with open(os.path.join(rc.output_dir, "run_config.toml"), "w") as fh:
            fh.write(rc.to_toml())
        result = COMMANDS[rc.command](rc)
        print(json.dumps({"status": "ok", "command": rc.command, **(result or {})}, default=str))
        return EXIT_OK
    except ConfigError as exc:
        return _fail(exc, EXIT_CONFIG, rc)
    except Exception as exc:  # any other failure is a runtime error with a record
        log.debug("run failed", exc_info=True)
        return _fail(exc, EXIT_RUNTIME, rc)


def _fail(exc, code, rc):
    rec = _error_record(exc, code)
    print(json.dumps(rec), file=sys.stderr)
    if rc is not None and os.path.isdir(rc.output_dir):
        _write_json(os.path.join(rc.output_dir, "error.json"), rec)
    return code


if __name__ == "__main__":
    sys.exit(main())
