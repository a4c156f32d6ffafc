"""Run configuration: option schema, TOML files, CLI overrides, validation.

Precedence is command line > config file > built-in default. Every value is
validated here so errors name the offending field, e.g. ``finetune.lambda_semi``.
"""
import math
from dataclasses import dataclass, field

import tomli
import tomli_w

from .errors import ConfigError
from .experiments import ExperimentSpec, Protocol, method_by_name
from .infer import InferenceConfig
from .losses import PretrainLossWeights, SemiLossWeights, default_strategy_params
from .model import EncoderConfig
from .pretrain import PretrainConfig
from .semi import FinetuneConfig, Strategy
from .volume import PhantomSpec


@dataclass(frozen=True)
class Option:
    type: type
    default: object
    help: str = ""
    nargs: str | None = None
    choices: tuple | None = None


_ENC = EncoderConfig()
ENCODER_OPTIONS = {
    "img_size": Option(int, _ENC.img_size, "sub-volume / window edge length"),
    "n_stages": Option(int, _ENC.n_stages, "encoder stages"),
    "heads": Option(int, list(_ENC.heads_per_stage), "attention heads per stage", "+"),
    "depths": Option(int, list(_ENC.depths_per_stage), "attention blocks per stage", "+"),
    "base_features": Option(int, _ENC.base_features, "embedding width"),
    "patch_size": Option(int, _ENC.patch_size, "patch edge"),
    "window_size": Option(int, _ENC.window_size, "attention window edge"),
    "dropout": Option(float, _ENC.dropout, "decoder dropout probability"),
}

_SP = default_strategy_params()
FINETUNE_OPTIONS = {
    "strategy": Option(str, Strategy.CPS.value, "semi-supervised strategy",
                       choices=tuple(s.value for s in Strategy)),
    "lambda_semi": Option(float, 1.0, "weight of the unsupervised term"),
    "learning_rate": Option(float, 1e-4, "SGD learning rate"),
    "momentum": Option(float, 0.0, "SGD momentum"),
    "labeled_per_step": Option(int, 1, "labeled subjects per step"),
    "unlabeled_per_step": Option(int, 1, "unlabeled subjects per step"),
    "subvolumes_per_subject": Option(int, 2, "sub-volumes drawn per subject"),
    "max_steps": Option(int, 1000, "training steps"),
    "eval_every": Option(int, 0, "validation period in steps (0 = off)"),
    "init_checkpoint": Option(str, "", "pre-trained checkpoint for the encoder"),
    "ema_decay": Option(float, _SP["ema_decay"], "teacher EMA decay"),
    "mt_noise_sigma": Option(float, _SP["mt_noise_sigma"], "teacher input noise"),
    "fixmatch_tau": Option(float, _SP["fixmatch_tau"], "FixMatch confidence threshold"),
    "fixmatch_weak_sigma": Option(float, _SP["fixmatch_weak_sigma"], "FixMatch weak noise"),
    "adversarial_weight": Option(float, _SP["adversarial_weight"], "generator term weight"),
    "uamt_passes": Option(int, _SP["uamt_passes"], "stochastic teacher passes"),
    "uamt_h_start": Option(float, _SP["uamt_h_start"], "initial uncertainty threshold"),
    "uamt_h_end": Option(float, _SP["uamt_h_end"], "final uncertainty threshold"),
    "cps_average_nets": Option(bool, _SP["cps_average_nets"], "average both CPS nets at inference"),
    "semi_rampup_fraction": Option(float, _SP["semi_rampup_fraction"], "share of steps over which lambda_semi ramps in"),
}

PRETRAIN_OPTIONS = {
    "lambda_rot": Option(float, 1.0, "rotation loss weight"),
    "lambda_inpaint": Option(float, 1.0, "inpainting loss weight"),
    "lambda_contrast": Option(float, 1.0, "contrastive loss weight"),
    "temperature": Option(float, 0.5, "contrastive temperature"),
    "batch_subjects": Option(int, 2, "subjects per contrastive batch (N)"),
    "learning_rate": Option(float, 1e-4, "SGD learning rate"),
    "momentum": Option(float, 0.0, "SGD momentum"),
    "max_steps": Option(int, 1000, "maximum steps"),
    "eval_every": Option(int, 50, "evaluation period in steps"),
    "patience": Option(int, 5, "non-improving evaluations before stopping"),
}

_INF = InferenceConfig()
INFER_OPTIONS = {
    "window": Option(int, 0, "window edge (0 = img_size)"),
    "overlap": Option(int, -1, "window overlap (-1 = window // 4)"),
    "threshold": Option(float, _INF.threshold, "binarization threshold"),
}

_EXP = ExperimentSpec()
EXPERIMENT_OPTIONS = {
    "protocol": Option(str, _EXP.protocol.value, "experiment protocol", choices=tuple(p.value for p in Protocol)),
    "strategies": Option(str, list(_EXP.strategies), "strategies (CROSSVAL)", "+"),
    "methods": Option(str, list(_EXP.methods), "method rows (TRAIN_SIZE / SPARSE)", "+"),
    "budgets": Option(int, list(_EXP.budgets), "labeled subjects per setting", "+"),
    "sparsity_levels": Option(float, list(_EXP.sparsity_levels), "annotated slice fractions", "+"),
    "folds": Option(int, _EXP.folds, "number of folds"),
    "fold_limit": Option(int, 0, "run only the first N folds (0 = all)"),
    "n_test": Option(int, _EXP.n_test, "test subjects (SPARSE)"),
    "pretrain_checkpoint": Option(str, "", "checkpoint for + pre-train rows"),
}

_PH = PhantomSpec()
PHANTOM_OPTIONS = {
    "n": Option(int, 14, "labeled phantoms"),
    "n_unlabeled": Option(int, 0, "extra phantoms without masks"),
    "extent": Option(int, list(_PH.extent), "grid size", "+"),
    "n_lesions": Option(int, list(_PH.n_lesions), "lesion count range", "+"),
    "lesion_radius": Option(float, list(_PH.lesion_radius), "lesion radius range (voxels)", "+"),
    "background_texture": Option(float, _PH.background_texture, "texture smoothness"),
    "n_distractors": Option(int, list(_PH.n_distractors), "distractor count range", "+"),
    "lesion_contrast": Option(float, _PH.lesion_contrast, "FLAIR lesion contrast"),
    "noise_sigma": Option(float, _PH.noise_sigma, "additive noise"),
}

SECTIONS = {
    "phantom": PHANTOM_OPTIONS,
    "pretrain": {**PRETRAIN_OPTIONS, **ENCODER_OPTIONS},
    "finetune": {**FINETUNE_OPTIONS, **ENCODER_OPTIONS, **INFER_OPTIONS},
    "predict": {**ENCODER_OPTIONS, **INFER_OPTIONS, "checkpoint": Option(str, "", "model checkpoint")},
    "experiment": {**EXPERIMENT_OPTIONS, **FINETUNE_OPTIONS, **ENCODER_OPTIONS, **INFER_OPTIONS},
    "report": {},
}

# sections whose keys an [experiment] run also inherits
INHERITS = {"experiment": ("finetune",)}


@dataclass
class RunConfig:
    command: str
    values: dict = field(default_factory=dict)
    manifest: str = ""
    checkpoint_dir: str = ""
    output_dir: str = ""
    seed: int = 0

    def to_toml(self):
        doc = {
            "seed": self.seed,
            "paths": {"manifest": self.manifest, "checkpoint_dir": self.checkpoint_dir,
                      "output_dir": self.output_dir},
            self.command: dict(self.values),
        }
        return tomli_w.dumps(doc)

    @classmethod
    def from_toml(cls, command, text):
        doc = tomli.loads(text)
        paths = doc.get("paths", {})
        values = resolve(command, doc, {})
        return cls(command, values, paths.get("manifest", ""), paths.get("checkpoint_dir", ""),
                   paths.get("output_dir", ""), int(doc.get("seed", 0)))


def read_toml(path):
    try:
        with open(path, "rb") as fh:
            return tomli.load(fh)
    except FileNotFoundError:
        raise ConfigError("config", f"file not found: {path}") from None
    except tomli.TOMLDecodeError as exc:
        raise ConfigError("config", f"invalid TOML: {exc}") from None


def _coerce(section, name, opt, value):
    path = f"{section}.{name}"
    try:
        if opt.nargs:
            if not isinstance(value, (list, tuple)):
                value = [value]
            return [_scalar(opt.type, v) for v in value]
        return _scalar(opt.type, value)
    except (TypeError, ValueError):
        raise ConfigError(path, f"expected {opt.type.__name__}{' list' if opt.nargs else ''}, got {value!r}") from None


def _scalar(t, v):
    if t is bool:
        if isinstance(v, str):
            if v.lower() in ("1", "true", "yes", "on"):
                return True
            if v.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(v)
        return bool(v)
    if t is int and isinstance(v, float) and not v.is_integer():
        raise ValueError(v)
    if t is float and isinstance(v, bool):
        raise ValueError(v)
    return t(v)


def resolve(command, file_doc, cli_values):
    """Merge defaults, file sections and CLI values for ``command``."""
    schema = SECTIONS[command]
    merged = {k: o.default for k, o in schema.items()}
    for sec in INHERITS.get(command, ()) + (command,):
        for k, v in (file_doc.get(sec) or {}).items():
            if k not in schema:
                if sec == command:
                    raise ConfigError(f"{sec}.{k}", "unknown option")
                continue
            merged[k] = _coerce(sec, k, schema[k], v)
    for k, v in cli_values.items():
        merged[k] = _coerce(command, k, schema[k], v)
    for k, o in schema.items():
        if o.choices and merged[k] not in o.choices:
            raise ConfigError(f"{command}.{k}", f"must be one of {', '.join(o.choices)}")
    return merged


# ----------------------------------------------------------------------------
# typed configs


def _check(cond, path, message):
    if not cond:
        raise ConfigError(path, message)


def encoder_config(section, v):
    cfg = EncoderConfig(
        in_channels=2,
        patch_size=v["patch_size"],
        window_size=v["window_size"],
        base_features=v["base_features"],
        n_stages=v["n_stages"],
        heads_per_stage=list(v["heads"]),
        depths_per_stage=list(v["depths"]),
        img_size=v["img_size"],
        dropout=v["dropout"],
    )
    try:
        return cfg.validate()
    except ValueError as exc:
        raise ConfigError(f"{section}.encoder", str(exc)) from None


def inference_config(section, v):
    window = v["window"] or v["img_size"]
    overlap = v["overlap"] if v["overlap"] >= 0 else window // 4
    _check(0 <= overlap < window, f"{section}.overlap", "must be in [0, window)")
    _check(0 < v["threshold"] < 1, f"{section}.threshold", "must be in (0, 1)")
    return InferenceConfig(window=window, overlap=overlap, threshold=v["threshold"])


def pretrain_config(v, seed):
    s = "pretrain"
    for k in ("lambda_rot", "lambda_inpaint", "lambda_contrast"):
        _check(v[k] >= 0, f"{s}.{k}", "must be >= 0")
    _check(v["temperature"] > 0, f"{s}.temperature", "must be > 0")
    _check(v["batch_subjects"] >= 2, f"{s}.batch_subjects", "must be >= 2")
    _check(v["learning_rate"] > 0, f"{s}.learning_rate", "must be > 0")
    _check(v["max_steps"] >= 0, f"{s}.max_steps", "must be >= 0")
    _check(v["eval_every"] >= 1, f"{s}.eval_every", "must be >= 1")
    _check(v["patience"] >= 1, f"{s}.patience", "must be >= 1")
    return PretrainConfig(
        weights=PretrainLossWeights(v["lambda_rot"], v["lambda_inpaint"], v["lambda_contrast"], v["temperature"]),
        batch_subjects_N=v["batch_subjects"],
        learning_rate=v["learning_rate"],
        momentum=v["momentum"],
        max_steps=v["max_steps"],
        eval_every=v["eval_every"],
        patience=v["patience"],
        seed=seed,
        encoder=encoder_config(s, v),
    )


def finetune_config(v, seed, section="finetune"):
    s = section
    _check(v["lambda_semi"] >= 0, f"{s}.lambda_semi", "must be >= 0")
    _check(v["learning_rate"] > 0, f"{s}.learning_rate", "must be > 0")
    _check(v["max_steps"] >= 0, f"{s}.max_steps", "must be >= 0")
    _check(v["labeled_per_step"] >= 1, f"{s}.labeled_per_step", "must be >= 1")
    _check(0 < v["ema_decay"] < 1, f"{s}.ema_decay", "must be in (0, 1)")
    _check(0 < v["fixmatch_tau"] < 1, f"{s}.fixmatch_tau", "must be in (0, 1)")
    _check(v["uamt_passes"] >= 1, f"{s}.uamt_passes", "must be >= 1")
    strategy = Strategy(v["strategy"])
    if strategy.uses_unlabeled:
        _check(v["labeled_per_step"] == v["unlabeled_per_step"], f"{s}.unlabeled_per_step",
               "must equal labeled_per_step for semi-supervised strategies")
    params = {k: v[k] for k in _SP}
    return FinetuneConfig(
        strategy=strategy,
        weights=SemiLossWeights(v["lambda_semi"], params),
        learning_rate=v["learning_rate"],
        momentum=v["momentum"],
        labeled_per_step=v["labeled_per_step"],
        unlabeled_per_step=v["unlabeled_per_step"],
        subvolumes_per_subject=v["subvolumes_per_subject"],
        max_steps=v["max_steps"],
        seed=seed,
        init_checkpoint=v["init_checkpoint"] or None,
        encoder=encoder_config(s, v),
        eval_every=v["eval_every"],
    )


def experiment_spec(v, seed):
    s = "experiment"
    for m in v["methods"]:
        method_by_name(m)
    for lvl in v["sparsity_levels"]:
        _check(0 < lvl <= 1, f"{s}.sparsity_levels", f"{lvl} not in (0, 1]")
    _check(v["folds"] >= 2, f"{s}.folds", "must be >= 2")
    spec = ExperimentSpec(
        protocol=Protocol(v["protocol"]),
        strategies=list(v["strategies"]),
        methods=list(v["methods"]),
        budgets=list(v["budgets"]),
        sparsity_levels=list(v["sparsity_levels"]),
        folds=v["folds"],
        fold_limit=v["fold_limit"] or None,
        seed=seed,
        n_test=v["n_test"],
        pretrain_checkpoint=v["pretrain_checkpoint"] or None,
    )
    return spec.validate()


def phantom_spec(v, seed):
    s = "phantom"
    _check(v["n"] >= 0 and v["n_unlabeled"] >= 0, f"{s}.n", "must be >= 0")
    _check(len(v["extent"]) == 3, f"{s}.extent", "needs three values")
    _check(len(v["n_lesions"]) == 2, f"{s}.n_lesions", "needs (min, max)")
    _check(len(v["lesion_radius"]) == 2, f"{s}.lesion_radius", "needs (min, max)")
    _check(len(v["n_distractors"]) == 2, f"{s}.n_distractors", "needs (min, max)")
    _check(math.isfinite(v["lesion_contrast"]), f"{s}.lesion_contrast", "must be finite")
    return PhantomSpec(
        extent=tuple(v["extent"]),
        n_lesions=tuple(v["n_lesions"]),
        lesion_radius=tuple(v["lesion_radius"]),
        background_texture=v["background_texture"],
        seed=seed,
        n_distractors=tuple(v["n_distractors"]),
        lesion_contrast=v["lesion_contrast"],
        noise_sigma=v["noise_sigma"],
    )
