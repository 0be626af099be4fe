"""Config files: flat key = value text with one section per module, layered
over per-family published defaults, with command-line overrides applied after
file parsing. Validation is total before any side effect, and unknown
sections or keys are rejected by name.
"""

from __future__ import annotations

import configparser
import os
from dataclasses import dataclass
from pathlib import Path

from .networks import ArchitectureConfig, InvalidConfigError
from .training import (
    ExperimentConfig,
    FAMILY_LOSSES,
    LossConfig,
    OptimizerConfig,
    family_defaults,
)

OUT_DIR_ENV_VAR = "CONDGAN_OUT_DIR"


def _bool(text: str) -> bool:
    lowered = text.strip().lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _int_list(text: str):
    return tuple(int(part) for part in text.split(",") if part.strip())


# section -> key -> coercion
SCHEMA = {
    "experiment": {
        "family": str,
        "seed": int,
        "out_dir": str,
        "total_steps": int,
        "epochs": int,
        "n_critic": int,
        "batch_size": int,
        "lr_halving_period": int,
        "checkpoint_every": int,
        "log_every": int,
    },
    "data": {
        "manifest": str,
        "train_manifest": str,
        "test_manifest": str,
    },
    "architecture": {
        "base_resolution": int,
        "max_resolution": int,
        "noise_dim": int,
        "compressed_embed_dim": int,
        "embedding_dim": int,
        "channel_schedule": _int_list,
        "noise_hack": _bool,
        "noise_strength": float,
    },
    "loss": {
        "name": str,
        "alpha_match": float,
        "lambda_lp": float,
        "lambda_gp": float,
        "penalty": str,
        "rho_kl": float,
        "kl_direction": str,
        "ls_label_fake": float,
        "ls_label_real": float,
        "ls_label_generator": float,
    },
    "optimizer": {
        "lr_generator": float,
        "lr_critic": float,
        "beta1": float,
        "beta2": float,
    },
    "progressive": {
        "images_per_phase": int,
        "batch_size_high": int,
    },
    "stackgan": {
        "stage1_checkpoint": str,
    },
    "synthetic": {
        "num_classes": int,
        "images_per_class": int,
        "image_size": int,
        "embedding_dim": int,
        "captions_per_image": int,
        "test_num_classes": int,
        "test_images_per_class": int,
    },
    "evaluate": {
        "checkpoint": str,
        "n_samples": int,
        "n_splits": int,
        "classifier_epochs": int,
        "sample_conditioning": _bool,
    },
    "sample": {
        "checkpoint": str,
        "n_images": int,
        "columns": int,
    },
    "interpolate": {
        "checkpoint": str,
        "steps": int,
        "pairs": int,
    },
    "nn": {
        "checkpoint": str,
        "n_samples": int,
    },
}

TOOL_DEFAULTS = {
    "synthetic": {
        "num_classes": 4,
        "images_per_class": 50,
        "image_size": 16,
        "embedding_dim": 32,
        "captions_per_image": 5,
        "test_num_classes": 2,
        "test_images_per_class": 20,
    },
    "evaluate": {
        "checkpoint": None,
        "n_samples": 500,
        "n_splits": 10,
        "classifier_epochs": 15,
        "sample_conditioning": False,
    },
    "sample": {"checkpoint": None, "n_images": 16, "columns": 8},
    "interpolate": {"checkpoint": None, "steps": 8, "pairs": 4},
    "nn": {"checkpoint": None, "n_samples": 8},
}

_PATH_KEYS = {
    ("data", "manifest"),
    ("data", "train_manifest"),
    ("data", "test_manifest"),
    ("stackgan", "stage1_checkpoint"),
    ("evaluate", "checkpoint"),
    ("sample", "checkpoint"),
    ("interpolate", "checkpoint"),
    ("nn", "checkpoint"),
}


@dataclass(frozen=True)
class HarnessConfig:
    """One fully parsed and validated config: the experiment plus the
    per-subcommand tool sections."""

    experiment: ExperimentConfig
    data: dict
    tools: dict
    config_path: Path
    overrides: tuple


def _read_raw(path: Path) -> dict:
    parser = configparser.ConfigParser(interpolation=None)
    try:
        with open(path) as fh:
            parser.read_file(fh)
    except (configparser.Error, OSError) as exc:
        raise InvalidConfigError(f"cannot parse config {path}: {exc}") from exc
    return {section: dict(parser[section]) for section in parser.sections()}


def _apply_overrides(raw: dict, overrides) -> None:
    for item in overrides:
        key, sep, value = item.partition("=")
        if not sep:
            raise InvalidConfigError(f"override {item!r} is not of the form "
                                     "section.key=value")
        section, dot, name = key.strip().partition(".")
        if not dot:
            raise InvalidConfigError(
                f"override key {key!r} must be qualified as section.key"
            )
        raw.setdefault(section, {})[name.strip()] = value.strip()


def _validate_keys(raw: dict) -> None:
    problems = []
    for section, entries in raw.items():
        if section not in SCHEMA:
            problems.append(f"unknown section [{section}]")
            continue
        for key in entries:
            if key not in SCHEMA[section]:
                problems.append(f"unknown key {section}.{key}")
    if problems:
        raise InvalidConfigError("; ".join(sorted(problems)))


def _coerce(raw: dict, base: Path) -> dict:
    values: dict = {}
    problems = []
    for section, entries in raw.items():
        coerced = values.setdefault(section, {})
        for key, text in entries.items():
            try:
                value = SCHEMA[section][key](text)
            except (ValueError, TypeError) as exc:
                problems.append(f"{section}.{key}: {exc}")
                continue
            if (section, key) in _PATH_KEYS:
                value = str((base / value).resolve())
            coerced[key] = value
    if problems:
        raise InvalidConfigError("; ".join(sorted(problems)))
    return values


def load_config(path, overrides=(), seed=None, out_dir=None) -> HarnessConfig:
    """Parse, override, and validate one config file.

    Precedence: family defaults < file values < --set overrides < explicit
    seed/out_dir arguments < the output-directory environment variable.
    Raises InvalidConfigError before any side effect on any problem.
    """
    path = Path(path)
    if not path.is_file():
        raise InvalidConfigError(f"config file not found: {path}")
    raw = _read_raw(path)
    _apply_overrides(raw, overrides)
    _validate_keys(raw)
    values = _coerce(raw, path.parent.resolve())

    experiment = values.get("experiment", {})
    family = experiment.get("family")
    if not family:
        raise InvalidConfigError("experiment.family is required")
    if family not in FAMILY_LOSSES:
        raise InvalidConfigError(f"unknown family {family!r}")

    defaults = family_defaults(family)
    if "total_steps" in experiment:
        defaults.pop("epochs", None)
    if "epochs" in experiment:
        defaults.pop("total_steps", None)

    arch_values = dict(values.get("architecture", {}))
    architecture = ArchitectureConfig(family=family, **arch_values)

    loss_values = dict(values.get("loss", {}))
    base_loss: LossConfig = defaults["loss"]
    if "name" not in loss_values:
        loss_values["name"] = base_loss.name
    loss = LossConfig(
        **{
            f: loss_values.get(f, getattr(base_loss, f))
            for f in LossConfig.__dataclass_fields__
        }
    )

    opt_values = values.get("optimizer", {})
    base_opt: OptimizerConfig = defaults["optimizer"]
    optimizer = OptimizerConfig(
        learning_rate_generator=opt_values.get(
            "lr_generator", base_opt.learning_rate_generator
        ),
        learning_rate_critic=opt_values.get(
            "lr_critic", base_opt.learning_rate_critic
        ),
        beta1=opt_values.get("beta1", base_opt.beta1),
        beta2=opt_values.get("beta2", base_opt.beta2),
    )

    progressive_values = values.get("progressive", {})
    data_values = dict(values.get("data", {}))
    resolved_out = experiment.get("out_dir", "runs/run")
    if out_dir is not None:
        resolved_out = str(out_dir)
    env_out = os.environ.get(OUT_DIR_ENV_VAR)
    if env_out:
        resolved_out = env_out

    exp = ExperimentConfig(
        family=family,
        architecture=architecture,
        loss=loss,
        optimizer=optimizer,
        n_critic=experiment.get("n_critic", defaults.get("n_critic", 1)),
        batch_size=experiment.get("batch_size", defaults.get("batch_size", 64)),
        total_steps=experiment.get("total_steps", defaults.get("total_steps")),
        epochs=experiment.get("epochs", defaults.get("epochs")),
        lr_halving_period=experiment.get("lr_halving_period"),
        seed=seed if seed is not None else experiment.get("seed", 0),
        manifest=data_values.get("manifest", data_values.get("train_manifest")),
        out_dir=resolved_out,
        images_per_phase=progressive_values.get(
            "images_per_phase", defaults.get("images_per_phase", 20_000)
        ),
        progressive_batch_high=progressive_values.get("batch_size_high"),
        stage1_checkpoint=values.get("stackgan", {}).get("stage1_checkpoint"),
        checkpoint_every=experiment.get("checkpoint_every", 500),
        log_every=experiment.get("log_every", 1),
    )

    tools = {}
    for section, section_defaults in TOOL_DEFAULTS.items():
        merged = dict(section_defaults)
        merged.update(values.get(section, {}))
        tools[section] = merged
    if tools["evaluate"]["n_samples"] % tools["evaluate"]["n_splits"] != 0:
        raise InvalidConfigError(
            "evaluate.n_samples must be divisible by evaluate.n_splits"
        )

    return HarnessConfig(
        experiment=exp,
        data=data_values,
        tools=tools,
        config_path=path.resolve(),
        overrides=tuple(overrides),
    )
