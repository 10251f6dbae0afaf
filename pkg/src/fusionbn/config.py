"""Plain-text configuration with sections, documented defaults, and
strict key checking (unknown keys are an error, not a silent typo).

Files use INI syntax:

    [train]
    epochs = 15
    lr = 0.01

Command-line flags override file values; the parsed result normalizes
back to an equivalent document via `render`.
"""

from __future__ import annotations

import configparser
from pathlib import Path

from .errors import ConfigFileError

# section -> key -> (type tag, default, help)
SCHEMA: dict[str, dict[str, tuple]] = {
    "dataset": {
        "out": ("str", "data", "dataset root directory"),
        "centers": ("int", 5, "number of synthetic centers"),
        "samples": ("int", 2000, "training samples per center"),
        "test_samples": ("int", 500, "test samples per center"),
        "patch_size": ("int", 32, "square patch edge in pixels (>= 16)"),
        "task": ("str", "classification", "classification | dense-prediction"),
        "shift_profile": ("floats", (0.0, 0.5, 1.0, 1.5, 2.0), "per-center shift magnitudes"),
        "seed": ("int", 7, "content seed shared by all centers"),
    },
    "model": {
        "channels": ("ints", (16, 32, 64), "conv block widths"),
        "classes": ("int", 2, "class count (classification)"),
    },
    "train": {
        "preset": ("str", "desk", "recipe preset: desk | paper"),
        "epochs": ("int?", None, "training epochs (empty = preset value)"),
        "lr": ("float?", None, "initial learning rate (empty = preset value)"),
        "batch_size": ("int?", None, "training batch size (empty = preset value)"),
        "momentum": ("float?", None, "SGD momentum (empty = preset value)"),
        "weight_decay": ("float?", None, "decoupled weight decay (empty = preset value)"),
        "decay_factor": ("float?", None, "step LR decay factor (empty = preset value)"),
        "decay_epoch": ("int?", None, "epoch at which LR decays (empty = preset value)"),
        "augment": ("str?", None, "none | rotation | trtaug (empty = preset value)"),
    },
    "adapt": {
        "policy": ("str", "fused", "source-running | per-batch | target-running | fused | source-prior"),
        "beta": ("float", 0.9, "fusion weighting factor in [0, 1]"),
        "steps": ("int", 20, "accumulation steps (step 1)"),
        "batch_size": ("int", 32, "adaptation batch size (>= 2)"),
        "n_prior": ("int", 20, "source pseudo-count for source-prior"),
        "stratified": ("bool", True, "stratify batches by class when labels exist"),
    },
    "experiment": {
        "source": ("str", "C0", "source center id"),
        "targets": ("str", "", "comma-separated targets; empty = all others"),
        "repetitions": ("int", 3, "training seeds per experiment"),
        "beta_grid": ("floats", (0.6, 0.7, 0.8, 0.9), "fused betas in the roster"),
        "sweep_steps": ("ints", (1, 5, 10, 20), "step counts for the sweep"),
        "sweep_batches": ("ints", (8, 16, 32), "batch sizes for the sweep"),
    },
}


def _parse_value(tag: str, raw, where: str):
    if not isinstance(raw, str):
        return raw
    raw = raw.strip()
    if tag.endswith("?"):
        if raw == "":
            return None
        tag = tag[:-1]
    try:
        if tag == "int":
            return int(raw)
        if tag == "float":
            return float(raw)
        if tag == "bool":
            if raw.lower() in ("true", "1", "yes", "on"):
                return True
            if raw.lower() in ("false", "0", "no", "off"):
                return False
            raise ValueError(raw)
        if tag == "ints":
            return tuple(int(v) for v in raw.split(",") if v.strip())
        if tag == "floats":
            return tuple(float(v) for v in raw.split(",") if v.strip())
        return raw
    except ValueError:
        raise ConfigFileError(f"{where}: cannot parse {raw!r} as {tag}") from None


def defaults() -> dict[str, dict]:
    return {
        section: {key: spec[1] for key, spec in keys.items()}
        for section, keys in SCHEMA.items()
    }


def load_config(path=None) -> dict[str, dict]:
    """Defaults, overlaid with the file at `path` when given."""
    cfg = defaults()
    if path is None:
        return cfg
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"config file not found: {path}")
    parser = configparser.ConfigParser()
    try:
        parser.read_string(path.read_text("utf-8"), source=str(path))
    except configparser.Error as e:
        raise ConfigFileError(f"{path}: {e}") from None
    for section in parser.sections():
        if section not in SCHEMA:
            raise ConfigFileError(f"{path}: unknown section [{section}]")
        for key, raw in parser.items(section):
            if key not in SCHEMA[section]:
                raise ConfigFileError(f"{path}: unknown key {section}.{key}")
            tag = SCHEMA[section][key][0]
            cfg[section][key] = _parse_value(tag, raw, f"{path} [{section}] {key}")
    return cfg


def apply_override(cfg: dict, dotted: str, raw: str) -> None:
    """Apply one `section.key=value` command-line override."""
    if "." not in dotted:
        raise ConfigFileError(f"override {dotted!r} must look like section.key")
    section, key = dotted.split(".", 1)
    if section not in SCHEMA or key not in SCHEMA[section]:
        raise ConfigFileError(f"unknown config key {section}.{key}")
    cfg[section][key] = _parse_value(SCHEMA[section][key][0], raw, dotted)


def render(cfg: dict) -> str:
    """Canonical text form; parsing it back reproduces `cfg` exactly."""
    lines = []
    for section in SCHEMA:
        lines.append(f"[{section}]")
        for key in SCHEMA[section]:
            value = cfg[section][key]
            if value is None:
                value = ""
            elif isinstance(value, tuple):
                value = ",".join(f"{v:g}" if isinstance(v, float) else str(v) for v in value)
            elif isinstance(value, bool):
                value = "true" if value else "false"
            elif isinstance(value, float):
                value = f"{value:g}"
            lines.append(f"{key} = {value}")
        lines.append("")
    return "\n".join(lines)
