"""Experiment configuration: typed dataclasses with a flat INI on disk.

The on-disk form is a diff-friendly ``[section]`` / ``key = value`` file.
Every field is explicit after preset expansion, and a sha256 over the
canonical key=value lines (excluding the output directory, which does not
change the experiment) identifies the run in metrics and checkpoints.
"""

from __future__ import annotations

import configparser
import dataclasses
import hashlib
import io
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Union, get_args, get_origin


class ConfigError(ValueError):
    """Unknown key, bad value, or malformed config file."""


@dataclass
class TaskConfig:
    kind: str = "adding"  # adding | copy_memory | mnist | pmnist | charlm | pianoroll
    t_len: int = 200
    n_train: int = 20000
    n_test: int = 2000
    data_seed: int = 0  # offset folded into the master seed fan-out
    images_path: str = ""
    labels_path: str = ""
    test_images_path: str = ""
    test_labels_path: str = ""
    permute_seed: int = -1  # >= 0 enables pixel permutation (pmnist)
    corpus_path: str = ""
    unroll: int = 128
    data_path: str = ""  # piano-roll text file


@dataclass
class ModelConfig:
    kind: str = "tcn"  # tcn | lstm | gru | rnn
    kernel_size: int = 3
    levels: int = 3
    hidden: int = 16
    dropout: float = 0.0
    use_residual: bool = True
    use_gating: bool = False
    dilation_base: int = 2
    num_layers: int = 1
    forget_gate_bias: float = 1.0
    embed_dim: int = -1  # -1: defaults to hidden width for token tasks
    onehot_input: bool = False  # token tasks: one-hot channels instead of embedding


@dataclass
class OptimConfig:
    kind: str = "adam"  # adam | sgd | rmsprop
    lr: float = 0.002
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    momentum: float = 0.0
    alpha: float = 0.99
    grad_clip: float = -1.0  # <= 0 disables clipping
    plateau_patience: int = -1  # <= 0 disables plateau annealing
    plateau_factor: float = 0.5
    plateau_threshold: float = 1e-4


@dataclass
class ScheduleConfig:
    batch_size: int = 32
    steps: int = 1000
    eval_every: int = 200
    eval_batch_size: int = 256


@dataclass
class ExperimentConfig:
    name: str = "experiment"
    seed: int = 0
    out_dir: str = "runs/experiment"
    task: TaskConfig = field(default_factory=TaskConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)


_SECTIONS = ("task", "model", "optim", "schedule")
_TOP_KEYS = ("name", "seed", "out_dir")


def _parse_value(raw: str, ftype) -> object:
    origin = get_origin(ftype)
    if origin is Union:  # Optional[...]
        args = [a for a in get_args(ftype) if a is not type(None)]
        ftype = args[0]
    try:
        if ftype is bool:
            low = raw.strip().lower()
            if low in ("true", "1", "yes"):
                return True
            if low in ("false", "0", "no"):
                return False
            raise ValueError(raw)
        if ftype is int:
            return int(raw)
        if ftype is float:
            return float(raw)
        return raw
    except ValueError as exc:
        raise ConfigError(f"cannot parse {raw!r} as {ftype.__name__}") from exc


def _format_value(value: object) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _section_obj(cfg: ExperimentConfig, section: str):
    return getattr(cfg, section)


def apply_override(cfg: ExperimentConfig, dotted_key: str, raw_value: str) -> None:
    """Set ``section.key=value`` (or a top-level ``key=value``) in place."""
    if "." in dotted_key:
        section, key = dotted_key.split(".", 1)
        if section not in _SECTIONS:
            raise ConfigError(f"unknown config section {section!r}")
        obj = _section_obj(cfg, section)
    else:
        key, obj = dotted_key, cfg
        if key not in _TOP_KEYS:
            raise ConfigError(f"unknown config key {dotted_key!r}")
    if key not in {f.name for f in dataclasses.fields(obj)}:
        raise ConfigError(f"unknown config key {dotted_key!r}")
    setattr(obj, key, _parse_value(raw_value, _resolve_type(obj, key)))


def _resolve_type(obj, key):
    import typing

    hints = typing.get_type_hints(type(obj))
    return hints[key]


def to_ini(cfg: ExperimentConfig) -> str:
    lines = ["[experiment]"]
    for key in _TOP_KEYS:
        lines.append(f"{key} = {_format_value(getattr(cfg, key))}")
    for section in _SECTIONS:
        obj = _section_obj(cfg, section)
        lines.append("")
        lines.append(f"[{section}]")
        for f in dataclasses.fields(obj):
            lines.append(f"{f.name} = {_format_value(getattr(obj, f.name))}")
    return "\n".join(lines) + "\n"


def from_ini(text: str) -> ExperimentConfig:
    parser = configparser.ConfigParser(interpolation=None)
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from exc
    cfg = ExperimentConfig()
    for section in parser.sections():
        if section == "experiment":
            for key, raw in parser.items(section):
                if key not in _TOP_KEYS:
                    raise ConfigError(f"unknown config key {key!r}")
                setattr(cfg, key, _parse_value(raw, _resolve_type(cfg, key)))
            continue
        if section not in _SECTIONS:
            raise ConfigError(f"unknown config section {section!r}")
        obj = _section_obj(cfg, section)
        names = {f.name for f in dataclasses.fields(obj)}
        for key, raw in parser.items(section):
            if key not in names:
                raise ConfigError(f"unknown config key {section}.{key!r}")
            setattr(obj, key, _parse_value(raw, _resolve_type(obj, key)))
    return cfg


def load_config(path) -> ExperimentConfig:
    return from_ini(Path(path).read_text())


def save_config(cfg: ExperimentConfig, path) -> None:
    Path(path).write_text(to_ini(cfg))


def config_hash(cfg: ExperimentConfig) -> str:
    """sha256 over canonical key=value lines; out_dir is excluded so the
    same experiment hashes the same wherever its outputs land."""
    buf = io.StringIO()
    for key in _TOP_KEYS:
        if key == "out_dir":
            continue
        buf.write(f"{key}={_format_value(getattr(cfg, key))}\n")
    for section in _SECTIONS:
        obj = _section_obj(cfg, section)
        for f in dataclasses.fields(obj):
            buf.write(f"{section}.{f.name}={_format_value(getattr(obj, f.name))}\n")
    return hashlib.sha256(buf.getvalue().encode()).hexdigest()
