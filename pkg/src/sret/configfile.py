"""Plain-text configuration files.

Line-based ``section.key = value`` pairs with ``#`` comments. The value
grammar is schema-driven per key (scalar, comma list, or bracketed nested
list for the group schedule), parsing is strict -- an unknown or duplicated
key is an error, never a silent default -- and ``emit`` is canonical, so
parse(emit(parse(text))) is a fixed point.
"""
from __future__ import annotations

import hashlib
from typing import Optional

from .model import GroupSchedule, ModelConfig
from .tensor import ConfigError
from .train import TrainSettings

# key -> (kind, ModelConfig field)
_MODEL_KEYS = {
    "model.variant": ("str", "variant"),
    "model.stage_dims": ("int_list", "stage_dims"),
    "model.stage_blocks": ("int_list", "stage_blocks"),
    "model.heads": ("int_list", "heads_per_stage"),
    "model.recursions": ("int", "recursions_per_block"),
    "model.groups": ("nested_int_list", None),
    "model.permutation_mode": ("str", None),
    "model.ffn_ratio": ("float", "ffn_ratio"),
    "model.nll_ratio": ("float", "nll_ratio"),
    "model.nll_placement": ("str", "nll_placement"),
    "model.stem_channels": ("int_list", "stem_channels"),
    "model.classes": ("int", "num_classes"),
    "model.resolution": ("int", "input_resolution"),
    "model.patch_size": ("int", "patch_size"),
    "model.lrc": ("bool", "use_lrc"),
    "model.drop_path": ("float", "drop_path_rate"),
    "model.mixer_token_hidden": ("int", "mixer_token_hidden"),
    "model.mixer_channel_hidden": ("int", "mixer_channel_hidden"),
}

_TRAIN_KEYS = {
    "train.epochs": ("int", "epochs"),
    "train.batch_size": ("int", "batch_size"),
    "train.lr": ("float", "lr"),
    "train.weight_decay": ("float", "weight_decay"),
    "train.warmup_epochs": ("int", "warmup_epochs"),
    "train.label_smoothing": ("float", "label_smoothing"),
    "train.loss_mode": ("str", "loss_mode"),
    "train.seed": ("int", "seed"),
}

_REQUIRED = (
    "model.variant",
    "model.stage_dims",
    "model.stage_blocks",
    "model.heads",
    "model.recursions",
    "model.groups",
)


def _parse_nested_int_list(text: str, key: str) -> list[list[int]]:
    stack: list[list] = []
    top: Optional[list] = None
    num = ""

    def flush(target):
        nonlocal num
        if num:
            target.append(int(num))
            num = ""

    for ch in text:
        if ch == "[":
            stack.append([])
        elif ch == "]":
            if not stack:
                raise ConfigError(f"{key}: unbalanced brackets in {text!r}")
            done = stack.pop()
            flush(done)
            if stack:
                stack[-1].append(done)
            elif top is None:
                top = done
            else:
                raise ConfigError(f"{key}: expected one outer list in {text!r}")
        elif ch in "-0123456789":
            num += ch
        elif ch in ", \t":
            if num and stack:
                flush(stack[-1])
            elif num:
                raise ConfigError(f"{key}: digits outside brackets in {text!r}")
        else:
            raise ConfigError(f"{key}: unexpected character {ch!r} in {text!r}")
    if stack or top is None:
        raise ConfigError(f"{key}: unbalanced brackets in {text!r}")
    if not all(isinstance(e, list) and all(isinstance(v, int) for v in e) for e in top):
        raise ConfigError(f"{key}: expected a list of int lists, got {text!r}")
    return top


def _parse_value(kind: str, raw: str, key: str):
    raw = raw.strip()
    try:
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        if kind == "bool":
            if raw in ("true", "false"):
                return raw == "true"
            raise ValueError(raw)
        if kind == "str":
            return raw
        if kind == "int_list":
            if not raw:
                return []
            return [int(v) for v in raw.split(",")]
        if kind == "nested_int_list":
            return _parse_nested_int_list(raw, key)
    except ValueError as exc:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {kind}") from exc
    raise ConfigError(f"unknown value kind {kind}")


def parse_config(text: str) -> tuple[ModelConfig, TrainSettings]:
    seen: dict[str, object] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, raw = (part.strip() for part in line.split("=", 1))
        if key in _MODEL_KEYS:
            kind = _MODEL_KEYS[key][0]
        elif key in _TRAIN_KEYS:
            kind = _TRAIN_KEYS[key][0]
        else:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        if key in seen:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        seen[key] = _parse_value(kind, raw, key)

    missing = [k for k in _REQUIRED if k not in seen]
    if missing:
        raise ConfigError(f"missing required keys: {', '.join(missing)}")

    schedule = GroupSchedule(
        stages=seen.pop("model.groups"),
        permutation_mode=seen.pop("model.permutation_mode", "P+I-L"),
    )
    model_kwargs = {"group_schedule": schedule}
    for key, (kind, attr) in _MODEL_KEYS.items():
        if attr is not None and key in seen:
            model_kwargs[attr] = seen.pop(key)
    config = ModelConfig(**model_kwargs)
    config.validate()

    train_kwargs = {}
    for key, (kind, attr) in _TRAIN_KEYS.items():
        if key in seen:
            train_kwargs[attr] = seen.pop(key)
    return config, TrainSettings(**train_kwargs)


def emit_config(config: ModelConfig, train: Optional[TrainSettings] = None) -> str:
    def fmt(value) -> str:
        if isinstance(value, bool):
            return "true" if value else "false"
        if isinstance(value, list):
            if value and isinstance(value[0], list):
                inner = ", ".join("[" + ", ".join(str(v) for v in row) + "]" for row in value)
                return "[" + inner + "]"
            return ", ".join(str(v) for v in value)
        if isinstance(value, float):
            return repr(value)
        return str(value)

    lines = []
    for key, (kind, attr) in _MODEL_KEYS.items():
        if key == "model.groups":
            lines.append(f"{key} = {fmt([list(s) for s in config.group_schedule.stages])}")
        elif key == "model.permutation_mode":
            lines.append(f"{key} = {config.group_schedule.permutation_mode}")
        else:
            lines.append(f"{key} = {fmt(getattr(config, attr))}")
    if train is not None:
        for key, (kind, attr) in _TRAIN_KEYS.items():
            lines.append(f"{key} = {fmt(getattr(train, attr))}")
    return "\n".join(lines) + "\n"


def config_digest(config: ModelConfig) -> str:
    return hashlib.sha256(emit_config(config).encode()).hexdigest()
