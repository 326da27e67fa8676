"""Run-configuration resolution: defaults < preset < config file < --set overrides."""

from __future__ import annotations

import copy
import json
from dataclasses import fields
from pathlib import Path

from .errors import ConfigError
from .model import LsmConfig, get_preset
from .spectrogram import PipelineConfig
from .training import TrainPlan

SECTIONS = {"model": LsmConfig, "train": TrainPlan, "pipeline": PipelineConfig}
SCALARS = ("seed", "threads", "preset")
# provenance keys carried by resolved-config snapshots; ignored on load
SNAPSHOT_KEYS = ("command", "argv", "inputs", "outputs")


def defaults() -> dict:
    return {
        "seed": 0,
        "threads": 1,
        "preset": "tiny",
        "model": {},
        "train": TrainPlan().to_dict(),
        "pipeline": PipelineConfig().to_dict(),
    }


def parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def _check_keys(section: str, keys) -> None:
    allowed = {f.name for f in fields(SECTIONS[section])}
    unknown = set(keys) - allowed
    if unknown:
        raise ConfigError(f"unknown {section} keys: {sorted(unknown)}")


def _merge(target: dict, layer: dict, origin: str) -> None:
    for key, value in layer.items():
        if key in SNAPSHOT_KEYS:
            continue
        if key in SECTIONS:
            if not isinstance(value, dict):
                raise ConfigError(f"{origin}: section {key!r} must be an object")
            _check_keys(key, value)
            target[key].update(value)
        elif key in SCALARS:
            target[key] = value
        else:
            raise ConfigError(f"{origin}: unknown key {key!r}")


def parse_overrides(items) -> dict:
    """``["model.d_model=32", "seed=3"]`` -> nested dict."""
    out: dict = {}
    for item in items or ():
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        key, raw = item.split("=", 1)
        parts = key.strip().split(".")
        value = parse_value(raw)
        if len(parts) == 1:
            out[parts[0]] = value
        elif len(parts) == 2:
            out.setdefault(parts[0], {})[parts[1]] = value
        else:
            raise ConfigError(f"override key {key!r} is nested too deeply")
    return out


def resolve(preset: str | None = None, config_file=None, overrides=None) -> dict:
    cfg = defaults()
    file_layer = {}
    if config_file:
        try:
            file_layer = json.loads(Path(config_file).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config file {config_file}: {exc}") from exc
        if not isinstance(file_layer, dict):
            raise ConfigError("config file must hold a JSON object")
    cli_layer = parse_overrides(overrides)

    name = cli_layer.get("preset") or preset or file_layer.get("preset") or cfg["preset"]
    cfg["preset"] = name
    cfg["model"] = get_preset(name).to_dict()
    file_layer = {k: v for k, v in file_layer.items() if k != "preset"}
    cli_layer = {k: v for k, v in cli_layer.items() if k != "preset"}
    _merge(cfg, file_layer, str(config_file))
    _merge(cfg, cli_layer, "--set")

    # one seed drives initialization, batching and dropout
    cfg["train"]["seed"] = cfg["seed"]
    # validate every section by building it
    try:
        cfg["model"] = LsmConfig.from_dict(cfg["model"]).to_dict()
        cfg["train"] = TrainPlan.from_dict(cfg["train"]).to_dict()
        cfg["pipeline"] = PipelineConfig(**cfg["pipeline"]).to_dict()
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc
    for key in ("seed", "threads"):
        if not isinstance(cfg[key], int) or isinstance(cfg[key], bool):
            raise ConfigError(f"{key} must be an integer")
    if cfg["threads"] < 1:
        raise ConfigError("threads must be at least 1")
    return cfg


def model_config(cfg: dict) -> LsmConfig:
    return LsmConfig.from_dict(cfg["model"])


def train_plan(cfg: dict) -> TrainPlan:
    plan = copy.deepcopy(cfg["train"])
    return TrainPlan.from_dict(plan)


def pipeline_config(cfg: dict) -> PipelineConfig:
    return PipelineConfig(**cfg["pipeline"])
