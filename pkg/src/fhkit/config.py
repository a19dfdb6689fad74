"""Run configuration: defaults, file overrides and typed views."""

from __future__ import annotations

import copy
import json
import math
import os

from .ce import CEHyper
from .decode import DecisionRuleConfig
from .errors import DataError
from .fullsum import FullSumConfig, ScaleSchedule
from .model import CENTER_EMBED_DIM, LEFT_EMBED_DIM, EncoderConfig

DEFAULT_CONFIG = {
    "seed": 0,
    "model": {
        "context_window": 2,
        "hidden": [256, 256],
        "nonlinearity": "relu",
        "dropout": 0.1,
        "left_embed_dim": LEFT_EMBED_DIM,
        "center_embed_dim": CENTER_EMBED_DIM,
    },
    "ce": {
        "lr": 1e-3,
        "newbob_decay": 0.9,
        "lr_min": 2e-5,
        "l2": 0.01,
        "grad_noise": 0.1,
        "focal": 2.0,
        "chunk": 128,
        "overlap": 0.5,
        "batch_size": 8,
        "epochs": 5,
        "heldout_fraction": 0.05,
        "optimizer": "nadam",
    },
    "fs": {
        "lr": 5e-4,
        "newbob_decay": math.sqrt(0.8),
        "lr_min": 1e-6,
        "l2": 0.01,
        "grad_noise": 0.3,
        "batch_size": 8,
        "epochs": 30,
        "prior_decay": 0.001,
        "am_scale_start": 0.01,
        "prior_scale_start": 0.1,
        "am_scale_max": 0.3,
        "prior_scale_max": {"left": 0.3, "center": 0.7, "right": 0.4},
        "ramp_epochs": 10,
        "context_window": 0,
        "optimizer": "nadam",
    },
    "decode": {
        "prior_left": 0.3,
        "prior_center": 0.7,
        "prior_right": 0.4,
        "lm_scale": 1.0,
        "beam": None,
        "prior_subset_fraction": 0.1,
    },
}


def _merge(base: dict, override: dict, path="") -> dict:
    out = copy.deepcopy(base)
    for k, v in override.items():
        if k not in base:
            raise DataError(f"unknown config key {path}{k}")
        if isinstance(base[k], dict) and isinstance(v, dict):
            out[k] = _merge(base[k], v, f"{path}{k}.")
        else:
            out[k] = v
    return out


def load_config(path=None, overrides: dict | None = None) -> dict:
    cfg = copy.deepcopy(DEFAULT_CONFIG)
    if path:
        try:
            with open(path) as f:
                cfg = _merge(cfg, json.load(f))
        except json.JSONDecodeError as e:
            raise DataError(f"{path}: invalid JSON: {e}") from None
    if overrides:
        cfg = _merge(cfg, overrides)
    env_seed = os.environ.get("FHKIT_SEED")
    if env_seed is not None:
        try:
            cfg["seed"] = int(env_seed)
        except ValueError:
            raise DataError("FHKIT_SEED must be an integer") from None
    return cfg


def dump_config(cfg: dict) -> str:
    return json.dumps(cfg, indent=2, sort_keys=True) + "\n"


def encoder_config(cfg: dict, input_dim: int, flat_start=False) -> EncoderConfig:
    """Encoder shape; the flat-start model uses its own (narrower) input window."""
    m = cfg["model"]
    if m["left_embed_dim"] != LEFT_EMBED_DIM or m["center_embed_dim"] != CENTER_EMBED_DIM:
        raise DataError("embedding dimensions are fixed at 10 (left) and 30 (center state)")
    window = cfg["fs"]["context_window"] if flat_start else m["context_window"]
    return EncoderConfig(input_dim, window, tuple(m["hidden"]), m["nonlinearity"], m["dropout"])


def fullsum_config(cfg: dict) -> FullSumConfig:
    fs = cfg["fs"]
    if fs["optimizer"] != "nadam":
        raise DataError("only the nadam optimizer is available")
    pmax = fs["prior_scale_max"]
    schedule = ScaleSchedule(fs["am_scale_start"], fs["prior_scale_start"], fs["am_scale_max"],
                             pmax["left"], pmax["center"], pmax["right"], fs["ramp_epochs"])
    return FullSumConfig(fs["epochs"], fs["lr"], fs["newbob_decay"], fs["lr_min"], fs["l2"],
                         fs["grad_noise"], fs["batch_size"], fs["prior_decay"], schedule, cfg["seed"])


def ce_hyper(cfg: dict) -> CEHyper:
    ce = cfg["ce"]
    if ce["optimizer"] != "nadam":
        raise DataError("only the nadam optimizer is available")
    return CEHyper(ce["chunk"], ce["overlap"], ce["lr"], ce["newbob_decay"], ce["lr_min"], ce["l2"],
                   ce["grad_noise"], ce["focal"], ce["batch_size"], ce["epochs"], ce["heldout_fraction"])


def decision_config(cfg: dict, order: str) -> DecisionRuleConfig:
    d = cfg["decode"]
    return DecisionRuleConfig(order, d["prior_left"], d["prior_center"], d["prior_right"], d["lm_scale"])
