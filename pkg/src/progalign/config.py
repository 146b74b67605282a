"""Run configuration: a strict JSON key-value file driving every command.

Unknown keys are rejected so a typo cannot silently fall back to a
default. Every command writes the fully resolved configuration next to
its outputs together with its hash, making runs reproducible from the
output directory alone.
"""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass

__all__ = ["RunConfig", "ConfigError", "load_config", "config_sha256"]


class ConfigError(ValueError):
    pass


_DEFAULTS: dict = {
    "out": "run_output",
    "data": {
        "observations": None,
        "subjects": None,
        "scale": "normalized",
        "markers": None,
        "flip": None,
        "schema": {
            "subject_id": "subject_id",
            "marker_id": "marker_id",
            "t": "t",
            "value": "value",
            "is_first_visit": "is_first_visit",
            "diagnosis_status": "diagnosis_status",
            "t_event": "t_event",
            "weight": "weight",
            "covariates": None,
            "center": {},
        },
    },
    "model": {
        "mode": "anchored",
        "eps_lower": 1.5,
        "eps_upper": 1.5,
        "random_slope": [],
        "first_visit_effect": [],
        "fixed_effect_sd": 10.0,
        "scale_prior_scale": 2.5,
        "onset_mean_prior_mean": 10.0,
        "onset_mean_prior_sd": 10.0,
    },
    "sampler": {
        "chains": 4,
        "warmup": 6000,
        "sampling": 2000,
        "thin": 4,
        "seed": 0,
        "target_acceptance": 0.8,
        "max_tree_depth": 10,
        "jobs": None,
    },
    "diagnostics": {
        "rhat_max": 1.05,
        "ess_ratio_min": 0.1,
    },
    "simulate": {
        "scenario": "default",
        "n_subjects": None,
        "seed": 0,
        "diag_noise": None,
        "eps_lower": None,
        "eps_upper": None,
    },
    "predict": {
        "grid": {"start": -30.0, "stop": 5.0, "step": 0.25},
        "profiles": {"reference": None},
        "mc_draws": 1000,
        "threshold": 0.5,
        "draw_stride": 1,
        "seed": 0,
    },
}

_MODES = {"anchored", "non-anchored"}
_SCALES = {"normalized", "raw"}
_SCENARIOS = {"default", "ordering"}

# sections whose values are free-form mappings, not fixed key sets
_OPEN_MAPPINGS = {
    ("data", "schema", "center"),
    ("predict", "profiles"),
}


def _check_keys(given: dict, defaults: dict, path: tuple[str, ...]) -> None:
    for key, value in given.items():
        if key not in defaults:
            where = ".".join(path) or "top level"
            raise ConfigError(f"unknown configuration key {key!r} at {where}")
        sub_default = defaults[key]
        if isinstance(value, dict) and isinstance(sub_default, dict):
            if path + (key,) in _OPEN_MAPPINGS:
                continue
            _check_keys(value, sub_default, path + (key,))


def _merge(defaults: dict, given: dict) -> dict:
    out = copy.deepcopy(defaults)
    for key, value in given.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


@dataclass
class RunConfig:
    resolved: dict

    @property
    def out(self) -> str:
        return self.resolved["out"]

    @property
    def data(self) -> dict:
        return self.resolved["data"]

    @property
    def model(self) -> dict:
        return self.resolved["model"]

    @property
    def sampler(self) -> dict:
        return self.resolved["sampler"]

    @property
    def diagnostics(self) -> dict:
        return self.resolved["diagnostics"]

    @property
    def simulate(self) -> dict:
        return self.resolved["simulate"]

    @property
    def predict(self) -> dict:
        return self.resolved["predict"]

    def validate(self) -> None:
        if self.model["mode"] not in _MODES:
            raise ConfigError(f"model.mode must be one of {sorted(_MODES)}")
        if self.data["scale"] not in _SCALES:
            raise ConfigError(f"data.scale must be one of {sorted(_SCALES)}")
        if self.simulate["scenario"] not in _SCENARIOS:
            raise ConfigError(f"simulate.scenario must be one of {sorted(_SCENARIOS)}")
        s = self.sampler
        if s["sampling"] % s["thin"] != 0:
            raise ConfigError("sampler.sampling must be divisible by sampler.thin")
        if self.model["eps_lower"] <= 0 or self.model["eps_upper"] <= 0:
            raise ConfigError("model.eps_lower/eps_upper must be positive")
        g = self.predict["grid"]
        if g["step"] <= 0 or g["stop"] <= g["start"]:
            raise ConfigError("predict.grid must be increasing with positive step")
        if not 0 < self.predict["threshold"] < 1:
            raise ConfigError("predict.threshold must be inside (0, 1)")

    def apply_overrides(self, seed=None, mode=None, eps=None, out=None) -> None:
        if seed is not None:
            self.resolved["sampler"]["seed"] = int(seed)
            self.resolved["simulate"]["seed"] = int(seed)
            self.resolved["predict"]["seed"] = int(seed)
        if mode is not None:
            self.resolved["model"]["mode"] = mode
        if eps is not None:
            self.resolved["model"]["eps_lower"] = float(eps)
            self.resolved["model"]["eps_upper"] = float(eps)
        if out is not None:
            self.resolved["out"] = str(out)
        self.validate()

    def dump(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.resolved, fh, indent=2, sort_keys=True)
            fh.write("\n")

    def sha256(self) -> str:
        return config_sha256(self.resolved)


def config_sha256(resolved: dict) -> str:
    canon = json.dumps(resolved, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode()).hexdigest()


def load_config(path) -> RunConfig:
    with open(path, encoding="utf-8") as fh:
        try:
            given = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(given, dict):
        raise ConfigError(f"{path}: configuration must be a JSON object")
    _check_keys(given, _DEFAULTS, ())
    cfg = RunConfig(resolved=_merge(_DEFAULTS, given))
    cfg.validate()
    return cfg


def default_config() -> RunConfig:
    return RunConfig(resolved=copy.deepcopy(_DEFAULTS))
