"""Flat dotted-key configuration for experiment runs.

Config files are plain text: one `section.key = value` per line, `#` starts a
comment.  Values stay strings until a typed getter asks for them; lists are
comma separated.  Precedence is CLI flags > config file > built-in defaults
(the getters' default arguments).
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

EXPERIMENT_KINDS = (
    "easy_hard", "gini_curve", "class_matrix", "capacity_sweep",
    "ttc_sweep", "csr_curve", "noise_level_grid", "reg_sweep", "dump_filters",
)


class ConfigError(ValueError):
    pass


def parse_config_text(text: str) -> dict:
    values = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = line.split("=", 1)
        values[key.strip()] = value.strip()
    return values


def load_config_file(path) -> dict:
    with open(path) as fh:
        return parse_config_text(fh.read())


_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


@dataclass
class ExperimentConfig:
    """Resolved settings for one run: experiment kind, output dir, seed, and
    the flat key-value map the runners read their knobs from."""

    kind: str
    out_dir: str
    seed: int = 0
    workers: int = 1
    plots: bool = True
    values: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in EXPERIMENT_KINDS:
            raise ConfigError(f"unknown experiment kind {self.kind!r}")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")

    # -- typed getters ------------------------------------------------------
    def get(self, key, default=None):
        return self.values.get(key, default)

    def get_str(self, key, default=None):
        v = self.values.get(key)
        return default if v is None else v

    def get_int(self, key, default=None):
        v = self.values.get(key)
        return default if v is None else int(v)

    def get_float(self, key, default=None):
        v = self.values.get(key)
        return default if v is None else float(v)

    def get_bool(self, key, default=None):
        v = self.values.get(key)
        if v is None:
            return default
        low = v.lower()
        if low in _TRUE:
            return True
        if low in _FALSE:
            return False
        raise ConfigError(f"{key}: cannot read {v!r} as a boolean")

    def _get_list(self, key, default, cast):
        v = self.values.get(key)
        if v is None:
            return default
        items = [part.strip() for part in v.split(",") if part.strip()]
        return [cast(part) for part in items]

    def get_int_list(self, key, default=None):
        return self._get_list(key, default, int)

    def get_float_list(self, key, default=None):
        return self._get_list(key, default, float)

    def get_str_list(self, key, default=None):
        return self._get_list(key, default, str)

    def echo(self) -> dict:
        """Everything that determines the run, for the manifest."""
        return {
            "experiment": self.kind, "out_dir": self.out_dir, "seed": self.seed,
            "workers": self.workers, "plots": self.plots,
            "values": dict(sorted(self.values.items())),
        }


def build_config(kind, out_dir, seed=0, workers=1, plots=True,
                 config_path=None, overrides=None) -> ExperimentConfig:
    """File values overlaid with CLI overrides (flags win)."""
    values = {}
    if config_path:
        values.update(load_config_file(config_path))
    if overrides:
        values.update(overrides)
    if "seed" in values:
        seed = int(values.pop("seed"))
    if "workers" in values:
        workers = int(values.pop("workers"))
    if "plots" in values:
        plots = values.pop("plots").lower() in _TRUE
    os.makedirs(out_dir, exist_ok=True)
    return ExperimentConfig(kind=kind, out_dir=out_dir, seed=seed,
                            workers=workers, plots=plots, values=values)
