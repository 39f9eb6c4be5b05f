"""Experiment configuration: a YAML document with five sections.

Schema (every key optional; missing keys take the defaults below)::

    array:   {M: 256, lambda: 0.01}
    dataset: {L: 6, L0: 1, r_min: 10.0, r_max: 80.0, snr_db: [-5, 20],
              test_snr_db: null, n_train: 45000, n_val: 5000, n_test: 2000, seed: 0}
    model:   {F: 64, I: 4, d: 64, n_layers: 4, n_tuned: 2, causal: true,
              backbone_heads: 2, spatial_head_dim: null, post_filters: 64}
    train:   {batch_size: 64, epochs: 200, lr0: 0.001, decay_factor: 0.1,
              decay_every: 50, betas: [0.9, 0.999], eps_adam: 1.0e-8, seed: 0,
              dtype: float64}
    eval:    {snr_grid_db: [-5, 0, 5, 10, 15, 20], sweep_L: [3, 6], test_mode: pure,
              paths_snr_db: 15, L0_grid: null, samples_per_point: 2000,
              estimators: [ls, lmmse, hyomp, llm4xce], hyomp_n_dist: 8,
              lmmse_samples: null, seed: null}

``snr_db`` is a ``[low, high]`` range sampled uniformly in dB or a single
number. ``test_snr_db`` overrides it for the test split. ``L0_grid: null``
means ``0..L``. ``lmmse_samples: null`` uses ``n_train`` channels for the
LMMSE covariance. ``eval.seed: null`` places evaluation seeds after the
last test-set seed.
"""

from __future__ import annotations

import copy
import hashlib
import json
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

from xlce.channel import ArrayConfig, DatasetSpec
from xlce.model import ModelConfig
from xlce.training import TrainConfig

ESTIMATORS = ("ls", "lmmse", "hyomp", "llm4xce")

DEFAULTS: dict[str, dict[str, Any]] = {
    "array": {"M": 256, "lambda": 0.01},
    "dataset": {
        "L": 6,
        "L0": 1,
        "r_min": 10.0,
        "r_max": 80.0,
        "snr_db": [-5.0, 20.0],
        "test_snr_db": None,
        "n_train": 45000,
        "n_val": 5000,
        "n_test": 2000,
        "seed": 0,
    },
    "model": {
        "F": 64,
        "I": 4,
        "d": 64,
        "n_layers": 4,
        "n_tuned": 2,
        "causal": True,
        "backbone_heads": 2,
        "spatial_head_dim": None,
        "post_filters": 64,
    },
    "train": {
        "batch_size": 64,
        "epochs": 200,
        "lr0": 1e-3,
        "decay_factor": 0.1,
        "decay_every": 50,
        "betas": [0.9, 0.999],
        "eps_adam": 1e-8,
        "seed": 0,
        "dtype": "float64",
    },
    "eval": {
        "snr_grid_db": [-5.0, 0.0, 5.0, 10.0, 15.0, 20.0],
        "sweep_L": [3, 6],
        "test_mode": "pure",
        "paths_snr_db": 15.0,
        "L0_grid": None,
        "samples_per_point": 2000,
        "estimators": list(ESTIMATORS),
        "hyomp_n_dist": 8,
        "lmmse_samples": None,
        "seed": None,
    },
}

PRESETS: dict[str, dict] = {
    # GPT-2 small backbone at full array size
    "full": {
        "model": {"F": 64, "I": 4, "d": 768, "n_layers": 12, "n_tuned": 2, "backbone_heads": 12},
    },
    "toy": {
        "array": {"M": 64},
        "dataset": {"n_train": 4096, "n_val": 512, "n_test": 512, "test_snr_db": 10.0},
        "model": {"F": 16, "I": 2, "d": 32, "n_layers": 4, "n_tuned": 2},
        "train": {"epochs": 40, "decay_every": 10, "dtype": "float32"},
        "eval": {"samples_per_point": 1000, "L0_grid": [0, 1, 3, 6]},
    },
}


class ConfigError(ValueError):
    """Invalid experiment configuration; ``line`` is 1-based when known."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line else message)


def _key_lines(text: str) -> dict[tuple[str, ...], int]:
    """Map (section,) and (section, key) to their 1-based source lines."""
    root = yaml.compose(text, Loader=yaml.SafeLoader)
    lines: dict[tuple[str, ...], int] = {}
    if isinstance(root, yaml.MappingNode):
        for knode, vnode in root.value:
            lines[(knode.value,)] = knode.start_mark.line + 1
            if isinstance(vnode, yaml.MappingNode):
                for k2, _ in vnode.value:
                    lines[(knode.value, k2.value)] = k2.start_mark.line + 1
    return lines


def _merge(base: dict, override: dict, lines: dict, source: str) -> dict:
    out = copy.deepcopy(base)
    if not isinstance(override, dict):
        raise ConfigError(f"{source}: top level must be a mapping")
    for section, values in override.items():
        line = lines.get((section,))
        if section not in DEFAULTS:
            raise ConfigError(
                f"unknown section {section!r}; valid sections: {', '.join(DEFAULTS)}", line
            )
        if values is None:
            continue
        if not isinstance(values, dict):
            raise ConfigError(f"section {section!r} must be a mapping", line)
        for key, value in values.items():
            if key not in DEFAULTS[section]:
                raise ConfigError(
                    f"unknown key {key!r} in section {section!r}", lines.get((section, key))
                )
            out[section][key] = value
    return out


@dataclass(frozen=True)
class ExperimentConfig:
    """Fully resolved configuration plus the typed objects built from it."""

    raw: dict
    lines: dict = field(default_factory=dict, compare=False, repr=False)

    @classmethod
    def from_dict(cls, d: dict | None = None, lines: dict | None = None) -> "ExperimentConfig":
        lines = lines or {}
        cfg = cls(_merge(DEFAULTS, d or {}, lines, "config"), lines)
        cfg.validate()
        return cfg

    @classmethod
    def from_yaml(cls, text: str) -> "ExperimentConfig":
        try:
            data = yaml.safe_load(text)
            lines = _key_lines(text) if data else {}
        except yaml.YAMLError as exc:
            mark = getattr(exc, "problem_mark", None)
            raise ConfigError(f"malformed YAML: {exc}", mark.line + 1 if mark else None) from exc
        return cls.from_dict(data or {}, lines)

    @classmethod
    def load(cls, source: str | Path) -> "ExperimentConfig":
        """Read a YAML file, or ``preset:<name>`` for a built-in preset."""
        source = str(source)
        if source.startswith("preset:"):
            name = source.split(":", 1)[1]
            if name not in PRESETS:
                raise ConfigError(f"unknown preset {name!r}; valid: {', '.join(PRESETS)}")
            return cls.from_dict(PRESETS[name])
        return cls.from_yaml(Path(source).read_text(encoding="utf-8"))

    def with_seed(self, seed: int) -> "ExperimentConfig":
        d = copy.deepcopy(self.raw)
        d["dataset"]["seed"] = seed
        d["train"]["seed"] = seed
        return ExperimentConfig.from_dict(d)

    # typed views

    @property
    def array(self) -> ArrayConfig:
        return ArrayConfig(int(self.raw["array"]["M"]), float(self.raw["array"]["lambda"]))

    def _snr(self, value):
        return tuple(float(v) for v in value) if isinstance(value, (list, tuple)) else float(value)

    def split_spec(self, split: str) -> DatasetSpec:
        """Dataset recipe for ``train``, ``val`` or ``test``; seed ranges never overlap."""
        ds = self.raw["dataset"]
        sizes = {"train": ds["n_train"], "val": ds["n_val"], "test": ds["n_test"]}
        if split not in sizes:
            raise ValueError(f"unknown split {split!r}")
        offset = {"train": 0, "val": ds["n_train"], "test": ds["n_train"] + ds["n_val"]}[split]
        snr = ds["snr_db"]
        if split == "test" and ds["test_snr_db"] is not None:
            snr = ds["test_snr_db"]
        return DatasetSpec(
            array=self.array,
            L=int(ds["L"]),
            L0=int(ds["L0"]),
            r_range=(float(ds["r_min"]), float(ds["r_max"])),
            snr_db=self._snr(snr),
            n_samples=int(sizes[split]),
            base_seed=int(ds["seed"]) + offset,
        )

    @property
    def model(self) -> ModelConfig:
        return ModelConfig(M=int(self.raw["array"]["M"]), **self.raw["model"])

    @property
    def train(self) -> TrainConfig:
        t = dict(self.raw["train"])
        t["betas"] = tuple(t["betas"])
        return TrainConfig(**t)

    @property
    def eval(self) -> dict:
        return self.raw["eval"]

    @property
    def eval_seed(self) -> int:
        ev, ds = self.raw["eval"], self.raw["dataset"]
        if ev["seed"] is not None:
            return int(ev["seed"])
        return int(ds["seed"]) + ds["n_train"] + ds["n_val"] + ds["n_test"]

    @property
    def L0_grid(self) -> list[int]:
        grid = self.raw["eval"]["L0_grid"]
        L = int(self.raw["dataset"]["L"])
        return list(range(L + 1)) if grid is None else [int(v) for v in grid]

    def _line_for(self, section: str, message: str) -> int | None:
        """Source line of the key of ``section`` named earliest in ``message``."""
        best = None
        for key in DEFAULTS[section]:
            m = re.search(rf"\b{re.escape(key)}\b", message)
            if (section, key) in self.lines and m and (best is None or m.start() < best[0]):
                best = (m.start(), self.lines[(section, key)])
        return best[1] if best else self.lines.get((section,))

    def _check(self, section: str, fn):
        try:
            fn()
        except ConfigError as exc:
            if exc.line is not None:
                raise
            raise ConfigError(f"{section}: {exc}", self._line_for(section, str(exc))) from exc
        except (ValueError, TypeError, KeyError) as exc:
            raise ConfigError(f"{section}: {exc}", self._line_for(section, str(exc))) from exc

    def validate(self):
        def dataset():
            for split in ("train", "val", "test"):
                n = self.raw["dataset"][f"n_{split}"]
                if not isinstance(n, int) or n < 1:
                    raise ValueError(f"n_{split} must be a positive integer, got {n!r}")
            self.split_spec("train")
            self.split_spec("test")

        self._check("array", lambda: self.array)
        self._check("dataset", dataset)
        self._check("model", lambda: self.model)
        self._check("train", lambda: self.train)
        self._check("eval", self._validate_eval)

    def _validate_eval(self):
        ev = self.raw["eval"]
        if ev["test_mode"] not in ("pure", "hybrid"):
            raise ValueError(f"test_mode must be 'pure' or 'hybrid', got {ev['test_mode']!r}")
        unknown = [e for e in ev["estimators"] if e not in ESTIMATORS]
        if unknown or not ev["estimators"]:
            raise ValueError(f"estimators must be a non-empty subset of {list(ESTIMATORS)}")
        L = int(self.raw["dataset"]["L"])
        if any(not 0 <= v <= L for v in self.L0_grid):
            raise ValueError(f"L0_grid values must lie in [0, L={L}]")
        if any(int(v) < 1 for v in ev["sweep_L"]):
            raise ValueError("sweep_L values must be >= 1")
        if int(ev["samples_per_point"]) < 1 or int(ev["hyomp_n_dist"]) < 1:
            raise ValueError("samples_per_point and hyomp_n_dist must be >= 1")
        if ev["lmmse_samples"] is not None and int(ev["lmmse_samples"]) < 2:
            raise ValueError("lmmse_samples must be >= 2")
        [float(v) for v in ev["snr_grid_db"]]
        float(ev["paths_snr_db"])

    # provenance

    def canonical_json(self) -> str:
        return json.dumps(self.raw, sort_keys=True, separators=(",", ":"))

    @property
    def hash(self) -> str:
        return hashlib.sha256(self.canonical_json().encode("utf-8")).hexdigest()[:16]

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.raw, sort_keys=False)
