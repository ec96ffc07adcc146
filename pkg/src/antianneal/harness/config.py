"""Experiment configuration files.

A config is an INI file with ``[dataset]``, ``[algorithm]`` and ``[run]``
sections::

    [dataset]
    generator = unbalanced2     # fixture name or path to a model JSON
    n = 10000                   # or: sizes = 20000, 20
    seed = 0
    # file = data.txt           # use a dataset file instead of a generator
    # truth = model.json        # ground truth for a file dataset

    [algorithm]
    name = anneal               # em | anneal | ecg | bfgs | dpmm
    k = 2
    tol = 1e-6
    schedule = 0.8, 1.0, 1.2, 1.0

    [run]
    replications = 10
    master_seed = 0
    output = runs/unbalanced

Together with the master seed the file fully determines an experiment.
"""

from __future__ import annotations

import configparser
import json
from dataclasses import asdict, dataclass, field
from importlib import resources
from pathlib import Path
from typing import Optional

from ..anneal import AnnealSchedule, PerturbPolicy, hybrid_schedule
from ..mixture import MixtureModel

ALGORITHMS = ("em", "anneal", "ecg", "bfgs", "dpmm")

# tolerances used for the comparisons in the anti-annealing experiments
DEFAULT_TOL = {"em": 1e-10, "ecg": 1e-10, "bfgs": 1e-10, "anneal": 1e-6, "dpmm": 1e-6}


class ConfigError(ValueError):
    pass


def fixture_names() -> list[str]:
    root = resources.files("antianneal.harness") / "fixtures"
    return sorted(p.name[:-5] for p in root.iterdir() if p.name.endswith(".json"))


def load_model_spec(spec: str) -> tuple[MixtureModel, Optional[list]]:
    """Resolve a fixture name or JSON path to ``(model, sizes or None)``."""
    path = Path(spec)
    if path.suffix == ".json" and path.exists():
        raw = json.loads(path.read_text())
    else:
        res = resources.files("antianneal.harness") / "fixtures" / f"{spec}.json"
        if not res.is_file():
            raise ConfigError(f"unknown model {spec!r}; fixtures: {', '.join(fixture_names())}")
        raw = json.loads(res.read_text())
    return MixtureModel.from_dict(raw), raw.get("sizes")


def _floats(text: str) -> list[float]:
    return [float(t) for t in text.replace(",", " ").split()]


@dataclass
class DatasetSpec:
    generator: Optional[str] = None
    n: Optional[int] = None
    sizes: Optional[list] = None
    seed: int = 0
    file: Optional[str] = None
    truth: Optional[str] = None


@dataclass
class AlgorithmSpec:
    name: str = "em"
    k: int = 2
    tol: Optional[float] = None
    max_iters: int = 1000
    schedule: Optional[list] = None
    beta_min: Optional[float] = None
    beta_max: Optional[float] = None
    steps_up: int = 2
    steps_down: int = 1
    inner_max_iters: int = 1000
    perturb_epsilon: float = 0.05
    perturb_when: str = "after-each-beta-change"
    warm_start_iters: int = 5
    reg: Optional[float] = None
    truncation: int = 10
    concentration: float = 1.0
    mass_threshold: float = 1e-3
    resp_tol: float = 1e-4

    @property
    def tolerance(self) -> float:
        return DEFAULT_TOL[self.name] if self.tol is None else self.tol

    def anneal_schedule(self) -> AnnealSchedule:
        kw = dict(inner_tol=self.tolerance, inner_max_iters=self.inner_max_iters)
        if self.schedule:
            return AnnealSchedule(tuple(self.schedule), **kw)
        if self.beta_min is not None:
            return hybrid_schedule(self.beta_min, self.beta_max if self.beta_max is not None else 1.0,
                                   self.steps_up, self.steps_down, **kw)
        if self.name == "dpmm":
            return AnnealSchedule((1.0,), **kw)
        return hybrid_schedule(0.8, 1.2, 2, 1, **kw)

    def perturb_policy(self) -> PerturbPolicy:
        return PerturbPolicy(self.perturb_epsilon, self.perturb_when)


@dataclass
class ExperimentConfig:
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    algorithm: AlgorithmSpec = field(default_factory=AlgorithmSpec)
    replications: int = 1
    master_seed: int = 0
    output: str = "runs"
    record_timing: bool = False

    def validate(self) -> "ExperimentConfig":
        a, d = self.algorithm, self.dataset
        if a.name not in ALGORITHMS:
            raise ConfigError(f"algorithm must be one of {ALGORITHMS}; got {a.name!r}")
        if not a.tolerance > 0:
            raise ConfigError("tol must be positive")
        if self.replications < 1:
            raise ConfigError("replications must be >= 1")
        if (d.file is None) == (d.generator is None):
            raise ConfigError("dataset needs exactly one of 'generator' or 'file'")
        if a.name in ("anneal", "dpmm"):
            a.anneal_schedule()
            a.perturb_policy()
        return self

    def to_dict(self) -> dict:
        return asdict(self)


_TYPES = {
    "dataset": DatasetSpec,
    "algorithm": AlgorithmSpec,
}


def _coerce(cls, key, value):
    ann = cls.__dataclass_fields__[key].type
    if value == "":
        return None
    if "list" in ann:
        return _floats(value)
    if "bool" in ann:
        return value.lower() in ("1", "true", "yes", "on")
    if "int" in ann:
        return int(value)
    if "float" in ann:
        return float(value)
    return value


def parse_config(text: str) -> ExperimentConfig:
    cp = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    cp.read_string(text)
    cfg = ExperimentConfig()
    for section, cls in _TYPES.items():
        if not cp.has_section(section):
            continue
        target = getattr(cfg, section)
        for key, value in cp.items(section):
            if key not in cls.__dataclass_fields__:
                raise ConfigError(f"unknown key [{section}] {key}")
            setattr(target, key, _coerce(cls, key, value.strip()))
    if cp.has_section("run"):
        run = cp["run"]
        cfg.replications = run.getint("replications", cfg.replications)
        cfg.master_seed = run.getint("master_seed", cfg.master_seed)
        cfg.output = run.get("output", cfg.output)
        cfg.record_timing = run.getboolean("record_timing", cfg.record_timing)
        extra = set(run) - {"replications", "master_seed", "output", "record_timing"}
        if extra:
            raise ConfigError(f"unknown key(s) in [run]: {sorted(extra)}")
    if cfg.dataset.sizes is not None:
        cfg.dataset.sizes = [int(s) for s in cfg.dataset.sizes]
    return cfg.validate()


def load_config(path) -> ExperimentConfig:
    return parse_config(Path(path).read_text())
