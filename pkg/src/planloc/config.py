"""Experiment configuration (TOML) and the built-in benchmark presets.

Example::

    [experiment]
    name = "office"
    protocol = "train-real"      # train-real | zero-shot | fine-tune
    seed = 7

    [[plans]]
    scenario = "office"          # or raster/meta/aps/waypoints for a custom plan
    laps = 5

    [stages]
    gnn = true
    fpdnn = true
    kf = true

Sections ``gnn``, ``fpdnn``, ``generator``, ``localizer`` and ``sim``
override the corresponding dataclass fields.
"""

from __future__ import annotations

import sys
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

PROTOCOLS = ("train-real", "zero-shot", "fine-tune")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class PlanSpec:
    """A floor plan with its APs, device routes and simulated propagation."""

    scenario: str | None = None
    raster: str | None = None
    meta: str | None = None
    aps: str | None = None
    waypoints: tuple | None = None
    laps: int = 5
    n_md: int = 1
    speed_mps: float = 0.5
    jitter_m: float = 0.3
    max_ap_links: tuple = ()     # ((md, k), ...)
    sim: tuple = ()              # ((field, value), ...) propagation overrides

    def __post_init__(self):
        if self.scenario is None and not (self.raster and self.meta and self.aps and self.waypoints):
            raise ConfigError("a plan needs either a scenario name or raster, meta, aps and waypoints")
        if self.laps < 1 or self.n_md < 1:
            raise ConfigError("laps and n_md must be positive")

    @property
    def label(self):
        return self.scenario or Path(self.meta).stem


@dataclass(frozen=True)
class Stages:
    gnn: bool = True
    fpdnn: bool = True
    kf: bool = True
    bayes_grid: bool = False


@dataclass(frozen=True)
class ExperimentConfig:
    name: str = "experiment"
    protocol: str = "train-real"
    seed: int = 0
    pixels_per_meter: float = 8.0
    plans: tuple = ()
    source: PlanSpec | None = None
    target: PlanSpec | None = None
    stages: Stages = field(default_factory=Stages)
    test_laps: int = 1
    train_stride: int = 2
    calibrate: bool = True
    sequential_baseline: bool = False
    max_fpdnn_pairs: int = 6000
    max_generator_samples: int = 6000
    fine_tune_fraction: float = 0.2
    grid_pitch_m: float = 0.5
    sigma_aug_rtt_m: float = 0.3
    sigma_aug_rss_db: float = 2.0
    gnn: tuple = ()
    fpdnn: tuple = ()
    generator: tuple = ()
    fine_tune: tuple = ()
    localizer: tuple = ()

    def __post_init__(self):
        if self.protocol not in PROTOCOLS:
            raise ConfigError(f"protocol must be one of {PROTOCOLS}, got {self.protocol!r}")
        if not 0 < self.fine_tune_fraction < 1:
            raise ConfigError("fine_tune_fraction must be in (0, 1)")
        if self.protocol == "train-real" and not self.plans:
            raise ConfigError("train-real needs at least one [[plans]] entry")
        if self.protocol != "train-real" and (self.source is None or self.target is None):
            raise ConfigError(f"{self.protocol} needs [source] and [target] plans")

    def overrides(self, section):
        return dict(getattr(self, section))

    def to_dict(self):
        return _plain(asdict(self))


def _plain(x):
    if isinstance(x, dict):
        return {k: _plain(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_plain(v) for v in x]
    return x


def _freeze(x):
    if isinstance(x, dict):
        return tuple((k, _freeze(v)) for k, v in sorted(x.items()))
    if isinstance(x, list):
        return tuple(_freeze(v) for v in x)
    return x


def _plan(d, base):
    d = dict(d)
    known = {f.name for f in fields(PlanSpec)}
    bad = set(d) - known
    if bad:
        raise ConfigError(f"unknown plan keys {sorted(bad)}")
    for k in ("raster", "meta", "aps"):
        if d.get(k):
            p = Path(d[k])
            d[k] = str(p if p.is_absolute() else base / p)
            if not Path(d[k]).exists():
                raise ConfigError(f"referenced file does not exist: {d[k]}")
    if "waypoints" in d:
        d["waypoints"] = tuple(tuple(map(float, p)) for p in d["waypoints"])
    if "max_ap_links" in d:
        d["max_ap_links"] = tuple((int(k), int(v)) for k, v in sorted(d["max_ap_links"].items()))
    if "sim" in d:
        d["sim"] = _freeze(d["sim"])
    return PlanSpec(**d)


def config_from_dict(data, base_dir="."):
    base = Path(base_dir)
    data = dict(data)
    exp = dict(data.pop("experiment", {}))
    kw = {}
    for k, v in exp.items():
        if k not in {f.name for f in fields(ExperimentConfig)}:
            raise ConfigError(f"unknown [experiment] key {k!r}")
        kw[k] = v
    if "plans" in data:
        kw["plans"] = tuple(_plan(p, base) for p in data.pop("plans"))
    for k in ("source", "target"):
        if k in data:
            kw[k] = _plan(data.pop(k), base)
    if "stages" in data:
        kw["stages"] = Stages(**data.pop("stages"))
    for k in ("gnn", "fpdnn", "generator", "fine_tune", "localizer"):
        if k in data:
            kw[k] = _freeze(data.pop(k))
    if data:
        raise ConfigError(f"unknown config sections {sorted(data)}")
    try:
        return ExperimentConfig(**kw)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path):
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"config file not found: {p}")
    with open(p, "rb") as fh:
        data = tomllib.load(fh)
    return config_from_dict(data, base_dir=p.parent)


def with_seed(cfg, seed):
    return replace(cfg, seed=int(seed))


# ---------------------------------------------------------------------------
# presets used by the acceptance benchmarks and the demo scripts

BENCHMARK_TRAINING = dict(gnn=(("epochs", 30), ("learning_rate", 2e-3)), fpdnn=(("epochs", 25),),
                          max_fpdnn_pairs=12000)


def office_lab_benchmark(seed=0, **kw):
    """Train and test on simulated real data in the office and laboratory plans."""
    plans = (PlanSpec(scenario="office", laps=5), PlanSpec(scenario="lab", laps=5))
    kw = {**BENCHMARK_TRAINING, **kw}
    return ExperimentConfig(name="office-lab", protocol="train-real", seed=seed, plans=plans, **kw)


# plan B's "real" radio differs modestly from plan A's
TARGET_SIM = (("path_loss_exponent", 2.3), ("rtt_wall_bias_m", 1.8), ("wall_rss_loss_db", 7.0))


# fine-tuning continues from the synthetic-data models: a few epochs at a small rate
TRANSFER_TRAINING = dict(BENCHMARK_TRAINING, generator=(("epochs", 20),),
                         fine_tune=(("fpdnn_epochs", 2), ("fpdnn_learning_rate", 5e-5),
                                    ("gnn_epochs", 3), ("gnn_learning_rate", 1e-4)))


def zero_shot_benchmark(seed=0, protocol="fine-tune", **kw):
    """Generator learned on the office plan; models for the lab learned from synthetic data only."""
    kw = {**TRANSFER_TRAINING, **kw}
    return ExperimentConfig(name="zero-shot-lab", protocol=protocol, seed=seed, calibrate=False,
                            source=PlanSpec(scenario="office", laps=5),
                            target=PlanSpec(scenario="lab", laps=5, sim=TARGET_SIM), **kw)


def multi_user_benchmark(seed=0, **kw):
    """Two devices in the mall hallway; MD 2 hears only its two strongest APs plus MD 1."""
    plan = PlanSpec(scenario="mall", laps=5, n_md=2, max_ap_links=((2, 2),))
    return ExperimentConfig(name="multi-user-mall", protocol="train-real", seed=seed, plans=(plan,),
                            sequential_baseline=True, **kw)


def _plan_echo(d):
    if d is None:
        return None
    d = dict(d)
    if d.get("waypoints") is not None:
        d["waypoints"] = tuple(tuple(p) for p in d["waypoints"])
    d["max_ap_links"] = tuple(tuple(p) for p in d.get("max_ap_links", ()))
    d["sim"] = tuple(tuple(p) for p in d.get("sim", ()))
    return PlanSpec(**d)


def config_from_echo(d):
    """Rebuild an :class:`ExperimentConfig` from :meth:`ExperimentConfig.to_dict` output."""
    d = dict(d)
    d["plans"] = tuple(_plan_echo(p) for p in d.get("plans", ()))
    d["source"] = _plan_echo(d.get("source"))
    d["target"] = _plan_echo(d.get("target"))
    d["stages"] = Stages(**d.get("stages", {}))
    for k in ("gnn", "fpdnn", "generator", "fine_tune", "localizer"):
        d[k] = tuple((a, b) for a, b in d.get(k, ()))
    return ExperimentConfig(**d)
