"""Experiment configuration: presets per benchmark, key=value files with includes, overrides."""
from __future__ import annotations

import ast
import hashlib
import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from .grad import ConfigurationError
from .particle import PFTrainConfig
from .ssm import AdvDiffSpec, BurgersSpec, LorenzSpec, SVSpec
from .trainer import ArchConfig, TrainConfig


@dataclass
class DataConfig:
    n_train: int = 500
    n_test: int = 20
    T: int = 100
    T_test: int | None = None


@dataclass
class InferConfig:
    n_sample: int = 1000
    mode: str = "filter"
    method: str = "fluid"
    n_traj: int | None = None
    kl_samples: int = 10_000


@dataclass
class PFConfig:
    n_particles: int = 1000
    resampler: str = "multinomial"
    ess_samples: int = 100_000


@dataclass
class ExperimentConfig:
    benchmark: str = "case1"
    scale: str = "desk"
    seed: int = 0
    deterministic: bool = True
    spec: dict = field(default_factory=dict)
    data: DataConfig = field(default_factory=DataConfig)
    arch: ArchConfig = field(default_factory=ArchConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    infer: InferConfig = field(default_factory=InferConfig)
    pf: PFConfig = field(default_factory=PFConfig)
    pf_train: PFTrainConfig = field(default_factory=PFTrainConfig)

    def to_dict(self):
        return asdict(self)

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, default=str).encode()
        return hashlib.sha256(blob).hexdigest()


_SECTIONS = {"data": DataConfig, "arch": ArchConfig, "train": TrainConfig, "infer": InferConfig, "pf": PFConfig,
             "pf_train": PFTrainConfig}

DESK_ARCH = dict(hidden_dim=64, layers=1, num_coupling=6, mlp_depth=3, mlp_width=64, rff_features=32, sb_width=64)

BENCHMARKS = {
    "case1": lambda: AdvDiffSpec.case1(),
    "case2": lambda: AdvDiffSpec.case2(),
    "sv": lambda: SVSpec(),
    "burgers": lambda: BurgersSpec(),
    "lorenz": lambda: LorenzSpec.single_scale(),
    "lorenz2": lambda: LorenzSpec.two_scale_default(),
}

# (spec overrides, data sizes) per benchmark and scale
PRESETS = {
    ("case1", "paper"): ({}, DataConfig(2000, 200, 500)),
    ("case1", "desk"): ({}, DataConfig(500, 20, 100)),
    ("case2", "paper"): ({}, DataConfig(2000, 200, 500)),
    ("case2", "desk"): ({"n": 16, "sigma": 0.05 / 16}, DataConfig(500, 20, 100)),
    ("sv", "paper"): ({}, DataConfig(2000, 200, 1000)),
    ("sv", "desk"): ({}, DataConfig(500, 20, 200)),
    ("burgers", "paper"): ({}, DataConfig(3000, 200, 200)),
    ("burgers", "desk"): ({}, DataConfig(300, 20, 50)),
    ("lorenz", "paper"): ({}, DataConfig(2000, 200, 500)),
    ("lorenz", "desk"): ({}, DataConfig(500, 20, 100)),
    ("lorenz2", "paper"): ({}, DataConfig(2000, 200, 500)),
    ("lorenz2", "desk"): ({"K": 8}, DataConfig(300, 20, 100)),
}


def preset(benchmark: str, scale: str = "desk") -> ExperimentConfig:
    if (benchmark, scale) not in PRESETS:
        raise ConfigurationError(f"no preset for benchmark={benchmark!r} scale={scale!r}; "
                                 f"benchmarks: {sorted(BENCHMARKS)}, scales: desk, paper")
    spec, data = PRESETS[(benchmark, scale)]
    cfg = ExperimentConfig(benchmark=benchmark, scale=scale, spec=dict(spec), data=replace(data))
    if scale == "desk":
        cfg.arch = ArchConfig(**DESK_ARCH)
        cfg.train = TrainConfig(epochs=50, batch_size=16, lr=2e-3, lr_schedule="cosine", deterministic=True)
        cfg.infer = InferConfig(n_sample=200)
        cfg.pf_train = PFTrainConfig(epochs=20)
    else:
        cfg.train = TrainConfig(deterministic=True)
    return cfg


def make_spec(cfg: ExperimentConfig):
    base = BENCHMARKS[cfg.benchmark]()
    known = {f.name for f in fields(base)}
    bad = set(cfg.spec) - known
    if bad:
        raise ConfigurationError(f"unknown {cfg.benchmark} spec keys: {sorted(bad)}")
    vals = {k: tuple(v) if isinstance(v, list) else v for k, v in cfg.spec.items()}
    return replace(base, **vals)


# ---------------------------------------------------------------- text format
def parse_value(text: str):
    text = text.strip()
    low = text.lower()
    if low in ("true", "yes", "on"):
        return True
    if low in ("false", "no", "off"):
        return False
    if low in ("none", "null"):
        return None
    try:
        return ast.literal_eval(text)
    except (ValueError, SyntaxError):
        return text


def read_entries(path, _seen=None) -> list:
    """(key, value) pairs from a key=value file; ``include = other.cfg`` is expanded in place."""
    path = Path(path).resolve()
    seen = set(_seen or ())
    if path in seen:
        raise ConfigurationError(f"include cycle at {path}")
    seen.add(path)
    out = []
    for lineno, raw in enumerate(path.read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigurationError(f"{path}:{lineno}: expected key = value")
        key, val = (s.strip() for s in line.split("=", 1))
        if key == "include":
            out.extend(read_entries(path.parent / val, seen))
        else:
            out.append((key, parse_value(val)))
    return out


def parse_override(text: str):
    if "=" not in text:
        raise ConfigurationError(f"override {text!r} is not key=value")
    key, val = text.split("=", 1)
    return key.strip(), parse_value(val)


def _set(cfg: ExperimentConfig, key: str, value):
    head, _, rest = key.partition(".")
    if head == "spec":
        if not rest:
            raise ConfigurationError("spec overrides need a field name, e.g. spec.n")
        cfg.spec[rest] = value
        return
    if head in _SECTIONS:
        section = getattr(cfg, head)
        names = {f.name for f in fields(section)}
        if rest not in names:
            raise ConfigurationError(f"unknown key {key!r}; {head} has {sorted(names)}")
        setattr(cfg, head, replace(section, **{rest: value}))
        return
    if key in ("benchmark", "scale", "seed", "deterministic") and not rest:
        setattr(cfg, key, value)
        return
    raise ConfigurationError(f"unknown config key {key!r}")


def build_config(entries=(), overrides=()) -> ExperimentConfig:
    """Preset chosen by benchmark/scale, then file entries, then command-line overrides."""
    pairs = list(entries) + [parse_override(o) if isinstance(o, str) else o for o in overrides]
    top = {k: v for k, v in pairs if k in ("benchmark", "scale")}
    cfg = preset(top.get("benchmark", "case1"), top.get("scale", "desk"))
    for k, v in pairs:
        if k not in ("benchmark", "scale"):
            _set(cfg, k, v)
    # seed and determinism flow into the training configs
    cfg.train = replace(cfg.train, seed=cfg.seed, deterministic=cfg.deterministic)
    cfg.pf_train = replace(cfg.pf_train, seed=cfg.seed)
    make_spec(cfg)
    return cfg


def load_config(path=None, overrides=()) -> ExperimentConfig:
    return build_config(read_entries(path) if path else (), overrides)


def config_from_dict(d: dict) -> ExperimentConfig:
    d = dict(d)
    kw = {k: _SECTIONS[k](**d.pop(k)) for k in list(d) if k in _SECTIONS}
    return ExperimentConfig(**d, **kw)


def dump_config(cfg: ExperimentConfig) -> str:
    """Flat key = value text that ``load_config`` reads back to the same config."""
    lines = [f"benchmark = {cfg.benchmark}", f"scale = {cfg.scale}", f"seed = {cfg.seed}",
             f"deterministic = {cfg.deterministic}"]
    lines += [f"spec.{k} = {v!r}" for k, v in sorted(cfg.spec.items())]
    for name in _SECTIONS:
        for k, v in asdict(getattr(cfg, name)).items():
            lines.append(f"{name}.{k} = {v!r}")
    return "\n".join(lines) + "\n"
