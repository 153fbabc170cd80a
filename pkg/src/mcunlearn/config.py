"""Run configuration: a flat ``section.key = value`` text format.

Grammar, one entry per line::

    line    := blank | comment | entry
    comment := '#' any*
    entry   := key ws* '=' ws* value
    key     := 'seed' | section '.' name

Values are ints, floats, strings, comma-separated int lists, or ``none`` for
optional fields. Unknown keys and duplicate keys are rejected. ``emit``
writes every key in schema order, and ``parse(emit(c)) == c``.
"""
from __future__ import annotations

import dataclasses
import math
import typing
from dataclasses import dataclass, field, fields
from typing import Optional, Tuple

from .influence import InfluenceConfig
from .samplers import SQRT2, SamplerConfig, StepSchedule


class ConfigError(ValueError):
    pass


NOISE_COEFFS = {"standard": SQRT2, "literal": 2.0}


@dataclass(frozen=True)
class ModelSection:
    kind: str = "gmm"
    dim: int = 2
    components: int = 4
    prior_std: float = 1.0
    lik_std: float = 1.0
    hidden: Tuple[int, ...] = (32,)
    classes: int = 4


@dataclass(frozen=True)
class DataSection:
    n: int = 2000
    cluster_std: float = 1.0
    separation: float = 2.0
    test_fraction: float = 0.25


@dataclass(frozen=True)
class SamplerSection:
    kind: str = "sgld"
    a: float = 4.0
    b: float = 0.0
    r: float = 0.5005
    # "auto" divides by the training-set size
    rate_divisor: str = "auto"
    batch_size: int = 64
    total_iters: int = 4000
    warmup_iters: int = 0
    warmup_rate: float = 0.0
    momentum_alpha: float = 0.9
    noise: str = "standard"
    thinning: int = 10
    keep_last: int = 100


@dataclass(frozen=True)
class UnlearnSection:
    strategy: str = "influence"
    batch_size: int = 4
    remove_labels: Tuple[int, ...] = (0, 1)
    remove_per_label: int = 400
    shuffle_seed: Optional[int] = None
    lissa_depth: int = 32
    lissa_scale: float = 1.0
    mc_draws: int = 5
    hessian_batch: Optional[int] = None
    extra_iters: int = 1000


@dataclass(frozen=True)
class EvalSection:
    k: int = 1
    pairs: int = 1
    bench_requests: int = 5


@dataclass(frozen=True)
class PathsSection:
    workdir: str = "run"


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    model: ModelSection = field(default_factory=ModelSection)
    data: DataSection = field(default_factory=DataSection)
    sampler: SamplerSection = field(default_factory=SamplerSection)
    unlearn: UnlearnSection = field(default_factory=UnlearnSection)
    eval: EvalSection = field(default_factory=EvalSection)
    paths: PathsSection = field(default_factory=PathsSection)

    def validate(self) -> "RunConfig":
        m, s, u = self.model, self.sampler, self.unlearn
        checks = [
            (m.kind in ("gaussian", "gmm", "mlp"), f"model.kind {m.kind!r}"),
            (s.kind in ("sgld", "sghmc"), f"sampler.kind {s.kind!r}"),
            (s.noise in NOISE_COEFFS, f"sampler.noise {s.noise!r}"),
            (u.strategy in ("influence", "importance", "retrain"), f"unlearn.strategy {u.strategy!r}"),
            (m.dim >= 1 and m.components >= 1 and m.classes >= 2, "model sizes"),
            (m.prior_std > 0 and m.lik_std > 0, "model std must be > 0"),
            (self.data.n >= 1, "data.n"),
            (0 < self.data.test_fraction < 1, "data.test_fraction"),
            (self.eval.pairs >= 1 and self.eval.k >= 1, "eval.pairs / eval.k"),
            (u.batch_size >= 1 and u.remove_per_label >= 0, "unlearn sizes"),
            (0 <= self.seed < 2**64, "seed must be a u64"),
        ]
        for ok, what in checks:
            if not ok:
                raise ConfigError(f"invalid config: {what}")
        if s.rate_divisor != "auto":
            _rate_divisor_value(s.rate_divisor)
        try:
            self.sampler_config(1000)
            self.influence_config()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        return self

    def sampler_config(self, n_train: int) -> SamplerConfig:
        s = self.sampler
        divisor = float(n_train) if s.rate_divisor == "auto" else _rate_divisor_value(s.rate_divisor)
        return SamplerConfig(
            kind=s.kind, schedule=StepSchedule(s.a, s.b, s.r), rate_divisor=divisor,
            batch_size=s.batch_size, total_iters=s.total_iters, warmup_iters=s.warmup_iters,
            warmup_rate=s.warmup_rate, momentum_alpha=s.momentum_alpha,
            noise_coeff=NOISE_COEFFS[s.noise], thinning=s.thinning, keep_last=s.keep_last,
        )

    def influence_config(self) -> InfluenceConfig:
        u = self.unlearn
        return InfluenceConfig(u.lissa_depth, u.lissa_scale, u.mc_draws, u.hessian_batch)


def _rate_divisor_value(raw):
    try:
        value = float(raw)
    except ValueError:
        raise ConfigError(f"sampler.rate_divisor must be 'auto' or a number, got {raw!r}") from None
    if not value > 0:
        raise ConfigError("sampler.rate_divisor must be > 0")
    return value


_SECTIONS = [f.name for f in fields(RunConfig) if f.name != "seed"]


def _section_types(section_cls):
    hints = typing.get_type_hints(section_cls)
    return {f.name: hints[f.name] for f in fields(section_cls)}


def _convert(raw: str, tp, key):
    try:
        if tp is int:
            return int(raw, 0)
        if tp is float:
            value = float(raw)
            if not math.isfinite(value):
                raise ValueError
            return value
        if tp is str:
            if not raw:
                raise ValueError
            return raw
        if tp == Tuple[int, ...]:
            return tuple(int(p) for p in raw.split(",") if p.strip()) if raw else ()
        if tp == Optional[int]:
            return None if raw == "none" else int(raw, 0)
    except ValueError:
        raise ConfigError(f"bad value for {key}: {raw!r}") from None
    raise TypeError(f"unsupported config type {tp}")


def _format(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def parse(text: str, base: Optional[RunConfig] = None) -> RunConfig:
    """Parse config text over ``base`` (defaults when omitted) and validate."""
    base = base or RunConfig()
    sections = {name: {} for name in _SECTIONS}
    seed = base.seed
    seen = set()
    for lineno, line in enumerate(text.splitlines(), 1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        key, sep, raw = stripped.partition("=")
        key, raw = key.strip(), raw.strip()
        if not sep or not key:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        if key in seen:
            raise ConfigError(f"line {lineno}: duplicate key {key}")
        seen.add(key)
        if key == "seed":
            seed = _convert(raw, int, key)
            continue
        section, dot, name = key.partition(".")
        if not dot or section not in sections:
            raise ConfigError(f"line {lineno}: unknown key {key}")
        types = _section_types(type(getattr(base, section)))
        if name not in types:
            raise ConfigError(f"line {lineno}: unknown key {key}")
        sections[section][name] = _convert(raw, types[name], key)
    updated = {
        name: dataclasses.replace(getattr(base, name), **vals) for name, vals in sections.items()
    }
    return RunConfig(seed=seed, **updated).validate()


def emit(config: RunConfig) -> str:
    lines = [f"seed = {config.seed}"]
    for name in _SECTIONS:
        section = getattr(config, name)
        for f in fields(section):
            lines.append(f"{name}.{f.name} = {_format(getattr(section, f.name))}")
    return "\n".join(lines) + "\n"


def load(path) -> RunConfig:
    with open(path) as fh:
        return parse(fh.read())
