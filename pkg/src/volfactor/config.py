"""Experiment configuration: a single JSON file, validated before any solver runs."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import re
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

from .errors import ConfigError, ParseError, ValidationError
from .model import ChackoViceira, CorrelationScheme, check_exponent, distortion_constants, perturbed_correlations


@dataclass
class ModelBlock:
    mu_bar: float = 0.05
    sigma_bar: float = 0.2
    m: float = 26.0
    beta_bar: float = 5.0
    p: float = -1.0
    T: float = 1.0


@dataclass
class CorrelationBlock:
    rho: float = 0.5
    rho1_slope: float = 0.0
    rho2_slope: float = -0.5
    rho12_slope: float = -1.0
    eps: float = 0.1


@dataclass
class GridBlock:
    z_max: float = 100.0
    n_z: int = 201
    n_t: int = 400
    pad: float = 1.25


@dataclass
class McBlock:
    n_paths: int = 100_000
    n_steps: int = 500
    seed: int = 20190101
    z0: float = 10.0
    # box padding for the near-optimality gap grid (simulated paths must stay inside)
    gap_pad: float = 2.0


@dataclass
class VerifyBlock:
    eps_list: list = field(default_factory=lambda: [0.025, 0.05, 0.1])
    sandwich_eps: list = field(default_factory=lambda: [0.05, 0.1])
    band_width: float = 0.2
    stride: int = 1
    m_source: str = "displayed"
    # "horizon": eps^2 M (T - t) for either sign of p; "elapsed": eps^2 M (-t) when p < 0
    slack: str = "horizon"


@dataclass
class FiguresBlock:
    eps_list: list = field(default_factory=lambda: [0.1, 0.05])


@dataclass
class TwoAssetBlock:
    mu_bar_2: float = 0.05
    sigma_bar_2: float = 0.2
    rho_w: float = 0.0
    rho_2: float = 0.5
    slopes_1: list = field(default_factory=lambda: [0.0, -0.5])
    slopes_2: list = field(default_factory=lambda: [0.0, -0.5])
    slope_b: float = -1.0
    grid_2d: bool = False


@dataclass
class ExperimentConfig:
    model: ModelBlock = field(default_factory=ModelBlock)
    correlation: CorrelationBlock = field(default_factory=CorrelationBlock)
    grid: GridBlock = field(default_factory=GridBlock)
    mc: McBlock = field(default_factory=McBlock)
    verify: VerifyBlock = field(default_factory=VerifyBlock)
    figures: FiguresBlock = field(default_factory=FiguresBlock)
    two_asset: TwoAssetBlock = field(default_factory=TwoAssetBlock)
    output: str = "output"

    def to_dict(self):
        return dataclasses.asdict(self)

    def digest(self):
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()

    # domain objects
    def chacko_viceira(self):
        b = self.model
        return ChackoViceira(b.mu_bar, b.sigma_bar, b.m, b.beta_bar, b.T)

    def scheme(self, eps=None):
        c = self.correlation
        return CorrelationScheme(c.rho, c.rho1_slope, c.rho2_slope, c.rho12_slope,
                                 c.eps if eps is None else eps)

    def constants(self):
        return distortion_constants(self.model.p, self.correlation.rho)


_BLOCKS = {f.name: f for f in dataclasses.fields(ExperimentConfig)}


def _line_of(text, key):
    if text is None:
        return None
    m = re.search(r'"%s"\s*:' % re.escape(key), text)
    return text.count("\n", 0, m.start()) + 1 if m else None


def _coerce(value, default, path, text):
    key = path.rsplit(".", 1)[-1]
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ParseError(f"{path} must be true or false", _line_of(text, key), path)
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            if isinstance(value, float) and value.is_integer():
                return int(value)
            raise ParseError(f"{path} must be an integer", _line_of(text, key), path)
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ParseError(f"{path} must be a number", _line_of(text, key), path)
        return float(value)
    if isinstance(default, list):
        if not isinstance(value, list) or not all(
                isinstance(v, (int, float)) and not isinstance(v, bool) for v in value):
            raise ParseError(f"{path} must be a list of numbers", _line_of(text, key), path)
        return [float(v) for v in value]
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ParseError(f"{path} must be a string", _line_of(text, key), path)
        return value
    raise ParseError(f"unsupported field {path}", _line_of(text, key), path)


def from_dict(data, text=None) -> ExperimentConfig:
    if not isinstance(data, dict):
        raise ParseError("configuration must be a JSON object", 1, None)
    cfg = ExperimentConfig()
    for name, value in data.items():
        if name not in _BLOCKS:
            raise ParseError(f"unknown key '{name}'", _line_of(text, name), name)
        current = getattr(cfg, name)
        if not dataclasses.is_dataclass(current):
            setattr(cfg, name, _coerce(value, current, name, text))
            continue
        if not isinstance(value, dict):
            raise ParseError(f"block '{name}' must be an object", _line_of(text, name), name)
        known = {f.name for f in dataclasses.fields(current)}
        for key, v in value.items():
            path = f"{name}.{key}"
            if key not in known:
                raise ParseError(f"unknown key '{path}'", _line_of(text, key), path)
            setattr(current, key, _coerce(v, getattr(current, key), path, text))
    validate(cfg)
    return cfg


def parse_config(text) -> ExperimentConfig:
    if not text.strip():
        raise ParseError("configuration file is empty", 1, None)
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(exc.msg, exc.lineno, None) from None
    return from_dict(data, text)


def load_config(path) -> ExperimentConfig:
    return parse_config(Path(path).read_text())


def default_config_text():
    return resources.files("volfactor").joinpath("default_config.json").read_text()


def default_config() -> ExperimentConfig:
    return parse_config(default_config_text())


def apply_override(cfg: ExperimentConfig, dotted, raw):
    """Set a field from a command-line string, e.g. ('mc.n_paths', '1000')."""
    data = cfg.to_dict()
    parts = dotted.split(".")
    node = data
    for part in parts[:-1]:
        if part not in node or not isinstance(node[part], dict):
            raise ConfigError(f"unknown field '{dotted}'", dotted)
        node = node[part]
    if parts[-1] not in node:
        raise ConfigError(f"unknown field '{dotted}'", dotted)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    node[parts[-1]] = value
    return from_dict(data)


def validate(cfg: ExperimentConfig):
    """Run every invariant through the model constructors."""
    model = cfg.chacko_viceira()
    check_exponent(cfg.model.p)
    perturbed_correlations(cfg.scheme())
    cfg.constants()
    g = cfg.grid
    if g.z_max <= 0 or g.n_z < 5 or g.n_t < 2 or g.pad < 1:
        raise ValidationError("grid needs z_max > 0, n_z >= 5, n_t >= 2 and pad >= 1")
    mc = cfg.mc
    if mc.n_paths < 2 or mc.n_paths % 2 or mc.n_steps < 1 or mc.seed < 0 or mc.z0 <= 0 or mc.gap_pad < 1:
        raise ValidationError("mc needs an even n_paths >= 2, n_steps >= 1, seed >= 0, z0 > 0, gap_pad >= 1")
    v = cfg.verify
    if v.m_source not in ("displayed", "assembled"):
        raise ValidationError("verify.m_source must be 'displayed' or 'assembled'")
    if v.slack not in ("horizon", "elapsed"):
        raise ValidationError("verify.slack must be 'horizon' or 'elapsed'")
    if len(v.eps_list) < 2 or v.stride < 1 or not 0 < v.band_width <= 1:
        raise ValidationError("verify needs at least two eps values, stride >= 1, 0 < band_width <= 1")
    for e in list(v.eps_list) + list(v.sandwich_eps) + list(cfg.figures.eps_list):
        perturbed_correlations(cfg.scheme(e))
    if not cfg.figures.eps_list:
        raise ValidationError("figures.eps_list is empty")
    ta = cfg.two_asset
    if len(ta.slopes_1) != 2 or len(ta.slopes_2) != 2:
        raise ValidationError("two_asset slopes need two entries (one per factor)")
    if not cfg.output:
        raise ValidationError("output directory must be given")
    return model
