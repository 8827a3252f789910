"""INI run configuration with strict key validation."""

from __future__ import annotations

import configparser
import re
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Optional

import numpy as np

from .fine_stokes import DEFAULT_ALPHA, DEFAULT_SIGMA
from .geometry import DiamondBand, Disc, Empty, PerforatedDomain, PerforationPattern


class ConfigError(ValueError):
    pass


# section -> allowed keys
SCHEMA = {
    "domain": {"rect", "epsilon", "pattern", "radius", "center", "window"},
    "discretization": {"nx", "ny", "H", "h", "sigma", "alpha"},
    "method": {"variant", "pressure_recon"},
    "problem": {"f", "g", "reference"},
    "output": {"directory", "formats"},
    "cell": {"h", "gamma"},
    "basis": {"edge", "weight", "cell"},
    "convergence": {"mode", "values", "steps_per_cell"},
}

F_PRESETS = ("swirl", "zero")
G_PRESETS = ("none", "poiseuille")
FORMATS = ("csv", "vtk")


def swirl(x, y):
    return -(y - 0.5), x - 0.5


def poiseuille(x, y):
    return 4.0 * y * (1.0 - y), np.zeros_like(y)


@dataclass
class RunConfig:
    rect: tuple = (0.0, 0.0, 1.0, 1.0)
    epsilon: float = 1.0
    pattern: str = "empty"
    radius: float = 0.25
    center: tuple = (0.5, 0.5)
    window: Optional[tuple] = None
    nx: Optional[int] = None
    ny: Optional[int] = None
    H: Optional[float] = None
    h: float = 1.0 / 64
    sigma: float = DEFAULT_SIGMA
    alpha: float = DEFAULT_ALPHA
    variant: str = "CR3"
    pressure_recon: str = "piecewise_constant"
    f: object = "zero"  # preset name or (f1, f2)
    g: str = "none"
    reference: bool = False
    directory: str = "out"
    formats: tuple = FORMATS
    cell_h: float = 1.0 / 64
    gamma: bool = False
    edge: Optional[int] = None
    weight: int = 0
    cell: int = 0
    sweep_mode: str = "H"
    sweep_values: tuple = ()
    steps_per_cell: int = 16
    source: Optional[str] = field(default=None, repr=False)

    # -- derived objects -------------------------------------------------
    def make_pattern(self) -> PerforationPattern:
        if self.pattern == "disc":
            return Disc(tuple(self.center), self.radius)
        if self.pattern == "diamond_band":
            return DiamondBand()
        return Empty()

    def make_domain(self, epsilon: Optional[float] = None) -> PerforatedDomain:
        return PerforatedDomain(tuple(self.rect), self.epsilon if epsilon is None else epsilon, self.make_pattern(), self.window)

    def coarse_counts(self, H: Optional[float] = None) -> tuple:
        x0, y0, x1, y1 = self.rect
        H = self.H if H is None else H
        if H is not None:
            return _whole(x1 - x0, H, "H"), _whole(y1 - y0, H, "H")
        if self.nx is None or self.ny is None:
            raise ConfigError("discretization needs either H or nx and ny")
        return self.nx, self.ny

    def force(self):
        if isinstance(self.f, tuple):
            return self.f
        return swirl if self.f == "swirl" else None

    def boundary(self):
        return poiseuille if self.g == "poiseuille" else None


def _whole(length: float, step: float, name: str) -> int:
    r = length / step
    k = round(r)
    if k < 1 or abs(r - k) > 1e-9 * r:
        raise ConfigError(f"{name}={step} does not divide the side length {length}")
    return int(k)


def parse_number(text: str) -> float:
    """Float or exact fraction such as ``1/256``."""
    try:
        return float(Fraction(text.strip()))
    except (ValueError, ZeroDivisionError) as exc:
        raise ValueError(f"not a number: {text!r}") from exc


def _numbers(text: str, n: Optional[int] = None) -> tuple:
    vals = tuple(parse_number(t) for t in text.split(",") if t.strip())
    if n is not None and len(vals) != n:
        raise ValueError(f"expected {n} comma-separated numbers, got {len(vals)}")
    return vals


def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "yes", "true", "on"):
        return True
    if t in ("0", "no", "false", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _line_numbers(text: str) -> dict:
    """(section, key) -> line number of its first definition."""
    out = {}
    section = None
    for no, line in enumerate(text.splitlines(), start=1):
        s = line.strip()
        if not s or s[0] in "#;":
            continue
        m = re.match(r"\[(.+)\]$", s)
        if m:
            section = m.group(1).strip()
            out.setdefault((section, None), no)
            continue
        m = re.match(r"([^=:]+)[=:]", s)
        if m:
            out.setdefault((section, m.group(1).strip()), no)
    return out


def parse_config(text: str, source: str = "<config>") -> RunConfig:
    parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"), interpolation=None)
    parser.optionxform = str  # keys are case sensitive (H vs h)
    try:
        parser.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError(f"{source}: {exc}") from exc
    lines = _line_numbers(text)
    cfg = RunConfig(source=source)

    def where(sec, key=None):
        return f"{source}:{lines.get((sec, key), '?')}"

    for sec in parser.sections():
        if sec not in SCHEMA:
            raise ConfigError(f"{where(sec)}: unknown section [{sec}]")
        for key in parser[sec]:
            if key not in SCHEMA[sec]:
                raise ConfigError(f"{where(sec, key)}: unknown key '{key}' in [{sec}]")

    def get(sec, key, conv):
        if not parser.has_option(sec, key):
            return None
        try:
            return conv(parser[sec][key])
        except ValueError as exc:
            raise ConfigError(f"{where(sec, key)}: bad value for '{key}': {exc}") from exc

    def choice(options):
        def conv(v):
            v = v.strip()
            if v not in options:
                raise ValueError(f"{v!r} is not one of {', '.join(options)}")
            return v

        return conv

    def positive(v):
        x = parse_number(v)
        if not x > 0:
            raise ValueError("must be positive")
        return x

    def count(v):
        k = int(v)
        if k < 1:
            raise ValueError("must be >= 1")
        return k

    def index(v):
        k = int(v)
        if k < 0:
            raise ValueError("must be >= 0")
        return k

    set_ = {}
    set_["rect"] = get("domain", "rect", lambda v: _numbers(v, 4))
    set_["epsilon"] = get("domain", "epsilon", positive)
    set_["pattern"] = get("domain", "pattern", choice(("disc", "diamond_band", "empty")))
    set_["radius"] = get("domain", "radius", positive)
    set_["center"] = get("domain", "center", lambda v: _numbers(v, 2))
    set_["window"] = get("domain", "window", lambda v: _numbers(v, 4))
    set_["nx"] = get("discretization", "nx", count)
    set_["ny"] = get("discretization", "ny", count)
    set_["H"] = get("discretization", "H", positive)
    set_["h"] = get("discretization", "h", positive)
    set_["sigma"] = get("discretization", "sigma", positive)
    set_["alpha"] = get("discretization", "alpha", positive)
    set_["variant"] = get("method", "variant", lambda v: choice(("CR2", "CR3"))(v.strip().upper()))
    set_["pressure_recon"] = get("method", "pressure_recon", choice(("piecewise_constant", "oscillating")))

    def fconv(v):
        v = v.strip()
        if v in F_PRESETS:
            return v
        try:
            return _numbers(v, 2)
        except ValueError:
            raise ValueError(f"f must be one of {', '.join(F_PRESETS)} or two constants") from None

    set_["f"] = get("problem", "f", fconv)
    set_["g"] = get("problem", "g", choice(G_PRESETS))
    set_["reference"] = get("problem", "reference", _bool)
    set_["directory"] = get("output", "directory", lambda v: v.strip())

    def fmts(v):
        out = tuple(t.strip() for t in v.split(",") if t.strip())
        for t in out:
            if t not in FORMATS:
                raise ValueError(f"unknown format {t!r}")
        return out

    set_["formats"] = get("output", "formats", fmts)
    set_["cell_h"] = get("cell", "h", positive)
    set_["gamma"] = get("cell", "gamma", _bool)
    set_["edge"] = get("basis", "edge", index)
    set_["weight"] = get("basis", "weight", index)
    set_["cell"] = get("basis", "cell", index)
    set_["sweep_mode"] = get("convergence", "mode", choice(("H", "epsilon")))
    set_["sweep_values"] = get("convergence", "values", lambda v: _numbers(v))
    set_["steps_per_cell"] = get("convergence", "steps_per_cell", count)
    for k, v in set_.items():
        if v is not None:
            setattr(cfg, k, v)

    x0, y0, x1, y1 = cfg.rect
    if not (x1 > x0 and y1 > y0):
        raise ConfigError(f"{where('domain', 'rect')}: degenerate rectangle {cfg.rect}")
    if (cfg.nx is None) != (cfg.ny is None):
        raise ConfigError(f"{where('discretization')}: nx and ny must be given together")
    if cfg.H is not None and cfg.nx is not None:
        raise ConfigError(f"{where('discretization', 'H')}: give either H or nx/ny, not both")
    vals = cfg.sweep_values
    if vals and any(a <= b for a, b in zip(vals, vals[1:])):
        raise ConfigError(f"{where('convergence', 'values')}: sweep values must be sorted descending")
    return cfg


def load_config(path: str) -> RunConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config(text, source=path)
