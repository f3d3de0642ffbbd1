"""INI scenario files.

A scenario is a flat ``configparser`` file with one level of sections::

    [scenario]
    family = lq
    seed = 7
    paths = 2000

    [measure]
    atoms = -1, 0, 1.5
    weights = 0.3, 0.5, 0.2

Every key is typed by :data:`SCHEMA`; unknown sections or keys are
errors, and every error message names ``section.key``.  :meth:`ScenarioConfig.dumps`
writes the canonical form (all keys, schema order, 17 significant digits),
so ``parse(dumps(parse(text)))`` equals ``parse(text)``.
"""

from __future__ import annotations

import configparser
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .forward_flow import ControlPath
from .io_utils import fmt_float
from .measure_kit import DiscreteMeasure
from .model import (
    KernelCoefficients,
    LqCoefficients,
    LqParams,
    PhiKind,
    TerminalKind,
    ZeroCoefficients,
)
from .sheet_noise import TimeGrid

__all__ = ["ConfigError", "ScenarioConfig", "SCHEMA", "FAMILIES", "load_config", "parse_config"]

FAMILIES = ("lq", "kernel", "zero")


class ConfigError(ValueError):
    """Malformed scenario file; the message starts with the offending ``section.key``."""


def _floats(text):
    return tuple(float(s) for s in text.replace(";", ",").split(",") if s.strip())


def _pos_int(text):
    v = int(text)
    if v < 1:
        raise ValueError("must be >= 1")
    return v


def _nonneg_int(text):
    v = int(text)
    if v < 0:
        raise ValueError("must be >= 0")
    return v


def _pos_float(text):
    v = float(text)
    if not (v > 0 and math.isfinite(v)):
        raise ValueError("must be a positive finite number")
    return v


def _nonneg_float(text):
    v = float(text)
    if not (v >= 0 and math.isfinite(v)):
        raise ValueError("must be a nonnegative finite number")
    return v


def _finite(text):
    v = float(text)
    if not math.isfinite(v):
        raise ValueError("must be finite")
    return v


def _bound(text):
    v = float(text)
    if math.isnan(v):
        raise ValueError("must be a number")
    return v


def _opt_float(text):
    return None if text.strip().lower() in ("", "none", "auto") else _pos_float(text)


def _choice(*options):
    def parse(text):
        v = text.strip().lower()
        if v not in options:
            raise ValueError(f"expected one of {', '.join(options)}")
        return v

    return parse


# section -> key -> (parser, default); None default means required
SCHEMA = {
    "scenario": {
        "family": (_choice(*FAMILIES), None),
        "seed": (_nonneg_int, 0),
        "paths": (_pos_int, 1000),
        "K": (_pos_int, 4),
        "T": (_pos_float, 1.0),
        "M": (_pos_int, 40),
        "out": (str, "out"),
    },
    "measure": {
        "atoms": (_floats, (0.0,)),
        "weights": (_floats, ()),
    },
    "lq": {
        **{k: (_finite, 0.0) for k in ("A", "B", "C", "D", "F", "H")},
        "Q": (_nonneg_float, 0.0),
        "S": (_nonneg_float, 0.0),
        "R": (_pos_float, 1.0),
        "phi_kind": (_choice(*(p.value for p in PhiKind)), "gaussian"),
        "terminal_kind": (_choice(*(t.value for t in TerminalKind)), "target_rho"),
        "nu_atoms": (_floats, (0.0,)),
        "nu_weights": (_floats, ()),
    },
    "kernel": {
        "width": (_pos_float, 1.0),
        "c": (_finite, 1.0),
        "sigma": (_finite, 0.3),
        "Q": (_nonneg_float, 0.0),
        "R": (_pos_float, 1.0),
        "terminal_kind": (_choice(*(t.value for t in TerminalKind)), "target_rho"),
        "nu_atoms": (_floats, (0.0,)),
        "nu_weights": (_floats, ()),
    },
    "control": {
        "kind": (_choice("constant", "values"), "constant"),
        "value": (_finite, 0.0),
        "values": (_floats, ()),
        "box_lo": (_bound, -math.inf),  # infinite bounds mean "no box"
        "box_hi": (_bound, math.inf),
    },
    "solver": {
        "beta": (_opt_float, None),
        "tol": (_pos_float, 1e-6),
        "max_iter": (_pos_int, 50),
        "theta": (_pos_float, 0.5),
        "lq_tol": (_pos_float, 1e-4),
        "max_outer": (_pos_int, 50),
        "adjoint_tol": (_pos_float, 1e-8),
        "eta": (_pos_float, 0.3),
        "iters": (_pos_int, 100),
        "gtol": (_finite, 0.0),
        "bsde_driver": (_choice("linear", "kernel"), "kernel"),
        "bsde_c": (_finite, 1.0),
        "residual_threshold": (_pos_float, 0.05),
    },
}
_REQUIRED = {("scenario", "family")}


def _fmt(v):
    if isinstance(v, tuple):
        return ", ".join(fmt_float(x) for x in v)
    if isinstance(v, float):
        return fmt_float(v)
    if v is None:
        return "auto"
    return str(v)


def _measure(atoms, weights, where):
    atoms = np.asarray(atoms, dtype=float)
    if atoms.size == 0:
        raise ConfigError(f"{where}: at least one atom is needed")
    if len(weights) == 0:
        return DiscreteMeasure.uniform(atoms)
    try:
        return DiscreteMeasure(atoms, weights)
    except ValueError as exc:
        raise ConfigError(f"{where}: {exc}") from None


@dataclass(frozen=True, eq=False)
class ScenarioConfig:
    values: dict  # section -> key -> parsed value, every schema key present

    def __eq__(self, other):
        return isinstance(other, ScenarioConfig) and self.dumps() == other.dumps()

    def __getitem__(self, section):
        return self.values[section]

    # -- convenience accessors ------------------------------------------
    @property
    def family(self):
        return self["scenario"]["family"]

    @property
    def seed(self):
        return self["scenario"]["seed"]

    @property
    def paths(self):
        return self["scenario"]["paths"]

    @property
    def K(self):
        return self["scenario"]["K"]

    @property
    def out(self):
        return self["scenario"]["out"]

    def grid(self):
        return TimeGrid(self["scenario"]["T"], self["scenario"]["M"])

    def mu0(self):
        m = self["measure"]
        return _measure(m["atoms"], m["weights"], "measure.weights")

    def lq_params(self):
        s = self["lq"]
        nu = _measure(s["nu_atoms"], s["nu_weights"], "lq.nu_weights")
        kw = {k: s[k] for k in ("A", "B", "C", "D", "F", "H", "Q", "S", "R")}
        try:
            return LqParams(**kw, phi_kind=PhiKind(s["phi_kind"]), nu=nu,
                            terminal_kind=TerminalKind(s["terminal_kind"]))
        except ValueError as exc:
            raise ConfigError(f"lq: {exc}") from None

    def coefficients(self):
        if self.family == "lq":
            return LqCoefficients(self.lq_params())
        if self.family == "kernel":
            s = self["kernel"]
            nu = _measure(s["nu_atoms"], s["nu_weights"], "kernel.nu_weights")
            try:
                return KernelCoefficients(s["width"], s["c"], sigma=s["sigma"], Q=s["Q"], R=s["R"],
                                          nu=nu, terminal_kind=TerminalKind(s["terminal_kind"]))
            except ValueError as exc:
                raise ConfigError(f"kernel: {exc}") from None
        return ZeroCoefficients()

    def control(self):
        c = self["control"]
        M = self["scenario"]["M"]
        box = None
        if math.isfinite(c["box_lo"]) or math.isfinite(c["box_hi"]):
            box = (c["box_lo"], c["box_hi"])
        if c["kind"] == "constant":
            vals = np.full(M, c["value"])
        else:
            vals = np.asarray(c["values"], dtype=float)
            if vals.size == 1:
                vals = np.full(M, vals[0])
            if vals.size != M:
                raise ConfigError(f"control.values: {vals.size} values for {M} steps")
        try:
            return ControlPath(vals, box)
        except ValueError as exc:
            raise ConfigError(f"control.values: {exc}") from None

    # -- serialisation --------------------------------------------------
    def dumps(self):
        lines = []
        for section, keys in SCHEMA.items():
            lines.append(f"[{section}]")
            for key in keys:
                lines.append(f"{key} = {_fmt(self.values[section][key])}")
            lines.append("")
        return "\n".join(lines)

    def with_overrides(self, **kw):
        """Copy with ``scenario`` keys replaced (``seed``, ``out``...)."""
        vals = {s: dict(v) for s, v in self.values.items()}
        for k, v in kw.items():
            if k not in SCHEMA["scenario"]:
                raise ConfigError(f"scenario.{k}: unknown key")
            vals["scenario"][k] = v
        return ScenarioConfig(vals)


def parse_config(text, source="<config>") -> ScenarioConfig:
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    cp.optionxform = str  # keys are case sensitive (A vs a)
    try:
        cp.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError(f"{source}: {exc}") from None
    values = {}
    for section in cp.sections():
        if section not in SCHEMA:
            raise ConfigError(f"{section}: unknown section (expected one of {', '.join(SCHEMA)})")
    for section, keys in SCHEMA.items():
        got = cp[section] if cp.has_section(section) else {}
        for key in got:
            if key not in keys:
                raise ConfigError(f"{section}.{key}: unknown key")
        out = {}
        for key, (parser, default) in keys.items():
            if key in got:
                try:
                    out[key] = parser(got[key])
                except ValueError as exc:
                    raise ConfigError(f"{section}.{key}: cannot parse {got[key]!r} ({exc})") from None
            elif (section, key) in _REQUIRED:
                raise ConfigError(f"{section}.{key}: required key is missing")
            else:
                out[key] = default
        values[section] = out
    cfg = ScenarioConfig(values)
    cfg.mu0()  # surface measure errors at parse time
    if cfg.family != "zero":
        cfg.coefficients()
    cfg.control()
    return cfg


def load_config(path) -> ScenarioConfig:
    p = Path(path)
    try:
        text = p.read_text()
    except OSError as exc:
        raise ConfigError(f"{path}: cannot read ({exc.strerror})") from None
    return parse_config(text, source=str(p))
