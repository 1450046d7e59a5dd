"""Declarative experiment configs: strict INI-like parser and validation.

The format is sectioned ``key = value`` text with '#' comments.  Parsing is
strict: unknown sections or keys, missing required keys and out-of-range
values are all reported with line numbers.  ``to_text`` emits a canonical
form whose re-parse equals the original config (lossless round trip).
"""
from __future__ import annotations

from dataclasses import dataclass, field, asdict

import numpy as np


class ConfigError(ValueError):
    """Carries (line, message) diagnostics; line 0 means file-level."""

    def __init__(self, diagnostics):
        self.diagnostics = list(diagnostics)
        super().__init__(
            "\n".join(f"line {ln}: {msg}" if ln else msg
                      for ln, msg in self.diagnostics)
        )


def _tokenize(text):
    """-> {section: {key: (raw_value, line_no)}}, preserving order."""
    sections = {}
    current = None
    diags = []
    for ln, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            current = line[1:-1].strip().lower()
            sections.setdefault(current, {})
            continue
        if "=" not in line:
            diags.append((ln, f"expected 'key = value', got {line!r}"))
            continue
        if current is None:
            diags.append((ln, "key outside any [section]"))
            continue
        key, value = (part.strip() for part in line.split("=", 1))
        if key in sections[current]:
            diags.append((ln, f"duplicate key {key!r} in [{current}]"))
            continue
        sections[current][key.lower()] = (value, ln)
    if diags:
        raise ConfigError(diags)
    return sections


@dataclass(frozen=True)
class ModelConfig:
    type: str
    omega: tuple = ()          # cascade level energies
    kappa_chain: tuple = ()    # cascade channel strengths
    rabi1: float = 0.0
    rabi2: float = 0.0
    mu: float = 0.0
    kappa: float = 1.0
    omega1: float = 0.0
    omega2: float = 0.0
    delta3: float = -1.0
    dim: int = 0               # custom models
    h0: tuple = ()
    lindblad: tuple = ()


@dataclass(frozen=True)
class KernelConfig:
    type: str
    gammas: tuple = ()
    terms: tuple = ()
    path: str = ""


@dataclass(frozen=True)
class GridConfig:
    dt: float
    t_max: float
    sample_stride: int = 1
    substeps: int = 1


@dataclass(frozen=True)
class InitialConfig:
    amplitudes: tuple


@dataclass(frozen=True)
class RunConfig:
    mode: str
    observables: tuple = ()
    out: str = ""
    seed: int = 0


@dataclass(frozen=True)
class HierarchyConfig:
    max_order: int = 2
    compression: bool = True
    cap_elements: int = 20_000_000
    fast_path: bool = True


@dataclass(frozen=True)
class SweepConfig:
    ratio_min: float = 0.0
    ratio_max: float = 0.0
    points: int = 0
    settle_time: float = 0.0
    average_window: float = 0.0


@dataclass(frozen=True)
class CompareConfig:
    oracle: str = ""
    tolerance: float = 0.0
    trajectories: int = 0
    modes: int = 60
    n_max: int = 3


@dataclass(frozen=True)
class ExperimentConfig:
    model: ModelConfig
    kernel: KernelConfig
    grid: GridConfig
    initial: InitialConfig
    run: RunConfig
    hierarchy: HierarchyConfig = HierarchyConfig()
    sweep: SweepConfig = SweepConfig()
    compare: CompareConfig = CompareConfig()


class _Reader:
    """Typed key extraction with diagnostics accumulation."""

    def __init__(self, section_name, entries, diags):
        self.name = section_name
        self.entries = dict(entries)
        self.diags = diags

    def take(self, key, conv, required=False, default=None, check=None):
        if key not in self.entries:
            if required:
                self.diags.append((0, f"[{self.name}] missing key {key!r}"))
            return default
        raw, ln = self.entries.pop(key)
        try:
            value = conv(raw)
        except Exception as exc:
            self.diags.append((ln, f"[{self.name}] {key}: {exc}"))
            return default
        if check is not None:
            msg = check(value)
            if msg:
                self.diags.append((ln, f"[{self.name}] {key} {msg}"))
                return default
        return value

    def finish(self):
        for key, (_, ln) in self.entries.items():
            self.diags.append((ln, f"[{self.name}] unknown key {key!r}"))


def _floats(raw):
    return tuple(float(p) for p in raw.replace(",", " ").split())


def _complexes(raw):
    return tuple(complex(p) for p in raw.replace(",", " ").split())


def _strings(raw):
    return tuple(p for p in raw.replace(",", " ").split())


def _bool(raw):
    lowered = raw.strip().lower()
    if lowered in ("on", "true", "yes", "1"):
        return True
    if lowered in ("off", "false", "no", "0"):
        return False
    raise ValueError(f"expected on/off, got {raw!r}")


def _rows(raw):
    return tuple(tuple(complex(p) for p in row.replace(",", " ").split())
                 for row in raw.split(";"))


_OBS_ERR = "must look like p<m> or abs_rho<j><k>"


def _check_observable(name):
    if name.startswith("p") and name[1:].isdigit():
        return None
    if name.startswith("abs_rho") and len(name) == 9 and name[7:].isdigit():
        return None
    return _OBS_ERR


def parse_config(text):
    """Validated ExperimentConfig, or ConfigError with line diagnostics."""
    sections = _tokenize(text)
    diags = []
    known = {"model", "kernel", "grid", "initial", "run", "hierarchy",
             "sweep", "compare"}
    for name in sections:
        if name not in known:
            diags.append((0, f"unknown section [{name}]"))
    for name in ("model", "kernel", "grid", "initial", "run"):
        if name not in sections:
            diags.append((0, f"missing section [{name}]"))
    if diags:
        raise ConfigError(diags)

    r = _Reader("model", sections["model"], diags)
    mtype = r.take("type", str.lower, required=True, default="",
                   check=lambda v: None if v in ("cascade", "interference",
                                                 "custom")
                   else "must be cascade, interference or custom")
    model = None
    if mtype == "cascade":
        model = ModelConfig(
            type=mtype,
            omega=r.take("omega", _floats, required=True, default=(),
                         check=lambda v: None if len(v) == 4
                         else "needs 4 level energies"),
            kappa_chain=r.take("kappa", _floats, required=True, default=(),
                               check=lambda v: None if len(v) == 3
                               else "needs 3 channel strengths"),
        )
    elif mtype == "interference":
        model = ModelConfig(
            type=mtype,
            rabi1=r.take("rabi1", float, required=True, default=0.0),
            rabi2=r.take("rabi2", float, required=True, default=0.0),
            mu=r.take("mu", float, required=True, default=0.0),
            kappa=r.take("kappa", float, required=True, default=1.0),
            omega1=r.take("omega1", float, default=0.0),
            omega2=r.take("omega2", float, default=0.0),
            delta3=r.take("delta3", float, default=-1.0),
        )
    elif mtype == "custom":
        model = ModelConfig(
            type=mtype,
            dim=r.take("dim", int, required=True, default=0,
                       check=lambda v: None if 2 <= v <= 16
                       else "must be in [2, 16]"),
            h0=r.take("h0", _rows, required=True, default=()),
            lindblad=r.take("lindblad", _rows, required=True, default=()),
        )
    r.finish()

    r = _Reader("kernel", sections["kernel"], diags)
    ktype = r.take("type", str.lower, required=True, default="",
                   check=lambda v: None if v in ("ou", "expsum", "tabulated")
                   else "must be ou, expsum or tabulated")
    kernel = KernelConfig(type="ou", gammas=(1.0,))
    if ktype == "ou":
        kernel = KernelConfig(
            type=ktype,
            gammas=r.take("gamma", _floats, required=True, default=(),
                          check=lambda v: None if v and all(g > 0 for g in v)
                          else "values must be positive"),
        )
    elif ktype == "expsum":
        kernel = KernelConfig(
            type=ktype,
            terms=r.take("terms", _rows, required=True, default=(),
                         check=lambda v: None
                         if all(len(t) == 2 and t[1].real > 0 for t in v)
                         else "each term needs 'G lambda' with Re lambda > 0"),
        )
    elif ktype == "tabulated":
        kernel = KernelConfig(type=ktype,
                              path=r.take("path", str, required=True,
                                          default=""))
    r.finish()

    r = _Reader("grid", sections["grid"], diags)
    grid = GridConfig(
        dt=r.take("dt", float, required=True, default=1.0,
                  check=lambda v: None if v > 0 else "must be positive"),
        t_max=r.take("t_max", float, required=True, default=1.0,
                     check=lambda v: None if v > 0 else "must be positive"),
        sample_stride=r.take("sample_stride", int, default=1,
                             check=lambda v: None if v >= 1
                             else "must be >= 1"),
        substeps=r.take("substeps", int, default=1,
                        check=lambda v: None if v >= 1 else "must be >= 1"),
    )
    r.finish()

    r = _Reader("initial", sections["initial"], diags)
    state = r.take("state", str, required=True, default="")
    r.finish()
    amplitudes = ()
    if state:
        label = state.strip().strip("|>")
        if label.isdigit():
            amplitudes = ("label", int(label))
        else:
            try:
                amplitudes = ("amplitudes",) + _complexes(state)
            except ValueError:
                diags.append((0, "[initial] state must be a level label or "
                                 "an amplitude list"))
    initial = InitialConfig(amplitudes=amplitudes)

    r = _Reader("run", sections["run"], diags)
    run = RunConfig(
        mode=r.take("mode", str.lower, required=True, default="",
                    check=lambda v: None if v in ("evolve", "sweep", "compare")
                    else "must be evolve, sweep or compare"),
        observables=r.take(
            "observables", _strings, default=("p1", "p2", "p3", "p4"),
            check=lambda v: next(
                (f"{name!r} {_OBS_ERR}" for name in v
                 if _check_observable(name)), None),
        ),
        out=r.take("out", str, default=""),
        seed=r.take("seed", int, default=0),
    )
    r.finish()

    hierarchy = HierarchyConfig()
    if "hierarchy" in sections:
        r = _Reader("hierarchy", sections["hierarchy"], diags)
        hierarchy = HierarchyConfig(
            max_order=r.take("max_order", int, default=2,
                             check=lambda v: None if 0 <= v <= 2
                             else "must be 0, 1 or 2"),
            compression=r.take("compression", _bool, default=True),
            cap_elements=r.take("cap_elements", int, default=20_000_000,
                                check=lambda v: None if v > 0
                                else "must be positive"),
            fast_path=r.take("fast_path", _bool, default=True),
        )
        r.finish()

    sweep = SweepConfig()
    if "sweep" in sections:
        r = _Reader("sweep", sections["sweep"], diags)
        sweep = SweepConfig(
            ratio_min=r.take("ratio_min", float, required=True, default=0.0,
                             check=lambda v: None if v > 0
                             else "must be positive"),
            ratio_max=r.take("ratio_max", float, required=True, default=0.0),
            points=r.take("points", int, required=True, default=1,
                          check=lambda v: None if v >= 1 else "must be >= 1"),
            settle_time=r.take("settle_time", float, required=True,
                               default=0.0,
                               check=lambda v: None if v > 0
                               else "must be positive"),
            average_window=r.take("average_window", float, required=True,
                                  default=0.0,
                                  check=lambda v: None if v > 0
                                  else "must be positive"),
        )
        r.finish()

    compare = CompareConfig()
    if "compare" in sections:
        r = _Reader("compare", sections["compare"], diags)
        compare = CompareConfig(
            oracle=r.take("oracle", str.lower, required=True, default="",
                          check=lambda v: None
                          if v in ("qsd", "bath", "lindblad")
                          else "must be qsd, bath or lindblad"),
            tolerance=r.take("tolerance", float, default=0.03,
                             check=lambda v: None if v > 0
                             else "must be positive"),
            trajectories=r.take("trajectories", int, default=2000,
                                check=lambda v: None if v >= 2
                                else "must be >= 2"),
            modes=r.take("modes", int, default=60),
            n_max=r.take("n_max", int, default=3),
        )
        r.finish()

    mode = run.mode
    if mode == "sweep":
        if "sweep" not in sections:
            diags.append((0, "run.mode = sweep needs a [sweep] section"))
        if model is not None and model.type != "interference":
            diags.append((0, "sweep mode needs the interference model"))
    if mode == "compare" and "compare" not in sections:
        diags.append((0, "run.mode = compare needs a [compare] section"))

    if diags:
        raise ConfigError(diags)
    return ExperimentConfig(model=model, kernel=kernel, grid=grid,
                            initial=initial, run=run, hierarchy=hierarchy,
                            sweep=sweep, compare=compare)


def _fmt(value):
    if isinstance(value, bool):
        return "on" if value else "off"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, complex):
        return format(value, "")[1:-1] if False else str(value).strip("()")
    return str(value)


def to_text(cfg):
    """Canonical text form; parse(to_text(parse(x))) == parse(x)."""
    lines = []
    m = cfg.model
    lines.append("[model]")
    lines.append(f"type = {m.type}")
    if m.type == "cascade":
        lines.append("omega = " + ", ".join(_fmt(v) for v in m.omega))
        lines.append("kappa = " + ", ".join(_fmt(v) for v in m.kappa_chain))
    elif m.type == "interference":
        for key in ("rabi1", "rabi2", "mu", "kappa", "omega1", "omega2",
                    "delta3"):
            lines.append(f"{key} = {_fmt(getattr(m, key))}")
    else:
        lines.append(f"dim = {m.dim}")
        lines.append("h0 = " + "; ".join(
            " ".join(_fmt(v) for v in row) for row in m.h0))
        lines.append("lindblad = " + "; ".join(
            " ".join(_fmt(v) for v in row) for row in m.lindblad))

    k = cfg.kernel
    lines.append("[kernel]")
    lines.append(f"type = {k.type}")
    if k.type == "ou":
        lines.append("gamma = " + ", ".join(_fmt(v) for v in k.gammas))
    elif k.type == "expsum":
        lines.append("terms = " + "; ".join(
            " ".join(_fmt(v) for v in t) for t in k.terms))
    else:
        lines.append(f"path = {k.path}")

    g = cfg.grid
    lines.append("[grid]")
    lines.append(f"dt = {_fmt(g.dt)}")
    lines.append(f"t_max = {_fmt(g.t_max)}")
    lines.append(f"sample_stride = {g.sample_stride}")
    lines.append(f"substeps = {g.substeps}")

    lines.append("[initial]")
    spec = cfg.initial.amplitudes
    if spec and spec[0] == "label":
        lines.append(f"state = {spec[1]}")
    else:
        lines.append("state = " + ", ".join(_fmt(v) for v in spec[1:]))

    run = cfg.run
    lines.append("[run]")
    lines.append(f"mode = {run.mode}")
    lines.append("observables = " + ", ".join(run.observables))
    if run.out:
        lines.append(f"out = {run.out}")
    lines.append(f"seed = {run.seed}")

    h = cfg.hierarchy
    lines.append("[hierarchy]")
    lines.append(f"max_order = {h.max_order}")
    lines.append(f"compression = {_fmt(h.compression)}")
    lines.append(f"cap_elements = {h.cap_elements}")
    lines.append(f"fast_path = {_fmt(h.fast_path)}")

    if run.mode == "sweep":
        s = cfg.sweep
        lines.append("[sweep]")
        for key in ("ratio_min", "ratio_max", "points", "settle_time",
                    "average_window"):
            lines.append(f"{key} = {_fmt(getattr(s, key))}")
    if run.mode == "compare":
        c = cfg.compare
        lines.append("[compare]")
        for key in ("oracle", "tolerance", "trajectories", "modes", "n_max"):
            lines.append(f"{key} = {_fmt(getattr(c, key))}")
    return "\n".join(lines) + "\n"


def build_model(cfg, ratio=None):
    """Instantiate the SystemModel described by a config (ratio overrides rabi2)."""
    from .models import (InterferenceConvention, SystemModel, build_cascade,
                         build_interference)

    m = cfg.model
    if m.type == "cascade":
        return build_cascade(m.omega, m.kappa_chain)
    if m.type == "interference":
        rabi2 = m.rabi2 if ratio is None else ratio * m.rabi1
        convention = InterferenceConvention(omega1=m.omega1, omega2=m.omega2,
                                            delta3=m.delta3)
        return build_interference(m.rabi1, rabi2, m.mu, m.kappa,
                                  convention=convention)
    h0 = np.array(m.h0, dtype=complex)
    lindblad = np.array(m.lindblad, dtype=complex)
    from .models import SystemModel as SM

    return SM(dim=m.dim, h0=h0, drives=(), lindblad=lindblad)


def build_kernels(cfg):
    """List of kernel instances (one per gamma for OU lists)."""
    from . import kernels as kmod

    k = cfg.kernel
    if k.type == "ou":
        return [kmod.OrnsteinUhlenbeck(g) for g in k.gammas]
    if k.type == "expsum":
        return [kmod.ExponentialSum(tuple((t[0], t[1]) for t in k.terms))]
    return [kmod.load_tabulated(k.path)]


def build_grid(cfg):
    from . import kernels as kmod

    g = cfg.grid
    return kmod.TimeGrid(dt=g.dt, n_steps=int(round(g.t_max / g.dt)))


def initial_state(cfg, dim):
    spec = cfg.initial.amplitudes
    psi = np.zeros(dim, dtype=complex)
    if spec[0] == "label":
        level = spec[1]
        if not 1 <= level <= dim:
            raise ConfigError([(0, f"[initial] level {level} out of range")])
        psi[level - 1] = 1.0
    else:
        amps = np.asarray(spec[1:], dtype=complex)
        if len(amps) != dim:
            raise ConfigError([(0, "[initial] amplitude count does not match "
                                   "the model dimension")])
        psi = amps / np.linalg.norm(amps)
    return psi
