"""Stack configuration: a flat ``key = value`` file with section headers.

Every field has a default, so an empty file is a valid configuration. The
hash is taken over a canonical rendering (sorted sections and keys, floats in
round-trip form), which makes it stable under reordering and reformatting.

Sections and keys::

    [pipm]       g, h_apex, step_time, v_centers, p_centers, step_lengths,
                 step_widths, min_phase_time
    [model]      leg_min, leg_max, swing_acc_max, friction, d_min, pairs, nodes,
                 pelvis_width, weights, samples_per_interval, swing_clearance,
                 backoff
    [solver]     feas_tol, stat_tol, rho0, rho_max, rho_growth, max_outer,
                 max_inner, stall_limit, stall_rho
    [synthesis]  lateral_descent, width_rule, pushes (admissible | all), horizon
    [sim]        dt, max_steps, window, push_step

Tuples are comma separated. ``sim.step_time`` follows ``pipm.step_time``.
"""

from __future__ import annotations

import configparser
import dataclasses
import hashlib
from dataclasses import dataclass, field, fields

from .phase_space import PipmParams
from .simulator import SimConfig
from .synthesis import HORIZON, WIDTH_STEADY_EXEMPT, SynthesisOptions
from .traj_opt.model import ReducedModelConfig
from .traj_opt.solver import SolverOptions

PUSHES_ADMISSIBLE = "admissible"
PUSHES_ALL = "all"


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class SynthesisSettings:
    lateral_descent: bool = True
    width_rule: str = WIDTH_STEADY_EXEMPT
    pushes: str = PUSHES_ADMISSIBLE
    horizon: int = HORIZON

    def __post_init__(self) -> None:
        if self.pushes not in (PUSHES_ADMISSIBLE, PUSHES_ALL):
            raise ValueError(f"pushes must be {PUSHES_ADMISSIBLE!r} or {PUSHES_ALL!r}")
        SynthesisOptions(self.lateral_descent, self.width_rule, None, self.horizon)

    def options(self) -> SynthesisOptions:
        return SynthesisOptions(self.lateral_descent, self.width_rule, None, self.horizon)


@dataclass(frozen=True)
class SimSettings:
    dt: float = 0.0005
    max_steps: int = 12
    window: int = 2
    push_step: int = 2

    def __post_init__(self) -> None:
        if self.push_step < 1:
            raise ValueError("push_step must be at least 1")


@dataclass(frozen=True)
class StackConfig:
    pipm: PipmParams = field(default_factory=PipmParams)
    model: ReducedModelConfig = field(default_factory=ReducedModelConfig)
    solver: SolverOptions = field(default_factory=SolverOptions)
    synthesis: SynthesisSettings = field(default_factory=SynthesisSettings)
    sim: SimSettings = field(default_factory=SimSettings)

    def sim_config(self) -> SimConfig:
        return SimConfig(self.sim.dt, self.pipm.step_time, self.sim.max_steps, self.sim.window)

    def canonical(self, sections: tuple[str, ...] | None = None) -> str:
        names = sorted(sections or SECTIONS)
        lines = []
        for name in names:
            lines.append(f"[{name}]")
            obj = getattr(self, name)
            for f in sorted(fields(obj), key=lambda f: f.name):
                lines.append(f"{f.name} = {_render(getattr(obj, f.name))}")
        return "\n".join(lines) + "\n"

    @property
    def config_hash(self) -> str:
        return hashlib.sha256(self.canonical().encode()).hexdigest()

    @property
    def table_hash(self) -> str:
        """Digest of the sections that determine the feasibility table."""
        return hashlib.sha256(self.canonical(TABLE_SECTIONS).encode()).hexdigest()

    @property
    def strategy_hash(self) -> str:
        return hashlib.sha256(self.canonical(TABLE_SECTIONS + ("synthesis",)).encode()).hexdigest()


SECTIONS = ("pipm", "model", "solver", "synthesis", "sim")
TABLE_SECTIONS = ("pipm", "model", "solver")
_TYPES = {"pipm": PipmParams, "model": ReducedModelConfig, "solver": SolverOptions,
          "synthesis": SynthesisSettings, "sim": SimSettings}


def _render(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, tuple):
        return ", ".join(_render(x) for x in v)
    return str(v)


def _parse_value(text: str, default):
    text = text.strip()
    if isinstance(default, bool):
        low = text.lower()
        if low in ("true", "yes", "1", "on"):
            return True
        if low in ("false", "no", "0", "off"):
            return False
        raise ValueError(f"not a boolean: {text!r}")
    if isinstance(default, int):
        return int(text)
    if isinstance(default, float):
        return float(text)
    if isinstance(default, tuple):
        return tuple(float(x) for x in text.split(",") if x.strip())
    return text


def parse_config(text: str) -> StackConfig:
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    cp.optionxform = str
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(str(exc)) from exc
    parts = {}
    for name in cp.sections():
        if name not in _TYPES:
            raise ConfigError(f"unknown section [{name}]")
    for name, typ in _TYPES.items():
        default = typ()
        kwargs = {}
        if cp.has_section(name):
            known = {f.name for f in fields(typ)}
            for key, raw in cp.items(name):
                if key not in known:
                    raise ConfigError(f"unknown key {name}.{key}")
                try:
                    kwargs[key] = _parse_value(raw, getattr(default, key))
                except ValueError as exc:
                    raise ConfigError(f"{name}.{key}: {exc}") from exc
        try:
            parts[name] = dataclasses.replace(default, **kwargs)
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"[{name}]: {exc}") from exc
    cfg = StackConfig(**parts)
    try:
        cfg.sim_config()
    except ValueError as exc:
        raise ConfigError(f"[sim]: {exc}") from exc
    return cfg


def load_config(path: str | None) -> StackConfig:
    if path is None:
        return StackConfig()
    with open(path, encoding="utf-8") as fh:
        return parse_config(fh.read())
