"""Closed-loop push-recovery episodes on the reduced model.

The phase clock splits every OWS into two halves of a fixed number of ticks;
the tick duration stretches so the contact switch lands exactly on phase 0.5
and the next keyframe exactly on phase 1. The CoM moves by the exact pendulum
flow under the active stance foot.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from multiprocessing import get_context
from typing import Iterable, Optional, Sequence

from .pabt import (
    INFEASIBLE_TRANSITION, NO_APEX_CROSSING, OUT_OF_BOUND, PLAN_EXHAUSTED,
    Blackboard, OwsExecution, Pabt, place_lateral_foot, run_ows_loop,
)
from .phase_space import (
    Keyframe, NoSwitchPoint, OutOfRange, PhaseState, PipmParams, Stance, classify_axis, classify_lateral,
    is_steady_state, lateral_center, lipm_flow, nominal_gait, orbital_energy, solve_ows_timing,
)
from .synthesis import GameState, Strategy, SystemAction, successor_counter
from .traj_opt.table import FeasibilityTable

RECOVERED = "recovered"
FAILED = "failed"


class ConfigMismatch(ValueError):
    pass


@dataclass(frozen=True)
class SimConfig:
    dt: float = 0.0005
    step_time: float = 0.4
    max_steps: int = 12
    window: int = 2

    def __post_init__(self) -> None:
        if not self.dt > 0 or not self.step_time > 0:
            raise ValueError("dt and step_time must be positive")
        n = self.step_time / self.dt
        if abs(n - round(n)) > 1e-9 * max(1.0, n) or round(n) % 2:
            raise ValueError("dt must divide half the step time")
        if self.max_steps < 1 or self.window < 1:
            raise ValueError("max_steps and window must be positive")

    @property
    def ticks_per_half(self) -> int:
        return int(round(self.step_time / self.dt)) // 2


@dataclass(frozen=True)
class PerturbationEvent:
    phase: float            # fraction of the OWS in [0, 1)
    direction: float        # degrees, 0 = forward, 90 = left
    magnitude: float        # m/s
    step: int = 2           # OWS index; even steps are right stance

    def __post_init__(self) -> None:
        if not 0.0 <= self.phase < 1.0:
            raise ValueError("phase must lie in [0, 1)")
        if not self.magnitude >= 0:
            raise ValueError("magnitude must be non-negative")
        if self.step < 1:
            raise ValueError("pushes start from the second keyframe")

    @property
    def delta(self) -> tuple[float, float]:
        a = math.radians(self.direction)
        return self.magnitude * math.cos(a), self.magnitude * math.sin(a)

    def tick(self, ticks_per_half: int) -> int:
        if self.phase == 0.0:
            return 0
        j = int(round(self.phase * 2 * ticks_per_half))
        return min(max(j, 1), 2 * ticks_per_half - 1)


@dataclass
class EpisodeResult:
    outcome: str
    cause: Optional[str]
    steps_to_recovery: Optional[int]
    keyframes: list[Keyframe]
    actions: list[SystemAction]
    plans: list[list[tuple[Keyframe, Keyframe]]]
    recalculations: int
    trace: list[dict] = field(default_factory=list)
    mismatches: list[dict] = field(default_factory=list)

    @property
    def recovered(self) -> bool:
        return self.outcome == RECOVERED


class SimPlant:
    """The reduced-order robot driven by the PABT."""

    def __init__(self, cfg: SimConfig, events: Sequence[PerturbationEvent], strategy: Strategy,
                 table: FeasibilityTable, params: PipmParams) -> None:
        self.cfg, self.strategy, self.table, self.params = cfg, strategy, table, params
        self.n = cfg.ticks_per_half
        self.events: dict[tuple[int, int], list[PerturbationEvent]] = {}
        for e in events:
            self.events.setdefault((e.step, e.tick(self.n)), []).append(e)
        # affected keyframe of the last push: the pushed keyframe itself for a
        # keyframe-instant push, otherwise the keyframe ending that step
        self.deadline: Optional[int] = None
        if events:
            last = max(events, key=lambda e: (e.step, e.tick(self.n)))
            self.affected = last.step if last.tick(self.n) == 0 else last.step + 1
        else:
            self.affected = None
        _, _, offset = nominal_gait(params)
        self.com = [0.0, offset, params.v_centers[2], 0.0]
        self.stance = Stance.RIGHT
        self.foot = (0.0, 0.0)
        self.step = 0
        self.tick = 0
        self.time = 0.0
        self.keyframes: list[Keyframe] = []
        self.actions: list[SystemAction] = []
        self.plans: list[list] = []
        self.mismatches: list[dict] = []
        self.tick_events: list[list[float]] = []
        self.pushed_since_decision = False
        self.planned_next: Optional[Keyframe] = None
        self.gs: Optional[GameState] = None
        self.outcome: Optional[str] = None
        self.cause: Optional[str] = None
        self.recovery_steps: Optional[int] = None
        self.current_k: Optional[Keyframe] = None

    # ------------------------------------------------------------- helpers
    def _apply_events(self) -> None:
        self.tick_events = []
        for e in self.events.get((self.step, self.tick), ()):
            dvx, dvy = e.delta
            self.com[2] += dvx
            self.com[3] += dvy
            self.pushed_since_decision = True
            self.tick_events.append([e.phase, e.direction, e.magnitude])

    def _sync(self, bb: Blackboard) -> None:
        bb.com = tuple(self.com)
        bb.stance = self.stance
        bb.step = self.step
        bb.time = self.time
        bb.phase = self.tick / (2 * self.n)

    def _local(self) -> tuple[PhaseState, PhaseState]:
        """Sagittal and stance-frame lateral state relative to the stance foot."""
        s = self.stance.sign
        x, y, vx, vy = self.com
        return PhaseState(x - self.foot[0], vx), PhaseState(s * (y - self.foot[1]), s * vy)

    def _finish(self, outcome: str, cause: Optional[str] = None) -> None:
        if self.outcome is None:
            self.outcome, self.cause = outcome, cause

    # ------------------------------------------------------------- plant API
    def estimate(self, bb: Blackboard) -> bool:
        if self.tick != 0:
            self._sync(bb)
            return False
        self._apply_events()
        self._sync(bb)
        sag, lat = self._local()
        try:
            k = Keyframe(classify_axis(sag, self.params), classify_lateral(lat, self.params), self.stance)
        except OutOfRange:
            bb.failure = OUT_OF_BOUND
            return True
        if self.planned_next is not None and k != self.planned_next and not self.pushed_since_decision:
            self.mismatches.append({"step": self.step, "expected": self.planned_next.key(), "actual": k.key()})
        self.current_k = k
        self.keyframes.append(k)
        if self.affected is not None and self.step >= self.affected:
            if is_steady_state(k):
                self.recovery_steps = self.step - self.affected
                self._finish(RECOVERED)
            elif self.step - self.affected >= self.cfg.window:
                self._finish(FAILED, PLAN_EXHAUSTED)
        return True

    def game_state(self, bb: Blackboard) -> GameState:
        k = self.current_k
        if self.gs is None:
            pushed = self.pushed_since_decision and not is_steady_state(k)
            self.gs = GameState(k, 0, pushed, successor_counter(k, pushed, 0))
        else:
            # any unplanned keyframe is an environment move, pushed or not
            pushed = k != self.planned_next
            width = self.actions[-1].width_class
            self.gs = GameState(k, width, pushed, successor_counter(k, pushed, self.gs.counter))
        self.pushed_since_decision = False
        return self.gs

    def start_ows(self, bb: Blackboard, k_c: Keyframe, k_n: Keyframe) -> bool:
        p = self.params
        if k_c != self.current_k:
            bb.failure = INFEASIBLE_TRANSITION
            return False
        rec = self.table.lookup(k_c.sag, k_c.lat, k_n.sag)
        if rec is None or not rec.feasible or rec.lat_n != k_n.lat:
            bb.failure = INFEASIBLE_TRANSITION
            return False
        action = SystemAction(k_n.sag, k_n.lat, rec.length_idx, rec.width_idx)
        sag, lat = self._local()
        L = p.step_lengths[action.length_idx]
        target = k_n.sag.center(p)
        try:
            timing = solve_ows_timing(sag, target, 0.0, L, p)
        except NoSwitchPoint:
            bb.failure = NO_APEX_CROSSING
            return False
        # aim at the cell center the next table entry was certified from
        aim = lateral_center(k_n.lat, p)
        sw = lipm_flow(lat, 0.0, timing.t1, p)
        foot_lat = place_lateral_foot(sw, timing.t2, aim, p)
        s = self.stance.sign
        foot_n = (self.foot[0] + L, self.foot[1] + s * foot_lat)
        ows = OwsExecution(
            step=self.step, transition=(k_c, k_n), action=action, foot_c=self.foot, foot_n=foot_n,
            x_switch=self.foot[0] + timing.switch_state.p, t1=timing.t1, t2=timing.t2,
            target_n=target, ticks_per_half=self.n, lat_target=aim,
        )
        x, y, vx, vy = self.com
        ows.ref_energy = (orbital_energy(PhaseState(x, vx), self.foot[0], p),
                          orbital_energy(PhaseState(y, vy), self.foot[1], p))
        bb.ows = ows
        self.actions.append(action)
        self.plans.append(list(bb.plan))
        self.planned_next = k_n
        return True

    def advance(self, bb: Blackboard) -> None:
        ows = bb.ows
        p = self.params
        fx, fy = ows.active_foot()
        x, y, vx, vy = self.com
        dt = ows.tick_dt
        sx = lipm_flow(PhaseState(x, vx), fx, dt, p)
        sy = lipm_flow(PhaseState(y, vy), fy, dt, p)
        self.com = [sx.p, sy.p, sx.v, sy.v]
        self.time += dt
        ows.elapsed += dt
        ows.tick += 1
        self.tick += 1
        if self.tick == self.n:
            # contact switch
            self.foot = ows.foot_n
            ows.tick_dt = ows.t2 / self.n
            ows.ref_energy = (orbital_energy(sx, ows.foot_n[0], p), orbital_energy(sy, ows.foot_n[1], p))
        elif self.tick == 2 * self.n:
            self.step += 1
            self.tick = 0
            self.stance = self.stance.other
        if self.tick != 0:
            self._apply_events()
        self._sync(bb)

    def done(self, bb: Blackboard) -> bool:
        if self.outcome is not None:
            return True
        if self.step >= self.cfg.max_steps and self.tick == 0:
            return True
        return False

    def trace_fields(self, bb: Blackboard) -> dict:
        out = {"com": list(self.com), "foot": list(self.foot), "stance": self.stance.value}
        if self.tick_events:
            out["events"] = self.tick_events
        return out


def check_consistency(strategy_doc: dict, table_meta: dict, config_hash: str | None = None) -> None:
    """Refuse to pair a strategy with a table (or config) it was not synthesized from."""
    want = strategy_doc.get("table_sha256")
    if want and want != table_meta.get("csv_sha256"):
        raise ConfigMismatch("strategy was synthesized from a different feasibility table")
    if config_hash is not None and strategy_doc.get("config_hash") not in ("", None, config_hash):
        raise ConfigMismatch("strategy was synthesized under a different configuration")


def _fmt(obj) -> str:
    """JSON with every float written to 17 significant digits."""
    if isinstance(obj, bool) or obj is None:
        return json.dumps(obj)
    if isinstance(obj, float):
        if not math.isfinite(obj):
            raise ValueError("non-finite value in trace")
        return format(obj, ".17g")
    if isinstance(obj, (int, str)):
        return json.dumps(obj)
    if isinstance(obj, dict):
        return "{" + ", ".join(f"{json.dumps(str(k))}: {_fmt(v)}" for k, v in obj.items()) + "}"
    if isinstance(obj, (list, tuple)):
        return "[" + ", ".join(_fmt(v) for v in obj) + "]"
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def trace_to_jsonl(trace: Sequence[dict], summary: Optional[dict] = None) -> str:
    lines = [_fmt(rec) for rec in trace]
    if summary is not None:
        lines.append(_fmt({"summary": summary}))
    return "\n".join(lines) + "\n"


def run_episode(cfg: SimConfig, events: Sequence[PerturbationEvent], strategy: Strategy,
                table: FeasibilityTable, params: PipmParams, record: bool = False) -> EpisodeResult:
    plant = SimPlant(cfg, events, strategy, table, params)
    bb = Blackboard(params, table)
    _, trace = run_ows_loop(Pabt(), strategy, plant, bb, record=record)
    if plant.outcome is None:
        if bb.failure is not None:
            plant._finish(FAILED, bb.failure)
        elif plant.affected is None and plant.keyframes and is_steady_state(plant.keyframes[-1]):
            plant._finish(RECOVERED)
        else:
            plant._finish(FAILED, PLAN_EXHAUSTED)
    if plant.outcome == RECOVERED and bb.failure is not None:
        plant.outcome, plant.cause = FAILED, bb.failure
    return EpisodeResult(plant.outcome, plant.cause, plant.recovery_steps, plant.keyframes, plant.actions,
                         plant.plans, bb.recalc_count, trace, plant.mismatches)


# --------------------------------------------------------------------------
# sweeps
# --------------------------------------------------------------------------

@dataclass
class SweepContext:
    cfg: SimConfig
    strategy: Strategy
    table: FeasibilityTable
    params: PipmParams
    push_step: int = 2


_CTX: Optional[SweepContext] = None


def _init_worker(ctx: SweepContext) -> None:
    global _CTX
    _CTX = ctx


def _episode_ok(ctx: SweepContext, direction: float, magnitude: float, phase: float) -> bool:
    ev = [] if magnitude == 0 else [PerturbationEvent(phase, direction, magnitude, ctx.push_step)]
    cfg = ctx.cfg
    steps = ctx.push_step + cfg.window + 2
    if cfg.max_steps != steps:
        cfg = SimConfig(cfg.dt, cfg.step_time, steps, cfg.window)
    return run_episode(cfg, ev, ctx.strategy, ctx.table, ctx.params).recovered


def _rate_job(args: tuple) -> float:
    return 1.0 if _episode_ok(_CTX, *args) else 0.0


def _envelope_job(args: tuple) -> tuple[float, list[float]]:
    return max_recoverable_disturbance(_CTX, *args)


def _map(ctx: SweepContext, fn, jobs_args: list, jobs: int) -> list:
    if jobs > 1:
        with get_context("fork").Pool(jobs, initializer=_init_worker, initargs=(ctx,)) as pool:
            return pool.map(fn, jobs_args, chunksize=4)
    _init_worker(ctx)
    return [fn(a) for a in jobs_args]


@dataclass
class SweepGrid:
    mode: str                                   # "rate" or "envelope"
    directions: list[float]
    magnitudes: list[float]
    phases: list[float]
    values: dict[tuple, float]                  # (direction, magnitude|None, phase) -> value
    pockets: dict[tuple, list[float]] = field(default_factory=dict)

    def to_csv(self) -> str:
        if self.mode == "rate":
            lines = ["direction_deg,magnitude,phase,success"]
            for d in self.directions:
                for m in self.magnitudes:
                    for ph in self.phases:
                        lines.append(f"{d:.17g},{m:.17g},{ph:.17g},{self.values[(d, m, ph)]:.17g}")
        else:
            lines = ["direction_deg,phase,max_magnitude,pockets"]
            for d in self.directions:
                for ph in self.phases:
                    pk = ";".join(f"{v:.17g}" for v in self.pockets.get((d, None, ph), []))
                    lines.append(f"{d:.17g},{ph:.17g},{self.values[(d, None, ph)]:.17g},{pk}")
        return "\n".join(lines) + "\n"

    def monotonicity_violations(self) -> list[tuple]:
        out = []
        if self.mode != "rate":
            return out
        ms = sorted(self.magnitudes)
        for d in self.directions:
            for ph in self.phases:
                for a, b in zip(ms, ms[1:]):
                    if self.values[(d, b, ph)] > self.values[(d, a, ph)]:
                        out.append((d, ph, a, b))
        return out


def sweep_success_rate(ctx: SweepContext, directions: Sequence[float], magnitudes: Sequence[float],
                       phases: Sequence[float], jobs: int = 1) -> SweepGrid:
    cells = [(d, m, ph) for d in directions for m in magnitudes for ph in phases]
    vals = _map(ctx, _rate_job, cells, jobs)
    return SweepGrid("rate", list(directions), list(magnitudes), list(phases), dict(zip(cells, vals)))


def max_recoverable_disturbance(ctx: SweepContext, direction: float, phase: float, hi: float = 1.0,
                                resolution: float = 0.005, pocket_step: float = 0.05) -> tuple[float, list[float]]:
    """Largest recoverable push magnitude by bisection, plus failing magnitudes below it.

    The second value lists coarse-grid magnitudes under the returned envelope
    that nevertheless fail (non-monotone pockets).
    """
    if not _episode_ok(ctx, direction, 0.0, phase):
        return 0.0, []
    if _episode_ok(ctx, direction, hi, phase):
        lo = hi
    else:
        lo = 0.0
        while hi - lo > resolution:
            mid = 0.5 * (lo + hi)
            if _episode_ok(ctx, direction, mid, phase):
                lo = mid
            else:
                hi = mid
    pockets = []
    if pocket_step > 0:
        m = pocket_step
        while m < lo:
            if not _episode_ok(ctx, direction, m, phase):
                pockets.append(m)
            m = round(m + pocket_step, 12)
    return lo, pockets


def sweep_envelope(ctx: SweepContext, directions: Sequence[float], phases: Sequence[float], jobs: int = 1,
                   hi: float = 1.0, resolution: float = 0.005, pocket_step: float = 0.05) -> SweepGrid:
    cells = [(d, ph) for d in directions for ph in phases]
    res = _map(ctx, _envelope_job, [(d, ph, hi, resolution, pocket_step) for d, ph in cells], jobs)
    values = {(d, None, ph): r[0] for (d, ph), r in zip(cells, res)}
    pockets = {(d, None, ph): r[1] for (d, ph), r in zip(cells, res) if r[1]}
    return SweepGrid("envelope", list(directions), [], list(phases), values, pockets)


def direction_grid(count: int, offset: float = 15.0) -> list[float]:
    """Evenly spaced push directions in degrees, offset so that no direction is purely sagittal."""
    step = 360.0 / count
    return [round(offset + i * step, 12) for i in range(count)]


def episodes(events_list: Iterable[Sequence[PerturbationEvent]], ctx: SweepContext) -> list[EpisodeResult]:
    return [run_episode(ctx.cfg, ev, ctx.strategy, ctx.table, ctx.params) for ev in events_list]
