"""Perturbation-aware behavior tree (PABT).

A root fallback holds one locomotion subtree per planned keyframe transition.
Each subtree checks that its transition is the desired one, makes sure the CoM
is still on the planned pendulum manifolds (recalculating the next keyframe
with the position guard if not), and then runs the one-walking-step (OWS)
execution. The plant, usually the simulator, owns the continuous dynamics.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Protocol

from .phase_space import (
    Keyframe, NoApexCrossing, NoSwitchPoint, OutOfRange, PhaseState, PipmParams, Stance,
    classify_axis, classify_lateral, lipm_flow, orbital_energy,
    position_guard_recalc, time_of_flight,
)
from .synthesis import OutsideWinningRegion, Strategy, SystemAction, rollout
from .traj_opt.table import FeasibilityTable

Transition = tuple[Keyframe, Keyframe]

# failure causes shared with the simulator
NO_APEX_CROSSING = "no_apex_crossing"
INFEASIBLE_TRANSITION = "infeasible_transition"
OUT_OF_BOUND = "out_of_bound"
PLAN_EXHAUSTED = "plan_exhausted"

MANIFOLD_TOL = 1e-6


class TickStatus(enum.Enum):
    SUCCESS = "success"
    FAILURE = "failure"
    RUNNING = "running"


class InfeasibleTransition(ValueError):
    pass


@dataclass(eq=False)
class BtNode:
    kind: str                                   # fallback, sequence, condition, action
    name: str
    children: list["BtNode"] = field(default_factory=list)
    fn: Optional[Callable] = None

    def __post_init__(self) -> None:
        if self.kind in ("fallback", "sequence") and not self.children:
            raise ValueError("composite nodes need at least one child")


def Fallback(name: str, *children: BtNode) -> BtNode:
    return BtNode("fallback", name, list(children))


def Sequence(name: str, *children: BtNode) -> BtNode:
    return BtNode("sequence", name, list(children))


def Condition(name: str, predicate: Callable[["Blackboard"], bool]) -> BtNode:
    return BtNode("condition", name, fn=predicate)


def Action(name: str, effect: Callable[["Blackboard"], TickStatus]) -> BtNode:
    return BtNode("action", name, fn=effect)


def tick(node: BtNode, bb: "Blackboard", trail: list[str] | None = None) -> TickStatus:
    """Memoryless tick; ``trail`` collects the names of evaluated leaves."""
    if node.kind == "fallback":
        for child in node.children:
            st = tick(child, bb, trail)
            if st is not TickStatus.FAILURE:
                return st
        return TickStatus.FAILURE
    if node.kind == "sequence":
        for child in node.children:
            st = tick(child, bb, trail)
            if st is not TickStatus.SUCCESS:
                return st
        return TickStatus.SUCCESS
    if trail is not None:
        trail.append(node.name)
    if node.kind == "condition":
        return TickStatus.SUCCESS if node.fn(bb) else TickStatus.FAILURE
    return node.fn(bb)


# --------------------------------------------------------------------------
# blackboard and OWS execution state
# --------------------------------------------------------------------------

@dataclass
class OwsExecution:
    """One OWS in progress, in world coordinates. Mutated by recalculation."""

    step: int
    transition: Transition
    action: SystemAction
    foot_c: tuple[float, float]
    foot_n: tuple[float, float]
    x_switch: float
    t1: float
    t2: float
    target_n: PhaseState                 # next sagittal keyframe relative to foot_n
    ticks_per_half: int
    lat_target: PhaseState = PhaseState(0.0, 0.0)   # planned lateral apex, next stance frame
    tick: int = 0
    tick_dt: float = 0.0
    elapsed: float = 0.0
    ref_energy: tuple[float, float] = (0.0, 0.0)
    recalcs: int = 0

    def __post_init__(self) -> None:
        if self.tick_dt == 0.0:
            self.tick_dt = self.t1 / self.ticks_per_half

    @property
    def stance(self) -> Stance:
        return self.transition[0].stance

    @property
    def switched(self) -> bool:
        return self.tick >= self.ticks_per_half

    @property
    def phase(self) -> float:
        return self.tick / (2 * self.ticks_per_half)

    def active_foot(self) -> tuple[float, float]:
        return self.foot_n if self.switched else self.foot_c


@dataclass
class Blackboard:
    params: PipmParams
    table: FeasibilityTable
    com: tuple[float, float, float, float] = (0.0, 0.0, 0.0, 0.0)    # x, y, vx, vy
    stance: Stance = Stance.RIGHT
    phase: float = 0.0
    time: float = 0.0
    step: int = 0
    desired: Optional[Transition] = None
    modified: Optional[Transition] = None
    ows: Optional[OwsExecution] = None
    plant: Optional["Plant"] = None
    failure: Optional[str] = None
    active: Optional[Transition] = None
    recalc_count: int = 0
    plan: list[Transition] = field(default_factory=list)

    def get_modified_transition(self) -> Optional[Transition]:
        return self.modified if self.modified is not None else self.desired


class Plant(Protocol):
    def estimate(self, bb: Blackboard) -> bool: ...
    def game_state(self, bb: Blackboard): ...
    def start_ows(self, bb: Blackboard, k_c: Keyframe, k_n: Keyframe) -> bool: ...
    def advance(self, bb: Blackboard) -> None: ...
    def done(self, bb: Blackboard) -> bool: ...
    def trace_fields(self, bb: Blackboard) -> dict: ...


# --------------------------------------------------------------------------
# manifold check and position-guard recalculation
# --------------------------------------------------------------------------

def manifold_deviation(bb: Blackboard) -> float:
    """Largest normalized orbital-energy drift from the planned manifolds (both axes)."""
    ows = bb.ows
    if ows is None or ows.step != bb.step:
        return 0.0
    p = bb.params
    fx, fy = ows.active_foot()
    x, y, vx, vy = bb.com
    e_sag = orbital_energy(PhaseState(x, vx), fx, p)
    e_lat = orbital_energy(PhaseState(y, vy), fy, p)
    scale = (p.omega * (p.p_centers[2] - p.p_centers[0])) ** 2
    return max(abs(e_sag - ows.ref_energy[0]), abs(e_lat - ows.ref_energy[1])) / scale


def on_nominal_manifold(bb: Blackboard) -> bool:
    return manifold_deviation(bb) <= MANIFOLD_TOL


@dataclass
class Recalculation:
    foot_n: tuple[float, float]  # next foothold; lateral part re-placed while still airborne
    t1: float                   # remaining first-phase time (0 once switched)
    t2: float                   # remaining (or full) second-phase time
    sag_next: PhaseState        # next sagittal keyframe relative to the next foot
    lat_next: PhaseState        # next lateral keyframe in the next stance frame
    k_next: Keyframe


def place_lateral_foot(switch_local: PhaseState, t2: float, target: PhaseState, params: PipmParams) -> float:
    """Stance-frame lateral foothold steering toward ``target``, the next lateral apex.

    ``target`` is expressed in the next stance frame. The apex velocity is hit
    exactly unless that pushes the apex position more than half a cell away
    from the target; the result is clipped to the reachable width range.
    """
    w = params.omega
    s, c = math.sinh(w * t2), math.cosh(w * t2)
    p, v = switch_local
    # next-frame apex is affine in the foothold: (c f + bp, w s f + bv)
    bp, bv = -p * c - v * s / w, -p * w * s - v * c
    foot = (target.v - bv) / (w * s) if s > 0 else p
    half = 0.5 * (params.p_centers[1] - params.p_centers[0])
    foot = min(max(foot, (target.p - half - bp) / c), (target.p + half - bp) / c)
    m = params.step_widths[-1] + 0.5 * (params.step_widths[-1] - params.step_widths[-2])
    return min(max(foot, -m), m)


def recalculate(ows: OwsExecution, com: tuple[float, float, float, float], params: PipmParams) -> Recalculation:
    """Position guard: keep the footholds and switch point, recompute the next apex.

    Raises NoApexCrossing when the CoM can no longer reach the switch point or
    the next apex, and OutOfRange when the new apex leaves the partition.
    """
    w2 = params.omega ** 2
    x, y, vx, vy = com
    (fcx, fcy), (fnx, fny) = ows.foot_c, ows.foot_n
    dn = ows.target_n.p
    if not ows.switched:
        d, dsw = x - fcx, ows.x_switch - fcx
        if d >= dsw:
            t1, sw = 0.0, PhaseState(x, vx)
        else:
            v_sw2 = vx * vx - w2 * d * d + w2 * dsw * dsw
            if vx <= 0.0 or v_sw2 <= 0.0:
                raise NoApexCrossing("CoM cannot reach the switch point")
            sw = PhaseState(ows.x_switch, math.sqrt(v_sw2))
            t1 = time_of_flight(PhaseState(x, vx), sw, fcx, params)
        start = PhaseState(sw.p - fnx, sw.v)
        lat_sw = lipm_flow(PhaseState(y, vy), fcy, t1, params)
    else:
        t1 = 0.0
        start = PhaseState(x - fnx, vx)
        lat_sw = PhaseState(y, vy)
    apex = position_guard_recalc(start, 0.0, params)
    v_n = math.sqrt(apex.v * apex.v + w2 * dn * dn)
    sag_next = PhaseState(dn, v_n)
    try:
        t2 = time_of_flight(start, sag_next, 0.0, params)
    except NoSwitchPoint as exc:
        raise NoApexCrossing("next keyframe unreachable") from exc
    if not (t2 >= 0.0 and math.isfinite(t2)):
        raise NoApexCrossing("next keyframe unreachable")
    if not ows.switched:
        s = ows.stance.sign
        local = PhaseState(s * (lat_sw.p - fcy), s * lat_sw.v)
        fny = fcy + s * place_lateral_foot(local, t2, ows.lat_target, params)
    lat = lipm_flow(lat_sw, fny, t2, params)
    side = ows.stance.other.sign
    lat_next = PhaseState(side * (lat.p - fny), side * lat.v)
    k_next = Keyframe(classify_axis(sag_next, params), classify_lateral(lat_next, params), ows.stance.other)
    return Recalculation((fnx, fny), t1, t2, sag_next, lat_next, k_next)


def riemannian_recalc_action(bb: Blackboard, params: PipmParams | None = None) -> TickStatus:
    """Recalculate the modified transition and check the Riemannian robustness bound."""
    params = params or bb.params
    ows = bb.ows
    bb.recalc_count += 1
    if ows is None or ows.step != bb.step:
        bb.modified = bb.desired
        return TickStatus.SUCCESS
    ows.recalcs += 1
    try:
        rc = recalculate(ows, bb.com, params)
    except NoApexCrossing:
        bb.failure = NO_APEX_CROSSING
        return TickStatus.FAILURE
    except OutOfRange:
        bb.failure = OUT_OF_BOUND
        return TickStatus.FAILURE
    k_c = ows.transition[0]
    if rc.sag_next.v > params.v_max:
        bb.failure = OUT_OF_BOUND
        return TickStatus.FAILURE
    rec = bb.table.lookup(k_c.sag, k_c.lat, rc.k_next.sag)
    if rec is None or not rec.feasible:
        bb.failure = INFEASIBLE_TRANSITION
        return TickStatus.FAILURE
    # re-time the remaining ticks so the switch and the keyframe stay on the grid
    n = ows.ticks_per_half
    if not ows.switched:
        ows.t1 = ows.elapsed + rc.t1
        ows.tick_dt = rc.t1 / (n - ows.tick)
        ows.t2 = rc.t2
    else:
        ows.t2 = ows.elapsed - ows.t1 + rc.t2
        ows.tick_dt = rc.t2 / (2 * n - ows.tick)
    ows.target_n = rc.sag_next
    ows.foot_n = rc.foot_n
    fx, fy = ows.active_foot()
    x, y, vx, vy = bb.com
    ows.ref_energy = (orbital_energy(PhaseState(x, vx), fx, params), orbital_energy(PhaseState(y, vy), fy, params))
    bb.modified = (k_c, rc.k_next)
    return TickStatus.SUCCESS


# --------------------------------------------------------------------------
# subtrees
# --------------------------------------------------------------------------

@dataclass
class LocomotionSubtree:
    k_c: Keyframe
    k_n: Keyframe
    root: BtNode

    @property
    def pair(self) -> Transition:
        return (self.k_c, self.k_n)


def make_locomotion_subtree(k_c: Keyframe, k_n: Keyframe, table: FeasibilityTable) -> LocomotionSubtree:
    if k_n.stance is not k_c.stance.other or not table.has_transition(k_c.sag, k_c.lat, k_n.sag, k_n.lat):
        raise InfeasibleTransition(f"{k_c.key()} -> {k_n.key()} is not in the feasibility table")
    label = f"{k_c.key()}->{k_n.key()}"

    def pre(bb: Blackboard) -> bool:
        return bb.desired == (k_c, k_n)

    def execute(bb: Blackboard) -> TickStatus:
        bb.active = (k_c, k_n)
        if bb.ows is not None and bb.ows.step == bb.step:
            return TickStatus.SUCCESS
        if bb.plant is None or not bb.plant.start_ows(bb, k_c, k_n):
            return TickStatus.FAILURE
        return TickStatus.SUCCESS

    root = Sequence(
        f"subtree {label}",
        Condition(f"pre {label}", pre),
        Fallback(f"guard {label}",
                 Condition(f"on-manifold {label}", on_nominal_manifold),
                 Action(f"recalc {label}", riemannian_recalc_action)),
        Action(f"ows {label}", execute),
    )
    return LocomotionSubtree(k_c, k_n, root)


@dataclass
class Pabt:
    subtrees: list[LocomotionSubtree] = field(default_factory=list)

    @property
    def root(self) -> BtNode:
        # most recently inserted first; an empty tree always fails
        kids = [s.root for s in self.subtrees] or [Condition("empty", lambda bb: False)]
        return Fallback("root", *kids)

    def __len__(self) -> int:
        return len(self.subtrees)

    def pairs(self) -> list[Transition]:
        return [s.pair for s in self.subtrees]


def insert_subtree(tree: Pabt, sub: LocomotionSubtree) -> Pabt:
    """Insert under the root, most recent first; re-inserting a pair moves it to the front."""
    tree.subtrees = [sub] + [s for s in tree.subtrees if s.pair != sub.pair]
    return tree


def insert_plan(tree: Pabt, transitions: list[Transition], table: FeasibilityTable) -> Pabt:
    # inserted in reverse so the first planned transition is ticked first
    for k_c, k_n in reversed(transitions):
        insert_subtree(tree, make_locomotion_subtree(k_c, k_n, table))
    return tree


# --------------------------------------------------------------------------
# execution loop
# --------------------------------------------------------------------------

def _key(t: Optional[Transition]) -> Optional[list[str]]:
    return None if t is None else [t[0].key(), t[1].key()]


def run_ows_loop(pabt: Pabt, strategy: Strategy, plant: Plant, bb: Blackboard,
                 record: bool = True) -> tuple[Pabt, list[dict]]:
    """Keyframe decision making and PABT execution until failure or episode end."""
    trace: list[dict] = []
    bb.plant = plant
    status = TickStatus.SUCCESS
    root = pabt.root
    while status is TickStatus.SUCCESS and not plant.done(bb):
        keyframe = plant.estimate(bb)
        plan_rec = None
        if bb.failure is not None:
            status = TickStatus.FAILURE
        elif keyframe:
            try:
                plan = rollout(strategy, plant.game_state(bb))
            except OutsideWinningRegion:
                bb.failure = OUT_OF_BOUND
                status = TickStatus.FAILURE
            else:
                bb.plan = plan.transitions
                insert_plan(pabt, bb.plan, bb.table)
                root = pabt.root
                bb.desired = bb.plan[0]
                bb.modified = bb.desired
                plan_rec = [_key(t) for t in bb.plan]
        if status is TickStatus.SUCCESS:
            status = tick(root, bb)
            if status is TickStatus.FAILURE and bb.failure is None:
                bb.failure = INFEASIBLE_TRANSITION
        if record:
            rec = {"t": bb.time, "phase": bb.phase, "step": bb.step, "status": status.value,
                   "active": _key(bb.active), "modified": _key(bb.get_modified_transition())}
            if plan_rec is not None:
                rec["plan"] = plan_rec
            rec.update(plant.trace_fields(bb))
            trace.append(rec)
        if status is TickStatus.SUCCESS:
            plant.advance(bb)
    return pabt, trace
