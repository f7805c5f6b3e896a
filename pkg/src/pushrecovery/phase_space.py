"""Closed-form LIPM phase-space planning.

Everything here works on one axis at a time. States are ``PhaseState(p, v)``;
unless a docstring says otherwise ``p`` is an absolute coordinate and the
pendulum pivot (stance foot) is passed separately.

Lateral quantities used for keyframes are expressed in the *stance frame*:
the stance foot sits at the origin and the positive direction points inward,
toward the swing side of the body. A negative lateral velocity therefore moves
the CoM toward the stance leg, which is what forces a crossed-leg step.
"""

from __future__ import annotations

import enum
import functools
import itertools
import math
from dataclasses import dataclass, field
from typing import Iterator, NamedTuple

POS_NAMES = {-1: "negative", 0: "zero", 1: "positive"}
VEL_NAMES = {0: "zero", 1: "slow", 2: "medium", 3: "fast"}

# Log-form time of flight falls back to bisection below this argument size.
_LOG_GUARD = 1e-12


class NoSwitchPoint(ValueError):
    """The two pendulum phases of a step cannot be joined."""


class NoApexCrossing(ValueError):
    """A disturbed state never reaches the apex over the given foot."""


class OutOfRange(ValueError):
    """A state lies outside the modeled Riemannian partition."""


class PhaseState(NamedTuple):
    p: float
    v: float


class Stance(str, enum.Enum):
    LEFT = "left"
    RIGHT = "right"

    @property
    def sign(self) -> int:
        # world +y is left; inward for the right foot is +y
        return 1 if self is Stance.RIGHT else -1

    @property
    def other(self) -> "Stance":
        return Stance.LEFT if self is Stance.RIGHT else Stance.RIGHT


@dataclass(frozen=True)
class PipmParams:
    g: float = 9.81
    h_apex: float = 1.0
    step_time: float = 0.4
    v_centers: tuple[float, ...] = (0.0, 0.25, 0.5, 0.75)
    p_centers: tuple[float, ...] = (-0.1, 0.0, 0.1)
    step_lengths: tuple[float, ...] = (0.25, 0.35, 0.45)
    step_widths: tuple[float, ...] = (0.10, 0.20, 0.30)
    min_phase_time: float = 0.15

    def __post_init__(self) -> None:
        if not self.g > 0 or not self.h_apex > 0 or not self.step_time > 0:
            raise ValueError("g, h_apex and step_time must be positive")
        vc, pc = self.v_centers, self.p_centers
        if len(vc) != 4 or vc[0] != 0.0 or any(b <= a for a, b in zip(vc, vc[1:])):
            raise ValueError("v_centers must be 4 strictly increasing values starting at 0")
        if len(pc) != 3 or any(b <= a for a, b in zip(pc, pc[1:])):
            raise ValueError("p_centers must be 3 strictly increasing values")
        if abs(pc[0] + pc[2]) > 1e-12 or abs(pc[1]) > 1e-12:
            raise ValueError("p_centers must be symmetric about 0")
        if len(self.step_lengths) != 3 or len(self.step_widths) != 3:
            raise ValueError("need 3 step lengths and 3 step widths")
        if min(self.step_lengths) <= 0 or min(self.step_widths) <= 0:
            raise ValueError("step lengths and widths must be positive")

    @property
    def omega(self) -> float:
        return math.sqrt(self.g / self.h_apex)

    @property
    def v_max(self) -> float:
        """Largest |v| still inside the partition (fast center + half gap)."""
        vc = self.v_centers
        return vc[3] + 0.5 * (vc[3] - vc[2])


@dataclass(frozen=True, order=True)
class RiemannianCell:
    """One Riemannian cell. ``vel`` is signed only on the lateral axis."""

    pos: int
    vel: int

    def __post_init__(self) -> None:
        if self.pos not in POS_NAMES or abs(self.vel) not in VEL_NAMES:
            raise ValueError(f"bad cell {self.pos}, {self.vel}")

    @property
    def pos_class(self) -> str:
        return POS_NAMES[self.pos]

    @property
    def vel_class(self) -> str:
        name = VEL_NAMES[abs(self.vel)]
        return "toward-" + name if self.vel < 0 else name

    @property
    def speed(self) -> int:
        return abs(self.vel)

    def center(self, params: PipmParams) -> PhaseState:
        v = math.copysign(params.v_centers[abs(self.vel)], self.vel) if self.vel else 0.0
        return PhaseState(params.p_centers[self.pos + 1], v)

    def label(self) -> str:
        return f"{self.pos_class}/{self.vel_class}"


@dataclass(frozen=True, order=True)
class Keyframe:
    sag: RiemannianCell
    lat: RiemannianCell
    stance: Stance = field(default=Stance.RIGHT)

    def __post_init__(self) -> None:
        if self.sag.vel < 0:
            raise ValueError("sagittal velocity classes are unsigned")

    @property
    def cells(self) -> tuple[RiemannianCell, RiemannianCell]:
        return (self.sag, self.lat)

    def key(self) -> str:
        return f"{self.sag.pos},{self.sag.vel}|{self.lat.pos},{self.lat.vel}|{self.stance.value}"

    @classmethod
    def from_key(cls, key: str) -> "Keyframe":
        sag, lat, stance = key.split("|")
        sp, sv = (int(s) for s in sag.split(","))
        lp, lv = (int(s) for s in lat.split(","))
        return cls(RiemannianCell(sp, sv), RiemannianCell(lp, lv), Stance(stance))


def sagittal_cells() -> list[RiemannianCell]:
    return [RiemannianCell(p, v) for p in (-1, 0, 1) for v in range(4)]


def lateral_cells() -> list[RiemannianCell]:
    return [RiemannianCell(p, v) for p in (-1, 0, 1) for v in range(-3, 4)]


def all_keyframes() -> Iterator[Keyframe]:
    for sag, lat, st in itertools.product(sagittal_cells(), lateral_cells(), Stance):
        yield Keyframe(sag, lat, st)


def is_steady_state(k: Keyframe) -> bool:
    return k.sag.pos == 0 and k.lat.vel == 0


# --------------------------------------------------------------------------
# pendulum flow
# --------------------------------------------------------------------------

def lipm_flow(state: PhaseState, foot: float, t: float, params: PipmParams) -> PhaseState:
    w = params.omega
    d0 = state.p - foot
    c, s = math.cosh(w * t), math.sinh(w * t)
    return PhaseState(foot + d0 * c + state.v / w * s, d0 * w * s + state.v * c)


def orbital_energy(state: PhaseState, foot: float, params: PipmParams) -> float:
    d = state.p - foot
    return state.v * state.v - params.omega ** 2 * d * d


def time_of_flight(start: PhaseState, end: PhaseState, foot: float, params: PipmParams) -> float:
    """Time for the flow under ``foot`` to carry ``start`` to ``end``.

    Both states must lie on the same orbit. Uses the logarithmic closed form and
    drops to bisection on ``lipm_flow`` when the log argument degenerates.
    """
    w = params.omega
    num = w * (end.p - foot) + end.v
    den = w * (start.p - foot) + start.v
    if abs(num) >= _LOG_GUARD and abs(den) >= _LOG_GUARD and num / den > 0:
        return math.log(num / den) / w
    return _bisect_time(start, end.p, foot, params)


def _bisect_time(start: PhaseState, p_target: float, foot: float, params: PipmParams) -> float:
    direction = 1.0 if p_target >= start.p else -1.0

    def gap(t: float) -> float:
        return direction * (lipm_flow(start, foot, t, params).p - p_target)

    if gap(0.0) >= 0.0:
        return 0.0
    hi = 1.0 / params.omega
    while gap(hi) < 0.0:
        hi *= 2.0
        if hi > 1e3:
            raise NoSwitchPoint("target position is never reached")
    lo = 0.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if gap(mid) < 0.0:
            lo = mid
        else:
            hi = mid
        if hi - lo < 1e-15:
            break
    return 0.5 * (lo + hi)


# --------------------------------------------------------------------------
# one walking step
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class OwsTiming:
    t1: float
    t2: float
    switch_state: PhaseState

    def __post_init__(self) -> None:
        if not (self.t1 > 0 and self.t2 > 0):
            raise ValueError("OWS phases must have positive duration")

    @property
    def duration(self) -> float:
        return self.t1 + self.t2


def _min_speed_sq(energy: float, foot: float, a: float, b: float, params: PipmParams) -> float:
    lo, hi = min(a, b), max(a, b)
    nearest = min(max(foot, lo), hi)
    return energy + params.omega ** 2 * (nearest - foot) ** 2


def solve_ows_timing(
    kf_current: PhaseState,
    kf_next: PhaseState,
    foot_current: float,
    foot_next: float,
    params: PipmParams,
) -> OwsTiming:
    """Contact-switch timing between two sagittal keyframes.

    Keyframe states are relative to their own foot (``p`` is the CoM offset).
    The switch position comes from equating the squared speeds of the two
    pendulum orbits, which is linear in position.
    """
    w2 = params.omega ** 2
    step = foot_next - foot_current
    if abs(step) < 1e-12:
        raise NoSwitchPoint("footholds coincide")
    if kf_current.v < 0 or kf_next.v < 0:
        raise NoSwitchPoint("sagittal keyframes must move forward")
    e1 = kf_current.v ** 2 - w2 * kf_current.p ** 2
    e2 = kf_next.v ** 2 - w2 * kf_next.p ** 2
    x_sw = 0.5 * (foot_current + foot_next) + (e2 - e1) / (2.0 * w2 * step)
    x_cur = foot_current + kf_current.p
    x_nxt = foot_next + kf_next.p
    if not (x_cur <= x_sw <= x_nxt):
        raise NoSwitchPoint("switch point lies outside the step")
    v_sw_sq = e1 + w2 * (x_sw - foot_current) ** 2
    if v_sw_sq <= 0.0:
        raise NoSwitchPoint("zero speed at the switch point")
    # the CoM must keep moving forward through both phases
    if kf_current.v == 0.0 and kf_current.p <= 0.0:
        raise NoSwitchPoint("current keyframe does not move forward")
    if x_sw > x_cur and _min_speed_sq(e1, foot_current, x_cur, x_sw, params) <= 0.0:
        raise NoSwitchPoint("first phase stalls before the switch")
    if x_nxt > x_sw and kf_next.v == 0.0 and kf_next.p >= 0.0:
        raise NoSwitchPoint("next apex is only reached asymptotically")
    if _min_speed_sq(e2, foot_next, x_sw, x_nxt, params) <= 0.0 and kf_next.v > 0.0:
        raise NoSwitchPoint("second phase stalls before the apex")
    v_sw = math.sqrt(v_sw_sq)
    sw = PhaseState(x_sw, v_sw)
    t1 = time_of_flight(PhaseState(x_cur, kf_current.v), sw, foot_current, params)
    t2 = time_of_flight(sw, PhaseState(x_nxt, kf_next.v), foot_next, params)
    if not (t1 > 0.0 and t2 > 0.0) or not math.isfinite(t1 + t2):
        raise NoSwitchPoint("degenerate step duration")
    return OwsTiming(t1, t2, sw)


def choose_step_length(kf_current: PhaseState, kf_next: PhaseState, params: PipmParams) -> int:
    """Index into ``step_lengths`` for a sagittal keyframe pair.

    Lengths whose two phases both last at least ``min_phase_time`` are
    preferred, and among those the one with duration closest to ``step_time``.
    If no length leaves enough swing time, the one with the longest shorter
    phase is taken.
    """
    ranked = []
    for i, length in enumerate(params.step_lengths):
        try:
            timing = solve_ows_timing(kf_current, kf_next, 0.0, length, params)
        except NoSwitchPoint:
            continue
        short = min(timing.t1, timing.t2)
        ok = short >= params.min_phase_time
        key = abs(timing.duration - params.step_time) if ok else -short
        ranked.append((not ok, key, i))
    if not ranked:
        raise NoSwitchPoint("no step length admits a switch point")
    return min(ranked)[2]


def lateral_foot_placement(
    switch_lateral: PhaseState, t2: float, params: PipmParams, v_target: float = 0.0
) -> float:
    """Lateral foothold that brings the lateral CoM velocity to ``v_target`` after ``t2``.

    With the default target this is the apex placement: the lateral flow from the
    switch state under the returned foothold has zero velocity at ``t2``.
    """
    if t2 < 0:
        raise ValueError("t2 must be non-negative")
    w = params.omega
    s, c = math.sinh(w * t2), math.cosh(w * t2)
    if s == 0.0:
        if switch_lateral.v != v_target:
            raise ValueError("velocity cannot change over a zero-length phase")
        return switch_lateral.p
    # v(t2) = (p_sw - foot) w sinh + v_sw cosh
    return switch_lateral.p - (v_target - switch_lateral.v * c) / (w * s)


def manifold_value(state: PhaseState, foot: float, params: PipmParams) -> float:
    """Tangent-manifold coordinate of a state with respect to ``foot``."""
    d = state.p - foot
    return d * d * (state.v ** 2 - params.omega ** 2 * d * d)


def position_guard_recalc(disturbed: PhaseState, foot: float, params: PipmParams) -> PhaseState:
    """Apex state over ``foot`` reached from a disturbed state, foothold kept.

    The root of the biquadratic is the one that lies on the disturbed state's
    orbital-energy manifold.
    """
    w2 = params.omega ** 2
    d = disturbed.p - foot
    v2 = disturbed.v ** 2
    if disturbed.v <= 0.0 or v2 <= w2 * d * d:
        raise NoApexCrossing("state does not pass over the foot")
    sigma = manifold_value(disturbed, foot, params)
    disc = max(v2 * v2 - 4.0 * w2 * sigma, 0.0)
    root = math.sqrt(disc)
    # disc == (v^2 - 2 w^2 d^2)^2; pick the sign that reproduces that square root
    if v2 < 2.0 * w2 * d * d:
        root = -root
    return PhaseState(foot, math.sqrt(0.5 * (v2 + root)))


# --------------------------------------------------------------------------
# classification
# --------------------------------------------------------------------------

def _nearest(value: float, centers: tuple[float, ...]) -> int:
    # thresholds at midpoints, ties go to the lower cell
    idx = 0
    for i in range(1, len(centers)):
        if value > 0.5 * (centers[i - 1] + centers[i]):
            idx = i
    return idx


def classify_axis(rel: PhaseState, params: PipmParams, signed: bool = False) -> RiemannianCell:
    """Cell of a foot-relative state (``rel.p`` is the offset from the reference)."""
    speed = abs(rel.v)
    if speed > params.v_max or not math.isfinite(speed) or not math.isfinite(rel.p):
        raise OutOfRange(f"|v| = {speed:.3f} outside the partition")
    pos = _nearest(rel.p, params.p_centers) - 1
    vel = _nearest(speed, params.v_centers)
    if signed and rel.v < 0:
        vel = -vel
    return RiemannianCell(pos, vel)


def classify_cell(apex: PhaseState, foot: float, params: PipmParams) -> RiemannianCell:
    """Sagittal cell of an absolute state relative to ``foot``."""
    return classify_axis(PhaseState(apex.p - foot, apex.v), params)


@functools.lru_cache(maxsize=64)
def nominal_gait(params: PipmParams) -> tuple[int, OwsTiming, float]:
    """Steady walking at the medium speed and medium width.

    Returns (step-length index, timing, lateral apex offset). The offset is the
    inward distance of the CoM from the stance foot at the apex of a periodic
    lateral gait, used as the origin of lateral position classes.
    """
    apex = PhaseState(0.0, params.v_centers[2])
    idx = choose_step_length(apex, apex, params)
    timing = solve_ows_timing(apex, apex, 0.0, params.step_lengths[idx], params)
    width = params.step_widths[1]
    offset = width / (2.0 * math.cosh(params.omega * timing.t1))
    return idx, timing, offset


def lateral_offset(params: PipmParams) -> float:
    return nominal_gait(params)[2]


def classify_lateral(rel: PhaseState, params: PipmParams) -> RiemannianCell:
    """Lateral cell of a stance-frame state (``rel.p`` inward offset from the foot)."""
    return classify_axis(PhaseState(rel.p - lateral_offset(params), rel.v), params, signed=True)


def lateral_center(cell: RiemannianCell, params: PipmParams) -> PhaseState:
    """Stance-frame state at the center of a lateral cell."""
    c = cell.center(params)
    return PhaseState(c.p + lateral_offset(params), c.v)


def next_lateral_keyframe(
    timing: OwsTiming, lateral_now: PhaseState, foot_now: float, params: PipmParams
) -> tuple[PhaseState, float]:
    """Flow lateral state to the switch, place the next foot, flow to its apex."""
    sw = lipm_flow(lateral_now, foot_now, timing.t1, params)
    foot = lateral_foot_placement(sw, timing.t2, params)
    return lipm_flow(sw, foot, timing.t2, params), foot


# --------------------------------------------------------------------------
# step planning shared by trajectory optimization and simulation
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class StepPlan:
    """A planned OWS in the current stance frame (stance foot at the origin)."""

    timing: OwsTiming
    step_length: float
    foot_lat: float            # signed lateral foothold, inward positive
    lat_switch: PhaseState     # lateral state at the contact switch
    sag_next: PhaseState       # next sagittal keyframe, relative to the new foot
    lat_next: PhaseState       # next lateral keyframe in the new stance frame

    @property
    def crossed(self) -> bool:
        return self.foot_lat < 0.0


def plan_step(
    sag: PhaseState,
    lat: PhaseState,
    sag_target: PhaseState,
    step_length: float,
    foot_lat: float,
    params: PipmParams,
) -> StepPlan:
    """Execute a step geometry from stance-frame keyframe states.

    ``sag`` and ``lat`` are relative to the current stance foot; the new foot
    goes to (``step_length``, ``foot_lat``). The returned next lateral state is
    mirrored into the new stance frame.
    """
    timing = solve_ows_timing(sag, sag_target, 0.0, step_length, params)
    sw = lipm_flow(lat, 0.0, timing.t1, params)
    apex = lipm_flow(sw, foot_lat, timing.t2, params)
    # new stance frame: origin at the new foot, inward axis flipped
    lat_next = PhaseState(foot_lat - apex.p, -apex.v)
    return StepPlan(timing, step_length, foot_lat, sw, sag_target, lat_next)


def ideal_foot_lat(
    sag: PhaseState, lat: PhaseState, sag_target: PhaseState, step_length: float,
    params: PipmParams, v_target: float = 0.0,
) -> float:
    """Stance-frame lateral foothold reaching ``v_target`` (new-frame sign) at the apex."""
    timing = solve_ows_timing(sag, sag_target, 0.0, step_length, params)
    sw = lipm_flow(lat, 0.0, timing.t1, params)
    # the new frame flips the inward axis, so the old-frame target is -v_target
    return lateral_foot_placement(sw, timing.t2, params, -v_target)
