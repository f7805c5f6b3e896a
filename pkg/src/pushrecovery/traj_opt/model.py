"""Reduced-order collocation problem for one walking step.

Model: a point-mass CoM at constant height riding a linear inverted pendulum
over the stance foot, two massless straight legs from hips (offset laterally
from the CoM by half the pelvis width) to the feet, and a swing foot driven by
its acceleration. The step has two single-stance domains joined by an identity
reset. Node variables, per domain ``j`` and node ``i``::

    [cx, cy, cvx, cvy, sx, sy, sz, svx, svy, svz, ax, ay, az]

CoM, swing-foot position/velocity and swing-foot acceleration (the control).
Coordinates are in the frame of the initial stance foot A (at the origin);
``side`` = +1 puts the swing side at +y (right stance), -1 mirrors it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import null_space

from ..phase_space import PhaseState, PipmParams, StepPlan, lipm_flow

NX = 10
NU = 3
NZ = NX + NU
COM_POS = (0, 1)
COM_VEL = (2, 3)
SW_POS = (4, 5, 6)
SW_VEL = (7, 8, 9)
CTRL = (10, 11, 12)


class BadTransition(ValueError):
    pass


class DimensionMismatch(ValueError):
    pass


@dataclass(frozen=True)
class ReducedModelConfig:
    leg_min: float = 0.55
    leg_max: float = 1.12
    swing_acc_max: float = 100.0
    friction: float = 0.8
    d_min: float = 0.1
    pairs: int = 5
    nodes: int = 10
    pelvis_width: float = 0.2
    weights: tuple[float, float] = (1.0, 1.0)
    samples_per_interval: int = 5
    swing_clearance: float = 0.08
    # squared-distance margin added to the self-collision rows so that the
    # clearance still holds between the sampled instants
    backoff: float = 2e-4

    def __post_init__(self) -> None:
        if not self.d_min > 0 or self.pairs < 1 or self.nodes < 3 or not self.friction > 0:
            raise ValueError("need d_min > 0, M >= 1, N >= 3 and mu > 0")
        if self.backoff < 0:
            raise ValueError("backoff must be non-negative")
        if not 0 < self.leg_min < self.leg_max:
            raise ValueError("leg length bounds out of order")

    @property
    def fractions(self) -> np.ndarray:
        m = self.pairs
        return (np.arange(m) + 0.5) / m


@dataclass
class Domain:
    duration: float
    stance_foot: tuple[float, float]
    stance_hip: float      # lateral hip offset of the stance leg from the CoM
    swing_hip: float
    weight: float

    def step(self, nodes: int) -> float:
        return self.duration / (nodes - 1)


@dataclass
class TransitionGeometry:
    """Boundary data for one OWS: start keyframe (stance frame) and the planned step."""

    sag: PhaseState
    lat: PhaseState
    plan: StepPlan
    side: int = 1


def dynamics_matrices(omega: float, foot: tuple[float, float]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """x' = A x + B u + c for a domain with the given stance foot."""
    A = np.zeros((NX, NX))
    B = np.zeros((NX, NU))
    c = np.zeros(NX)
    w2 = omega * omega
    A[0, 2] = A[1, 3] = 1.0
    A[2, 0] = A[3, 1] = w2
    c[2], c[3] = -w2 * foot[0], -w2 * foot[1]
    for k in range(3):
        A[4 + k, 7 + k] = 1.0
        B[7 + k, k] = 1.0
    return A, B, c


def _hermite_basis(s: np.ndarray, h: float) -> tuple[np.ndarray, ...]:
    s2, s3 = s * s, s * s * s
    return (2 * s3 - 3 * s2 + 1, (s3 - 2 * s2 + s) * h, -2 * s3 + 3 * s2, (s3 - s2) * h)


@dataclass
class CollocationProblem:
    cfg: ReducedModelConfig
    params: PipmParams
    geometry: TransitionGeometry
    domains: list[Domain]
    x0: np.ndarray = field(repr=False)
    reset_map: str = "identity"

    def __post_init__(self) -> None:
        N = self.cfg.nodes
        self.n = len(self.domains) * N * NZ
        self._build_linear()
        self._build_sampling()

    # ---------------------------------------------------------------- layout
    @property
    def node_count(self) -> int:
        return len(self.domains) * self.cfg.nodes

    def idx(self, j: int, i: int, k: int) -> int:
        return (j * self.cfg.nodes + i) * NZ + k

    def unpack(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        if X.shape != (self.n,):
            raise DimensionMismatch(f"expected {self.n} variables, got {X.shape}")
        return X.reshape(len(self.domains), self.cfg.nodes, NZ)

    # ---------------------------------------------------------------- linear part
    def _build_linear(self) -> None:
        N, w = self.cfg.nodes, self.params.omega
        rows: list[np.ndarray] = []
        rhs: list[float] = []
        blocks = []
        for j, dom in enumerate(self.domains):
            A, B, c = dynamics_matrices(w, dom.stance_foot)
            h = dom.step(N)
            I = np.eye(NX)
            dxi = -I - h / 6 * (3 * A + h / 2 * A @ A)
            dui = -h / 6 * (3 * B + h / 2 * A @ B)
            dxn = I - h / 6 * (3 * A - h / 2 * A @ A)
            dun = -h / 6 * (3 * B - h / 2 * A @ B)
            for i in range(N - 1):
                M = np.zeros((NX, self.n))
                a, b = self.idx(j, i, 0), self.idx(j, i + 1, 0)
                M[:, a:a + NX] = dxi
                M[:, a + NX:a + NZ] = dui
                M[:, b:b + NX] = dxn
                M[:, b + NX:b + NZ] = dun
                blocks.append(M)
                rhs.extend(h * c)
        self.defect_matrix = np.vstack(blocks)
        self.defect_rhs = np.array(rhs)

        def pin(j: int, i: int, k: int, value: float, other: tuple[int, int, int] | None = None) -> None:
            r = np.zeros(self.n)
            r[self.idx(j, i, k)] = 1.0
            if other is not None:
                r[self.idx(*other)] -= 1.0
            rows.append(r)
            rhs_b.append(value)

        rhs_b: list[float] = []
        g = self.geometry
        plan, side = g.plan, g.side
        last = N - 1
        P2 = self.cfg.pelvis_width / 2
        # keyframe boundary at the start
        pin(0, 0, 0, g.sag.p)
        pin(0, 0, 2, g.sag.v)
        pin(0, 0, 1, side * g.lat.p)
        pin(0, 0, 3, side * g.lat.v)
        # swing foot B starts under its hip
        pin(0, 0, 4, 0.0, (0, 0, 0))
        pin(0, 0, 5, side * P2, (0, 0, 1))
        # touchdown at the planned foothold, at rest
        pin(0, last, 4, plan.step_length)
        pin(0, last, 5, side * plan.foot_lat)
        pin(0, last, 6, 0.0)
        for k in SW_VEL:
            pin(0, last, k, 0.0)
        # identity reset for the CoM; foot A lifts off from rest
        for k in COM_POS + COM_VEL:
            pin(1, 0, k, 0.0, (0, last, k))
        for k in SW_POS + SW_VEL:
            pin(1, 0, k, 0.0)
        # keyframe boundary at the next apex
        apex_y = plan.foot_lat - plan.lat_next.p
        pin(1, last, 0, plan.step_length + plan.sag_next.p)
        pin(1, last, 2, plan.sag_next.v)
        pin(1, last, 1, side * apex_y)
        pin(1, last, 3, -side * plan.lat_next.v)
        # swing foot A ends under its hip
        pin(1, last, 4, 0.0, (1, last, 0))
        pin(1, last, 5, -side * P2, (1, last, 1))
        self.boundary_matrix = np.array(rows)
        self.boundary_rhs = np.array(rhs_b)
        self.A_eq = np.vstack([self.defect_matrix, self.boundary_matrix])
        self.b_eq = np.concatenate([self.defect_rhs, self.boundary_rhs])

    # ---------------------------------------------------------------- sampling
    def _build_sampling(self) -> None:
        N, S = self.cfg.nodes, self.cfg.samples_per_interval
        self.samples = []
        for j, dom in enumerate(self.domains):
            h = dom.step(N)
            fr = np.arange(S) / S
            H = _hermite_basis(fr, h)
            count = (N - 1) * S + 1
            mats = {k: np.zeros((count, self.n)) for k in COM_POS + SW_POS}
            for i in range(N - 1):
                r = slice(i * S, (i + 1) * S)
                for k in COM_POS + SW_POS:
                    dk = k + 2 if k in COM_POS else k + 3
                    mats[k][r, self.idx(j, i, k)] = H[0]
                    mats[k][r, self.idx(j, i, dk)] = H[1]
                    mats[k][r, self.idx(j, i + 1, k)] = H[2]
                    mats[k][r, self.idx(j, i + 1, dk)] = H[3]
            for k in COM_POS + SW_POS:
                mats[k][-1, self.idx(j, N - 1, k)] = 1.0
            self.samples.append(mats)
        ctrl = []
        for j in range(len(self.domains)):
            for i in range(N):
                for k in CTRL:
                    ctrl.append(self.idx(j, i, k))
        self.ctrl_idx = np.array(ctrl)
        self.ctrl_matrix = np.zeros((len(ctrl), self.n))
        self.ctrl_matrix[np.arange(len(ctrl)), self.ctrl_idx] = 1.0

    # ---------------------------------------------------------------- NLP interface
    def objective_weights(self) -> np.ndarray:
        """Quadrature weights of the pseudo-energy: Omega_j * h_j on every control."""
        w = np.zeros(self.n)
        N = self.cfg.nodes
        for j, dom in enumerate(self.domains):
            for i in range(N):
                a = self.idx(j, i, CTRL[0])
                w[a:a + NU] = dom.weight * dom.step(N)
        return w

    def objective(self, X: np.ndarray) -> tuple[float, np.ndarray]:
        w = self.objective_weights()
        return float(np.sum(w * X * X)), 2.0 * w * X

    def eq(self, X: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        return self.A_eq @ X - self.b_eq, self.A_eq

    def ineq(self, X: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        samples = [{k: (M, 0.0) for k, M in mats.items()} for mats in self.samples]
        return path_constraints(self, samples, (self.ctrl_matrix, 0.0), X)

    # ---------------------------------------------------------------- audits
    def hermite_simpson_defects(self, X: np.ndarray) -> np.ndarray:
        return hermite_simpson_defects(self, X)

    def constraint_groups(self, X: np.ndarray) -> dict[str, float]:
        """Worst value per constraint group (positive means violated)."""
        c, _ = self.eq(X)
        nd = self.defect_matrix.shape[0]
        h, _ = self.ineq(X)
        out = {"dynamics": float(np.max(np.abs(c[:nd]))), "boundary": float(np.max(np.abs(c[nd:])))}
        out["path"] = float(np.max(h)) if h.size else 0.0
        return out

    def min_leg_distance(self, X: np.ndarray) -> float:
        best = math.inf
        cfg = self.cfg
        for dom, mats in zip(self.domains, self.samples):
            sx, sy, sz = mats[4] @ X, mats[5] @ X, mats[6] @ X
            fx, fy = dom.stance_foot
            off = dom.stance_hip - dom.swing_hip
            for r in cfg.fractions:
                d2 = (r * (sx - fx)) ** 2 + (off * (1 - r) - r * (sy - fy)) ** 2 + (r * sz) ** 2
                best = min(best, float(np.sqrt(d2.min())))
        return best


def path_constraints(problem: CollocationProblem, samples: list[dict], ctrl: tuple, X: np.ndarray
                     ) -> tuple[np.ndarray, np.ndarray]:
    """Path inequalities h(X) <= 0 at the sampled instants.

    Sampled coordinates are affine in the variables: ``samples[j][k] = (M, b)``
    gives coordinate ``k`` of domain ``j`` as ``M @ X + b``. The same code then
    serves the full and the equality-reduced variable spaces.
    """
    vals, jacs = [], []
    cfg, h = problem.cfg, problem.params.h_apex
    for dom, mats in zip(problem.domains, samples):
        (Mcx, bcx), (Mcy, bcy) = mats[0], mats[1]
        (Msx, bsx), (Msy, bsy), (Msz, bsz) = mats[4], mats[5], mats[6]
        cx, cy = Mcx @ X + bcx, Mcy @ X + bcy
        sx, sy, sz = Msx @ X + bsx, Msy @ X + bsy, Msz @ X + bsz
        fx, fy = dom.stance_foot
        # stance leg length
        ax, ay = cx - fx, cy + dom.stance_hip - fy
        la = ax * ax + ay * ay + h * h
        vals += [la - cfg.leg_max ** 2, cfg.leg_min ** 2 - la]
        ja = 2 * ax[:, None] * Mcx + 2 * ay[:, None] * Mcy
        jacs += [ja, -ja]
        # swing leg length
        bx, by, bz = cx - sx, cy + dom.swing_hip - sy, h - sz
        vals.append(bx * bx + by * by + bz * bz - cfg.leg_max ** 2)
        jacs.append(2 * bx[:, None] * (Mcx - Msx) + 2 * by[:, None] * (Mcy - Msy) - 2 * bz[:, None] * Msz)
        # ground clearance
        vals.append(-sz)
        jacs.append(-Msz)
        # friction cone, as a bound on the CoM lean
        gx, gy = cx - fx, cy - fy
        vals.append(gx * gx + gy * gy - (cfg.friction * h) ** 2)
        jacs.append(2 * gx[:, None] * Mcx + 2 * gy[:, None] * Mcy)
        # self collision between leg point pairs
        off = dom.stance_hip - dom.swing_hip
        for r in cfg.fractions:
            dx, dy, dz = -r * (sx - fx), off * (1 - r) - r * (sy - fy), -r * sz
            vals.append(cfg.d_min ** 2 + cfg.backoff - (dx * dx + dy * dy + dz * dz))
            jacs.append(2 * r * (dx[:, None] * Msx + dy[:, None] * Msy + dz[:, None] * Msz))
    # swing acceleration box
    E, e = ctrl
    u = E @ X + e
    vals += [u - cfg.swing_acc_max, -u - cfg.swing_acc_max]
    jacs += [E, -E]
    return np.concatenate(vals), np.vstack(jacs)


class ReducedProblem:
    """The collocation NLP on the null space of its linear equalities.

    Dynamics defects and boundary pins are all linear, so X = X_p + Z y with
    X_p a least-squares particular solution and Z an orthonormal null-space
    basis. Only the path inequalities remain as constraints on y.
    """

    def __init__(self, problem: CollocationProblem, rcond: float = 1e-10) -> None:
        A, b = problem.A_eq, problem.b_eq
        self.problem = problem
        self.Xp = np.linalg.lstsq(A, b, rcond=None)[0]
        self.Z = null_space(A, rcond=rcond)
        self.linear_residual = float(np.max(np.abs(A @ self.Xp - b)))
        self.x0 = self.Z.T @ (problem.x0 - self.Xp)
        Xp, Z = self.Xp, self.Z
        self.samples = [{k: (M @ Z, M @ Xp) for k, M in mats.items()} for mats in problem.samples]
        self.ctrl = (problem.ctrl_matrix @ Z, problem.ctrl_matrix @ Xp)
        self.weights = problem.objective_weights()

    def lift(self, y: np.ndarray) -> np.ndarray:
        return self.Xp + self.Z @ y

    def objective(self, y: np.ndarray) -> tuple[float, np.ndarray]:
        X = self.lift(y)
        wx = self.weights * X
        return float(wx @ X), 2.0 * (self.Z.T @ wx)

    def eq(self, y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        return np.zeros(0), np.zeros((0, y.size))

    def ineq(self, y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        return path_constraints(self.problem, self.samples, self.ctrl, y)


def hermite_simpson_defects(problem: CollocationProblem, X: np.ndarray) -> np.ndarray:
    """Compressed Hermite-Simpson defects, evaluated from the dynamics directly."""
    Z = problem.unpack(X)
    N, w = problem.cfg.nodes, problem.params.omega
    out = []
    for j, dom in enumerate(problem.domains):
        A, B, c = dynamics_matrices(w, dom.stance_foot)
        h = dom.step(N)

        def f(z: np.ndarray) -> np.ndarray:
            return A @ z[:NX] + B @ z[NX:] + c

        for i in range(N - 1):
            zi, zn = Z[j, i], Z[j, i + 1]
            fi, fn = f(zi), f(zn)
            xm = 0.5 * (zi[:NX] + zn[:NX]) + h / 8 * (fi - fn)
            um = 0.5 * (zi[NX:] + zn[NX:])
            fm = A @ xm + B @ um + c
            out.append(zn[:NX] - zi[:NX] - h / 6 * (fi + 4 * fm + fn))
    return np.concatenate(out)


def defect_jacobian(problem: CollocationProblem) -> np.ndarray:
    return problem.defect_matrix


def collision_values(
    stance_foot: np.ndarray, swing_foot: np.ndarray, hip_offset: float, cfg: ReducedModelConfig
) -> np.ndarray:
    """Collision constraint per point pair for one configuration (positive = violated).

    ``hip_offset`` is the lateral stance-hip minus swing-hip offset; hips share
    the CoM's sagittal position and height so only this difference matters.
    """
    fs = np.asarray(stance_foot, dtype=float)
    sw = np.asarray(swing_foot, dtype=float)
    out = []
    for r in cfg.fractions:
        d = np.array([-r * (sw[0] - fs[0]), hip_offset * (1 - r) - r * (sw[1] - fs[1]), -r * (sw[2] - fs[2])])
        out.append(cfg.d_min ** 2 - d @ d)
    return np.array(out)


def build_nlp(geometry: TransitionGeometry, cfg: ReducedModelConfig, params: PipmParams) -> CollocationProblem:
    plan = geometry.plan
    t1, t2 = plan.timing.t1, plan.timing.t2
    if not (plan.step_length > 1e-9 and math.isfinite(t1 + t2) and t1 > 0 and t2 > 0):
        raise BadTransition("step length and phase durations must be positive and finite")
    if geometry.side not in (1, -1):
        raise BadTransition("side must be +1 or -1")
    side, P2 = geometry.side, cfg.pelvis_width / 2
    domains = [
        Domain(t1, (0.0, 0.0), -side * P2, side * P2, cfg.weights[0]),
        Domain(t2, (plan.step_length, side * plan.foot_lat), side * P2, -side * P2, cfg.weights[1]),
    ]
    x0 = _initial_guess(geometry, domains, cfg, params)
    return CollocationProblem(cfg, params, geometry, domains, x0)


def _initial_guess(g: TransitionGeometry, domains: list[Domain], cfg: ReducedModelConfig,
                   params: PipmParams) -> np.ndarray:
    N, side = cfg.nodes, g.side
    Z = np.zeros((2, N, NZ))
    sag = PhaseState(g.sag.p, g.sag.v)
    lat = PhaseState(side * g.lat.p, side * g.lat.v)
    feet = [dom.stance_foot for dom in domains]
    for j, dom in enumerate(domains):
        ts = np.linspace(0.0, dom.duration, N)
        for i, t in enumerate(ts):
            sx = lipm_flow(sag, feet[j][0], t, params)
            sy = lipm_flow(lat, feet[j][1], t, params)
            Z[j, i, 0:4] = (sx.p, sy.p, sx.v, sy.v)
        sag = PhaseState(Z[j, -1, 0], Z[j, -1, 2])
        lat = PhaseState(Z[j, -1, 1], Z[j, -1, 3])
    P2 = cfg.pelvis_width / 2
    starts = [np.array([Z[0, 0, 0], Z[0, 0, 1] + side * P2, 0.0]), np.zeros(3)]
    ends = [np.array([g.plan.step_length, side * g.plan.foot_lat, 0.0]),
            np.array([Z[1, -1, 0], Z[1, -1, 1] - side * P2, 0.0])]
    for j, dom in enumerate(domains):
        T = dom.duration
        s = np.linspace(0.0, 1.0, N)
        delta = ends[j] - starts[j]
        for i in range(N):
            si = s[i]
            pos = starts[j] + delta * (3 * si ** 2 - 2 * si ** 3)
            vel = delta * (6 * si - 6 * si ** 2) / T
            acc = delta * (6 - 12 * si) / T ** 2
            pos[2] = cfg.swing_clearance * 16 * (si * (1 - si)) ** 2
            vel[2] = cfg.swing_clearance * 32 * si * (1 - si) * (1 - 2 * si) / T
            acc[2] = cfg.swing_clearance * 32 * (1 - 6 * si + 6 * si ** 2) / T ** 2
            Z[j, i, 4:7], Z[j, i, 7:10], Z[j, i, 10:13] = pos, vel, acc
    return Z.ravel()
