"""Feasibility table: TO-verified keyframe transitions.

Each candidate is a triple (current sagittal cell, current lateral cell, next
sagittal cell). The phase-space planner fills in the rest of the action: the
step length, the signed step width nearest the ideal lateral foothold, and the
next lateral cell. The collocation problem then decides feasibility.

All lateral quantities live in the stance frame (inward positive), so one table
serves both stances.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import os
from dataclasses import asdict, dataclass
from multiprocessing import get_context
from typing import Iterable

import numpy as np

from ..phase_space import (
    NoSwitchPoint, OutOfRange, PhaseState, PipmParams, RiemannianCell, StepPlan,
    choose_step_length, classify_lateral, ideal_foot_lat, lateral_center, lateral_cells,
    plan_step, sagittal_cells,
)
from .model import BadTransition, ReducedModelConfig, ReducedProblem, TransitionGeometry, build_nlp
from .solver import FEASIBLE, NlpSolution, SolverOptions, solve

CROSSED = "crossed"
WIDE = "wide"

COLUMNS = [
    "family", "sag_c_pos", "sag_c_vel", "lat_c_pos", "lat_c_vel", "sag_n_pos", "sag_n_vel",
    "lat_n_pos", "lat_n_vel", "length_idx", "width_idx", "stance", "verdict", "margin",
    "iterations", "objective", "reason",
]


@dataclass(frozen=True)
class Candidate:
    family: str
    sag_c: RiemannianCell
    lat_c: RiemannianCell
    sag_n: RiemannianCell

    @property
    def key(self) -> tuple:
        return (self.sag_c, self.lat_c, self.sag_n)


@dataclass(frozen=True)
class FeasibilityRecord:
    candidate: Candidate
    lat_n: RiemannianCell | None
    length_idx: int           # -1 when no geometry could be planned
    width_idx: int            # signed 1-based index into step_widths, negative = crossed
    feasible: bool
    margin: float             # smallest leg point-pair distance (m), nan if not solved
    iterations: int
    objective: float
    reason: str

    @property
    def crossed(self) -> bool:
        return self.width_idx < 0

    def row(self) -> list[str]:
        c = self.candidate
        ln = self.lat_n
        return [
            c.family, str(c.sag_c.pos), str(c.sag_c.vel), str(c.lat_c.pos), str(c.lat_c.vel),
            str(c.sag_n.pos), str(c.sag_n.vel),
            "" if ln is None else str(ln.pos), "" if ln is None else str(ln.vel),
            str(self.length_idx), str(self.width_idx), "right",
            "feasible" if self.feasible else "infeasible",
            format(self.margin, ".17g"), str(self.iterations), format(self.objective, ".17g"), self.reason,
        ]


def _nonzero_sag() -> list[RiemannianCell]:
    return [c for c in sagittal_cells() if c.vel != 0]


def enumerate_candidates() -> list[Candidate]:
    """Crossed-leg candidates (lateral velocity toward the stance leg) then wide/steady ones."""
    sag = _nonzero_sag()
    toward = [c for c in lateral_cells() if c.vel < 0]
    away = [c for c in lateral_cells() if c.vel >= 0]
    out = [Candidate(CROSSED, s, l, n) for s in sag for l in toward for n in sag]
    out += [Candidate(WIDE, s, l, n) for s in sag for l in away for n in sag]
    return out


def signed_widths(params: PipmParams) -> list[tuple[int, float]]:
    w = params.step_widths
    return [(-(i + 1), -w[i]) for i in reversed(range(3))] + [(i + 1, w[i]) for i in range(3)]


def width_value(width_idx: int, params: PipmParams) -> float:
    return float(np.copysign(params.step_widths[abs(width_idx) - 1], width_idx))


def snap_width(foot: float, params: PipmParams) -> int:
    """Signed width index nearest to a lateral foothold; ties go to the wider (safer) side."""
    best = min(signed_widths(params), key=lambda iw: (abs(iw[1] - foot), -iw[1]))
    return best[0]


def plan_candidate(c: Candidate, params: PipmParams) -> tuple[int, int, StepPlan]:
    """Step length index, signed width index and the resulting step plan."""
    sag, lat = c.sag_c.center(params), lateral_center(c.lat_c, params)
    sag_n = c.sag_n.center(params)
    li = choose_step_length(sag, sag_n, params)
    L = params.step_lengths[li]
    wi = snap_width(ideal_foot_lat(sag, lat, sag_n, L, params), params)
    return li, wi, plan_step(sag, lat, sag_n, L, width_value(wi, params), params)


def solve_transition(
    sag: PhaseState, lat: PhaseState, plan: StepPlan, cfg: ReducedModelConfig, params: PipmParams,
    side: int = 1, options: SolverOptions | None = None,
) -> tuple[NlpSolution, np.ndarray, object]:
    """Solve the collocation problem for one planned step; returns (solution, X, problem)."""
    problem = build_nlp(TransitionGeometry(sag, lat, plan, side), cfg, params)
    reduced = ReducedProblem(problem)
    sol = solve(reduced, options)
    X = reduced.lift(sol.x)
    groups = problem.constraint_groups(X)
    viol = max(groups.values())
    status = sol.status
    if status == FEASIBLE and viol > (options or SolverOptions()).feas_tol:
        status = "infeasible"
    full = NlpSolution(X, sol.objective, viol, sol.stationarity, sol.iterations, status, sol.history)
    return full, X, problem


def check_transition(c: Candidate, cfg: ReducedModelConfig, params: PipmParams,
                     options: SolverOptions | None = None) -> FeasibilityRecord:
    nan = float("nan")
    try:
        li, wi, plan = plan_candidate(c, params)
    except NoSwitchPoint:
        return FeasibilityRecord(c, None, -1, 0, False, nan, 0, nan, "no_switch_point")
    try:
        lat_n = classify_lateral(plan.lat_next, params)
    except OutOfRange:
        return FeasibilityRecord(c, None, li, wi, False, nan, 0, nan, "out_of_range")
    sag, lat = c.sag_c.center(params), lateral_center(c.lat_c, params)
    try:
        sol, X, problem = solve_transition(sag, lat, plan, cfg, params, options=options)
    except BadTransition:
        return FeasibilityRecord(c, lat_n, li, wi, False, nan, 0, nan, "bad_transition")
    margin = problem.min_leg_distance(X)
    return FeasibilityRecord(c, lat_n, li, wi, sol.feasible, margin, sol.iterations, sol.objective,
                             "ok" if sol.feasible else sol.status)


def _check_star(args: tuple) -> FeasibilityRecord:
    return check_transition(*args)


@dataclass
class FeasibilityTable:
    records: list[FeasibilityRecord]
    params: PipmParams
    cfg: ReducedModelConfig

    def __post_init__(self) -> None:
        self.records = sorted(self.records, key=lambda r: (r.candidate.family, r.candidate.key))
        self._by_key = {r.candidate.key: r for r in self.records}
        if len(self._by_key) != len(self.records):
            raise ValueError("duplicate candidates in table")

    def __len__(self) -> int:
        return len(self.records)

    def lookup(self, sag_c: RiemannianCell, lat_c: RiemannianCell, sag_n: RiemannianCell) -> FeasibilityRecord | None:
        return self._by_key.get((sag_c, lat_c, sag_n))

    def feasible_from(self, sag_c: RiemannianCell, lat_c: RiemannianCell) -> list[FeasibilityRecord]:
        return [r for r in self.records if r.feasible and r.candidate.sag_c == sag_c and r.candidate.lat_c == lat_c]

    def has_transition(self, sag_c, lat_c, sag_n, lat_n) -> bool:
        r = self.lookup(sag_c, lat_c, sag_n)
        return r is not None and r.feasible and r.lat_n == lat_n

    def count(self, family: str | None = None, feasible: bool | None = None) -> int:
        return sum(1 for r in self.records
                   if (family is None or r.candidate.family == family)
                   and (feasible is None or r.feasible == feasible))

    def restricted(self, keep: Iterable[tuple]) -> "FeasibilityTable":
        """Copy with every candidate outside ``keep`` marked infeasible."""
        keep = set(keep)
        recs = [r if r.candidate.key in keep else
                FeasibilityRecord(r.candidate, r.lat_n, r.length_idx, r.width_idx, False, r.margin,
                                  r.iterations, r.objective, "removed")
                for r in self.records]
        return FeasibilityTable(recs, self.params, self.cfg)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(COLUMNS)
        for r in self.records:
            w.writerow(r.row())
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str, params: PipmParams, cfg: ReducedModelConfig) -> "FeasibilityTable":
        rows = list(csv.reader(io.StringIO(text)))
        if not rows or rows[0] != COLUMNS:
            raise ValueError("unexpected feasibility table header")
        recs = []
        for row in rows[1:]:
            d = dict(zip(COLUMNS, row))
            cell = lambda p, v: RiemannianCell(int(d[p]), int(d[v]))  # noqa: E731
            cand = Candidate(d["family"], cell("sag_c_pos", "sag_c_vel"), cell("lat_c_pos", "lat_c_vel"),
                             cell("sag_n_pos", "sag_n_vel"))
            lat_n = None if d["lat_n_pos"] == "" else cell("lat_n_pos", "lat_n_vel")
            recs.append(FeasibilityRecord(cand, lat_n, int(d["length_idx"]), int(d["width_idx"]),
                                          d["verdict"] == "feasible", float(d["margin"]), int(d["iterations"]),
                                          float(d["objective"]), d["reason"]))
        return cls(recs, params, cfg)


def build_feasibility_table(
    cfg: ReducedModelConfig, params: PipmParams, jobs: int = 1,
    candidates: list[Candidate] | None = None, options: SolverOptions | None = None,
) -> FeasibilityTable:
    cands = enumerate_candidates() if candidates is None else candidates
    work = [(c, cfg, params, options) for c in cands]
    if jobs > 1:
        with get_context("fork").Pool(jobs) as pool:
            records = pool.map(_check_star, work, chunksize=8)
    else:
        records = [_check_star(w) for w in work]
    return FeasibilityTable(records, params, cfg)


def table_metadata(table: FeasibilityTable, config_hash: str, csv_text: str,
                   options: SolverOptions | None = None) -> dict:
    opts = options or SolverOptions()
    return {
        "config_hash": config_hash,
        "csv_sha256": hashlib.sha256(csv_text.encode()).hexdigest(),
        "rows": len(table),
        "crossed_rows": table.count(CROSSED),
        "wide_rows": table.count(WIDE),
        "feasible_rows": table.count(feasible=True),
        "tolerances": {"feasibility": opts.feas_tol, "stationarity": opts.stat_tol},
        "reset_map": "identity",
        "mirror_symmetric": True,
        "model": asdict(table.cfg),
    }


def write_table(table: FeasibilityTable, csv_path: str, config_hash: str,
                options: SolverOptions | None = None) -> dict:
    text = table.to_csv()
    meta = table_metadata(table, config_hash, text, options)
    _atomic_write(csv_path, text)
    _atomic_write(metadata_path(csv_path), json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return meta


def metadata_path(csv_path: str) -> str:
    root, _ = os.path.splitext(csv_path)
    return root + ".meta.json"


def read_table(csv_path: str, params: PipmParams, cfg: ReducedModelConfig) -> tuple[FeasibilityTable, dict]:
    with open(csv_path, encoding="utf-8") as fh:
        text = fh.read()
    with open(metadata_path(csv_path), encoding="utf-8") as fh:
        meta = json.load(fh)
    if hashlib.sha256(text.encode()).hexdigest() != meta.get("csv_sha256"):
        raise TableTampered("table contents do not match their metadata digest")
    return FeasibilityTable.from_csv(text, params, cfg), meta


class TableTampered(ValueError):
    pass


def _atomic_write(path: str, text: str) -> None:
    tmp = f"{path}.tmp{os.getpid()}"
    with open(tmp, "w", encoding="utf-8", newline="") as fh:
        fh.write(text)
    os.replace(tmp, path)
