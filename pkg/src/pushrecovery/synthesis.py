"""Keyframe transition game and push-recovery strategy synthesis.

The robot (system) picks a TO-verified transition at every keyframe; the
environment may then push the robot into another Riemannian cell, at most once
every two steps. A recovery counter turns "back to a steady keyframe within two
steps" into a safety objective, which is solved as an enumerative safety game:
the environment attractor of the bad states is computed with a rank, and the
complement is the winning region.
"""

from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass, field, replace
from typing import Iterable, Optional, Sequence

from .phase_space import Keyframe, PipmParams, RiemannianCell, Stance, is_steady_state, lateral_cells, sagittal_cells
from .traj_opt.table import FeasibilityTable

SCHEMA_VERSION = 1
HORIZON = 2


class EmptyActionSet(ValueError):
    def __init__(self, keyframe: Keyframe) -> None:
        super().__init__(f"no feasible action from keyframe {keyframe.key()}")
        self.keyframe = keyframe


class Unrealizable(RuntimeError):
    def __init__(self, trace: list[tuple]) -> None:
        super().__init__("specification is unrealizable; environment counter-play of "
                         f"{len(trace)} moves")
        self.trace = trace


class OutsideWinningRegion(ValueError):
    pass


@dataclass(frozen=True, order=True)
class SystemAction:
    next_sag: RiemannianCell
    next_lat: RiemannianCell
    length_idx: int
    width_idx: int            # signed, 1..3 by |W|, negative for crossed steps

    @property
    def width_class(self) -> int:
        return abs(self.width_idx)

    def next_keyframe(self, k: Keyframe) -> Keyframe:
        return Keyframe(self.next_sag, self.next_lat, k.stance.other)

    def to_json(self) -> list[int]:
        return [self.next_sag.pos, self.next_sag.vel, self.next_lat.pos, self.next_lat.vel,
                self.length_idx, self.width_idx]

    @classmethod
    def from_json(cls, v: Sequence[int]) -> "SystemAction":
        return cls(RiemannianCell(v[0], v[1]), RiemannianCell(v[2], v[3]), v[4], v[5])


# None is the empty perturbation; otherwise the target (sagittal, lateral) cells.
EnvPerturbation = Optional[tuple[RiemannianCell, RiemannianCell]]


@dataclass(frozen=True, order=True)
class GameState:
    """Automaton state: keyframe, last step width class, push flag and recovery counter."""

    k: Keyframe
    prev_width: int = 0       # 0 before the first step
    pushed: bool = False
    counter: int = 0

    def key(self) -> str:
        return f"{self.k.key()}|{self.prev_width}|{int(self.pushed)}|{self.counter}"

    @classmethod
    def from_key(cls, key: str) -> "GameState":
        parts = key.split("|")
        k = Keyframe.from_key("|".join(parts[:3]))
        return cls(k, int(parts[3]), bool(int(parts[4])), int(parts[5]))


WIDTH_LITERAL = "literal"
WIDTH_STEADY_EXEMPT = "steady-exempt"
WIDTH_OFF = "off"


@dataclass(frozen=True)
class SynthesisOptions:
    lateral_descent: bool = True
    width_rule: str = WIDTH_STEADY_EXEMPT
    pushes: tuple[tuple[RiemannianCell, RiemannianCell], ...] | None = None
    horizon: int = HORIZON

    def __post_init__(self) -> None:
        if self.width_rule not in (WIDTH_LITERAL, WIDTH_STEADY_EXEMPT, WIDTH_OFF):
            raise ValueError(f"unknown width rule {self.width_rule!r}")


def all_pushes() -> tuple[tuple[RiemannianCell, RiemannianCell], ...]:
    """Every push target with a moving sagittal apex."""
    return tuple((s, l) for s in sagittal_cells() if s.vel != 0 for l in lateral_cells())


def width_rule_ok(k: Keyframe, prev_width: int, a: SystemAction, mode: str) -> bool:
    """After a small or large step the next step must be small.

    In the steady-exempt mode a step that lands on a steady keyframe is always
    allowed, otherwise the rule would forbid ever returning to medium-width
    steady walking.
    """
    if mode == WIDTH_OFF or prev_width not in (1, 3) or a.width_class == 1:
        return True
    return mode == WIDTH_STEADY_EXEMPT and is_steady_state(a.next_keyframe(k))


def initial_state() -> GameState:
    return GameState(Keyframe(RiemannianCell(0, 2), RiemannianCell(0, 0), Stance.RIGHT))


def successor_counter(k: Keyframe, pushed: bool, counter: int) -> int:
    if is_steady_state(k):
        return 0
    return 1 if pushed else counter + 1


@dataclass
class GameStructure:
    table: FeasibilityTable
    options: SynthesisOptions
    s_init: GameState
    states: list[GameState]
    index: dict[GameState, int]
    actions: list[list[SystemAction]]
    # successors[s][a] = list of (env move, successor index or -1 for a bad state)
    successors: list[list[list[tuple[EnvPerturbation, int]]]]

    @property
    def pushes(self) -> tuple:
        return self.options.pushes if self.options.pushes is not None else all_pushes()

    def env_moves(self, pushed: bool) -> list[EnvPerturbation]:
        return [None] if pushed else [None, *self.pushes]


def allowed_actions(k: Keyframe, prev_width: int, table: FeasibilityTable, opts: SynthesisOptions) -> list[SystemAction]:
    out = []
    for r in table.feasible_from(k.sag, k.lat):
        a = SystemAction(r.candidate.sag_n, r.lat_n, r.length_idx, r.width_idx)
        if a.next_sag.speed > k.sag.speed:
            continue
        if opts.lateral_descent and a.next_lat.speed > k.lat.speed:
            continue
        if not width_rule_ok(k, prev_width, a, opts.width_rule):
            continue
        out.append(a)
    return sorted(out)


def step(s: GameState, a: SystemAction, move: EnvPerturbation, horizon: int = HORIZON) -> GameState | None:
    """Successor state, or None when the recovery counter overflows (bad)."""
    k = a.next_keyframe(s.k)
    if move is not None:
        k = Keyframe(move[0], move[1], k.stance)
    pushed = move is not None
    c = successor_counter(k, pushed, s.counter)
    if c > horizon:
        return None
    return GameState(k, a.width_class, pushed, c)


def build_game(params: PipmParams, feas: FeasibilityTable, options: SynthesisOptions | None = None,
               strict: bool = False) -> GameStructure:
    """Explicit game graph reachable from the initial steady state under all moves."""
    opts = options or SynthesisOptions()
    s0 = initial_state()
    game = GameStructure(feas, opts, s0, [], {}, [], [])
    queue = deque([s0])
    game.index[s0] = 0
    game.states.append(s0)
    while queue:
        s = queue.popleft()
        acts = allowed_actions(s.k, s.prev_width, feas, opts)
        if strict and not acts:
            raise EmptyActionSet(s.k)
        succ_lists = []
        for a in acts:
            lst = []
            for m in game.env_moves(s.pushed):
                t = step(s, a, m, opts.horizon)
                if t is None:
                    lst.append((m, -1))
                    continue
                if t not in game.index:
                    game.index[t] = len(game.states)
                    game.states.append(t)
                    queue.append(t)
                lst.append((m, game.index[t]))
            succ_lists.append(lst)
        game.actions.append(acts)
        game.successors.append(succ_lists)
    return game


def admissible_pushes(params: PipmParams, feas: FeasibilityTable, options: SynthesisOptions | None = None,
                      candidates: Sequence | None = None) -> tuple:
    """Largest push set found by peeling off the quickest-losing push targets.

    Starting from every candidate target, solve the game; while the initial
    state loses, drop the targets whose pushed states lose in the fewest moves.
    The result is the environment assumption under which recovery is provable.
    """
    opts = options or SynthesisOptions()
    pushes = list(all_pushes() if candidates is None else candidates)
    while pushes:
        game = build_game(params, feas, replace(opts, pushes=tuple(pushes)))
        rank, _ = solve_safety(game)
        if rank[0] == -1:
            break
        worst: dict[tuple, int] = {}
        for i, s in enumerate(game.states):
            if s.pushed and rank[i] != -1:
                key = (s.k.sag, s.k.lat)
                worst[key] = min(worst.get(key, rank[i]), rank[i])
        if not worst:
            return ()
        m = min(worst.values())
        pushes = [p for p in pushes if worst.get(p, m + 1) > m]
    return tuple(pushes)


def action_preference(a: SystemAction, s: GameState) -> tuple:
    steady = is_steady_state(a.next_keyframe(s.k))
    return (not steady, a.width_class, abs(a.next_sag.vel - 2), a)


@dataclass
class Strategy:
    choice: dict[GameState, SystemAction]
    winning: set[GameState]
    pushes: tuple = field(default_factory=tuple)
    horizon: int = HORIZON

    def action(self, s: GameState) -> SystemAction:
        if s not in self.choice:
            raise OutsideWinningRegion(f"state {s.key()} is not winning")
        return self.choice[s]

    def is_winning(self, s: GameState) -> bool:
        return s in self.winning

    def to_json(self, config_hash: str = "", table_sha256: str = "") -> str:
        doc = {
            "schema_version": SCHEMA_VERSION,
            "config_hash": config_hash,
            "table_sha256": table_sha256,
            "horizon": self.horizon,
            "pushes": [[s.pos, s.vel, l.pos, l.vel] for s, l in self.pushes],
            "strategy": {s.key(): a.to_json() for s, a in sorted(self.choice.items())},
        }
        return json.dumps(doc, indent=1, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> tuple["Strategy", dict]:
        doc = json.loads(text)
        if doc.get("schema_version") != SCHEMA_VERSION:
            raise ValueError(f"unsupported strategy schema {doc.get('schema_version')}")
        choice = {GameState.from_key(k): SystemAction.from_json(v) for k, v in doc["strategy"].items()}
        pushes = tuple((RiemannianCell(a, b), RiemannianCell(c, d)) for a, b, c, d in doc["pushes"])
        return cls(choice, set(choice), pushes, doc["horizon"]), doc


def solve_safety(game: GameStructure) -> tuple[list[int], list[list[int]]]:
    """Environment attractor of the bad states.

    Returns (rank per state, rank per state-action); rank -1 means winning for
    the system. A state's rank counts the moves the environment needs to force
    a counter overflow.
    """
    n = len(game.states)
    INF = -1
    rank = [INF] * n
    arank = [[INF] * len(acts) for acts in game.actions]
    alive = [len(acts) for acts in game.actions]
    preds: list[list[tuple[int, int]]] = [[] for _ in range(n)]
    frontier: list[int] = []
    next_frontier: list[int] = []
    for s, succ_lists in enumerate(game.successors):
        if not succ_lists:
            rank[s] = 0
            frontier.append(s)
        for ai, lst in enumerate(succ_lists):
            if any(t < 0 for _, t in lst):
                arank[s][ai] = 1
                alive[s] -= 1
            for _, t in lst:
                if t >= 0:
                    preds[t].append((s, ai))
    for s in range(n):
        if rank[s] == INF and alive[s] == 0:
            rank[s] = 1
            next_frontier.append(s)
    level = 0
    # states at rank 0 (no action) and rank 1 (every action overflows at once)
    while frontier or next_frontier:
        level += 1
        newly: list[int] = []
        for t in frontier + next_frontier:
            for s, ai in preds[t]:
                if rank[s] != INF or arank[s][ai] != INF:
                    continue
                arank[s][ai] = level + 1
                alive[s] -= 1
                if alive[s] == 0:
                    rank[s] = level + 1
                    newly.append(s)
        frontier, next_frontier = [], newly
    return rank, arank


def synthesize(game: GameStructure) -> Strategy:
    rank, arank = solve_safety(game)
    if rank[0] != -1:
        raise Unrealizable(counter_play(game, rank, arank))
    winning = {game.states[i] for i, r in enumerate(rank) if r == -1}
    choice: dict[GameState, SystemAction] = {}
    for i, s in enumerate(game.states):
        if rank[i] != -1:
            continue
        good = [a for a, r in zip(game.actions[i], arank[i]) if r == -1]
        choice[s] = min(good, key=lambda a: action_preference(a, s))
    return Strategy(choice, winning, tuple(game.pushes), game.options.horizon)


def counter_play(game: GameStructure, rank: list[int], arank: list[list[int]]) -> list[tuple]:
    """Environment play from the initial state that forces the bad set fastest.

    Each entry is (state, system action or None, env move or None). At every
    state the system's preferred action is shown; the environment answers with
    its rank-decreasing move.
    """
    trace = []
    s = 0
    for _ in range(len(game.states)):
        st = game.states[s]
        acts = game.actions[s]
        if not acts:
            trace.append((st, None, None))
            break
        ai = min(range(len(acts)), key=lambda i: (-(arank[s][i] if arank[s][i] >= 0 else 10**9),
                                                   action_preference(acts[i], st)))
        lst = game.successors[s][ai]
        move, t = min(lst, key=lambda mt: (-1 if mt[1] < 0 else rank[mt[1]] if rank[mt[1]] >= 0 else 10**9))
        trace.append((st, acts[ai], move))
        if t < 0:
            break
        s = t
    return trace


# --------------------------------------------------------------------------
# plans
# --------------------------------------------------------------------------

@dataclass
class ActionPlan:
    keyframes: list[Keyframe]
    actions: list[SystemAction]
    states: list[GameState]

    @property
    def transitions(self) -> list[tuple[Keyframe, Keyframe]]:
        return list(zip(self.keyframes, self.keyframes[1:]))


def rollout(strategy: Strategy, current: GameState | Keyframe,
            env_trace: Iterable[EnvPerturbation] = ()) -> ActionPlan:
    """Follow the strategy from ``current`` until a steady keyframe is reached.

    From a steady keyframe the plan is the single steady continuation step.
    Env moves in ``env_trace`` are applied after the corresponding steps.
    """
    s = current if isinstance(current, GameState) else _state_for(strategy, current)
    if s not in strategy.choice:
        raise OutsideWinningRegion(f"state {s.key()} is not winning")
    moves = list(env_trace)
    plan = ActionPlan([s.k], [], [s])
    for i in range(strategy.horizon + 2 * len(moves) + 1):
        a = strategy.action(s)
        move = moves[i] if i < len(moves) else None
        t = step(s, a, move, strategy.horizon)
        if t is None:
            raise OutsideWinningRegion("strategy overflowed the recovery counter")
        plan.actions.append(a)
        plan.keyframes.append(t.k)
        plan.states.append(t)
        s = t
        if is_steady_state(t.k) and i >= len(moves) - 1:
            break
    return plan


def _state_for(strategy: Strategy, k: Keyframe) -> GameState:
    """A winning automaton state for a bare keyframe, treating it as freshly pushed."""
    c = 0 if is_steady_state(k) else 1
    for width in (0, 2, 1, 3):
        for pushed in (True, False):
            s = GameState(k, width, pushed, c)
            if s in strategy.choice:
                return s
    raise OutsideWinningRegion(f"keyframe {k.key()} has no winning state")


# --------------------------------------------------------------------------
# verification
# --------------------------------------------------------------------------

@dataclass
class Violation:
    state: GameState
    kind: str
    detail: str

    def __str__(self) -> str:
        return f"{self.kind} at {self.state.key()}: {self.detail}"


@dataclass
class VerificationReport:
    violations: list[Violation]
    states_checked: int
    nodes_checked: int

    @property
    def clean(self) -> bool:
        return not self.violations


def verify_strategy(strategy: Strategy, game: GameStructure, depth: int = 4) -> VerificationReport:
    """Enumerate every admissible env sequence up to ``depth`` from every reachable winning state."""
    table, opts = game.table, game.options
    found: dict[tuple[GameState, str], Violation] = {}

    def flag(s: GameState, kind: str, detail: str) -> None:
        found.setdefault((s, kind), Violation(s, kind, detail))

    def check_edge(s: GameState, a: SystemAction) -> None:
        rec = table.lookup(s.k.sag, s.k.lat, a.next_sag)
        if (rec is None or not rec.feasible or rec.lat_n != a.next_lat
                or (rec.length_idx, rec.width_idx) != (a.length_idx, a.width_idx)):
            flag(s, "infeasible", "action not in the feasibility table")
        if a.next_sag.speed > s.k.sag.speed:
            flag(s, "velocity_descent", "sagittal speed increases")
        if opts.lateral_descent and a.next_lat.speed > s.k.lat.speed:
            flag(s, "velocity_descent", "lateral speed increases")
        if not width_rule_ok(s.k, s.prev_width, a, opts.width_rule):
            flag(s, "width_preference", f"width {a.width_class} after {s.prev_width}")

    # reachable states under the strategy
    reach = [game.s_init]
    seen = {game.s_init}
    i = 0
    while i < len(reach):
        s = reach[i]
        i += 1
        if s not in strategy.choice:
            flag(s, "not_winning", "reached a state without a strategy entry")
            continue
        a = strategy.choice[s]
        for m in game.env_moves(s.pushed):
            t = step(s, a, m, opts.horizon)
            if t is not None and t not in seen:
                seen.add(t)
                reach.append(t)

    visited: set[tuple] = set()

    def explore(s: GameState, d: int, run: int) -> None:
        # run = consecutive non-steady keyframes, restarted by a push; tracked
        # here from the keyframes alone rather than from the automaton counter
        node = (s, d, run)
        if node in visited:
            return
        visited.add(node)
        if s not in strategy.choice:
            flag(s, "not_winning", "left the winning region")
            return
        a = strategy.choice[s]
        check_edge(s, a)
        if d == 0:
            return
        for m in game.env_moves(s.pushed):
            if s.pushed and m is not None:
                flag(s, "env_assumption", "two consecutive pushes")
            t = step(s, a, m, opts.horizon + depth + 1)
            if is_steady_state(t.k):
                r = 0
            else:
                r = 1 if m is not None else run + 1
            if r > opts.horizon:
                flag(s, "recovery", f"no steady keyframe within {opts.horizon} steps")
                continue
            explore(t, d - 1, r)

    for s in reach:
        if s in strategy.choice:
            explore(s, depth, s.counter)
    return VerificationReport(sorted(found.values(), key=lambda v: (v.kind, v.state)), len(reach), len(visited))


def minimax_winning(game: GameStructure, s: GameState, depth: int, memo: dict | None = None) -> bool:
    """Depth-bounded minimax over the raw rules, independent of the attractor."""
    memo = {} if memo is None else memo
    key = (s, depth)
    if key in memo:
        return memo[key]
    if depth == 0:
        return True
    acts = allowed_actions(s.k, s.prev_width, game.table, game.options)
    moves = [None] if s.pushed else [None, *game.pushes]
    ok = False
    for a in acts:
        good = True
        for m in moves:
            t = step(s, a, m, game.options.horizon)
            if t is None or not minimax_winning(game, t, depth - 1, memo):
                good = False
                break
        if good:
            ok = True
            break
    memo[key] = ok
    return ok
