"""Budget-constrained action assignment via the one-dimensional Lagrangian dual.

The primal assigns one action per customer maximizing total value subject to
an average-cost budget. Its dual is a convex piecewise-linear function of a
single multiplier, minimized here by bisection on the subgradient; a repair
pass then walks the multiplier up through breakpoints until the hard budget
holds. A sliding-window store recomputes the multiplier on recent traffic so
online decisions track the budget in near real time.

Value matrices are float arrays with NaN marking actions a customer is not
eligible for. Costs and budgets are integer cents; the dual itself works in
currency units.
"""

from __future__ import annotations

import threading
from collections import deque
from dataclasses import dataclass

import numpy as np


class InfeasibleProblemError(ValueError):
    """The budget cannot be met even by the cheapest eligible actions."""


@dataclass(frozen=True)
class AllocationProblem:
    """N customers x M actions: value matrix, per-action costs, per-customer budget."""

    q: np.ndarray  # (N, M) float; NaN = ineligible
    costs_cents: tuple[int, ...]
    budget_cents: int

    def __post_init__(self):
        q = np.asarray(self.q, dtype=float)
        if q.ndim != 2 or q.shape[0] < 1:
            raise ValueError("q must be a 2-D matrix with at least one row")
        if q.shape[1] != len(self.costs_cents):
            raise ValueError(f"q has {q.shape[1]} columns, costs has {len(self.costs_cents)}")
        present = np.isfinite(q)
        if not present.any(axis=1).all():
            raise ValueError("every customer needs at least one eligible action")
        if np.isinf(q).any():
            raise ValueError("q entries must be finite or NaN")
        object.__setattr__(self, "q", q)

    @property
    def n(self) -> int:
        return self.q.shape[0]

    @property
    def m(self) -> int:
        return self.q.shape[1]

    def costs_units(self) -> np.ndarray:
        return np.asarray(self.costs_cents, dtype=float) / 100.0

    @property
    def budget_units(self) -> float:
        return self.budget_cents / 100.0


@dataclass(frozen=True)
class Assignment:
    """One chosen action per customer plus the multiplier that produced it."""

    chosen: tuple[int, ...]
    lam: float
    objective: float
    total_cost_cents: int


def _argmax_cheapest(scores: np.ndarray, costs_units: np.ndarray) -> np.ndarray:
    """Row-wise argmax with ties broken toward the cheaper action."""
    rowmax = scores.max(axis=1, keepdims=True)
    tie_cost = np.where(scores == rowmax, costs_units[None, :], np.inf)
    return np.argmin(tie_cost, axis=1)


def _dual_selection(problem: AllocationProblem, lam: float) -> np.ndarray:
    """Per-customer argmax of q_ij - lam * c_j (ties toward cheaper)."""
    costs = problem.costs_units()
    scores = np.where(np.isfinite(problem.q), problem.q - lam * costs[None, :], -np.inf)
    return _argmax_cheapest(scores, costs)


def _selection_cost_cents(problem: AllocationProblem, chosen: np.ndarray) -> int:
    costs = np.asarray(problem.costs_cents, dtype=np.int64)
    return int(costs[chosen].sum())


def _cheapest_total_cents(problem: AllocationProblem) -> int:
    costs = np.asarray(problem.costs_cents, dtype=np.int64)
    per_row_min = np.where(np.isfinite(problem.q), costs[None, :], np.iinfo(np.int64).max).min(axis=1)
    return int(per_row_min.sum())


def dual_objective(problem: AllocationProblem, lam: float) -> float:
    """sum_i max_j {q_ij - lam c_j} + lam * N * budget, over eligible entries."""
    if lam < 0:
        raise ValueError("lambda must be >= 0")
    costs = problem.costs_units()
    scores = np.where(np.isfinite(problem.q), problem.q - lam * costs[None, :], -np.inf)
    return float(scores.max(axis=1).sum() + lam * problem.n * problem.budget_units)


def solve_lambda(problem: AllocationProblem, tol: float = 1e-9) -> float:
    """Minimize the piecewise-linear dual over lam >= 0 by subgradient bisection.

    Returns 0 when the unconstrained greedy assignment already fits the
    budget, and raises InfeasibleProblemError when even the cheapest eligible
    assignment does not.
    """
    if tol <= 0:
        raise ValueError("tol must be > 0")
    budget_total = problem.n * problem.budget_cents
    if _selection_cost_cents(problem, _dual_selection(problem, 0.0)) <= budget_total:
        return 0.0
    if _cheapest_total_cents(problem) > budget_total:
        raise InfeasibleProblemError(
            "budget below the cheapest eligible assignment; no multiplier can satisfy it")

    # Beyond lam_max every row prefers its cheapest action: value differences
    # can no longer outweigh lam times the smallest positive cost gap.
    q = problem.q
    row_range = np.nanmax(q, axis=1) - np.nanmin(q, axis=1)
    gaps = np.diff(np.unique(problem.costs_units()))
    gaps = gaps[gaps > 0]
    lam_max = float(np.max(row_range)) / float(gaps.min()) if gaps.size else 1.0
    lam_max = max(lam_max * (1.0 + 1e-9), tol)
    while _selection_cost_cents(problem, _dual_selection(problem, lam_max)) > budget_total:
        lam_max *= 2.0

    lo, hi = 0.0, lam_max
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if _selection_cost_cents(problem, _dual_selection(problem, mid)) <= budget_total:
            hi = mid
        else:
            lo = mid
    return hi


def _assign_choice(problem: AllocationProblem, lam: float) -> np.ndarray:
    """Assignment rule: among actions with q_ij - lam(c_j - budget) >= 0 take the
    highest score (cheaper on ties); if none qualifies, the cheapest eligible action."""
    costs = problem.costs_units()
    present = np.isfinite(problem.q)
    scores = np.where(present, problem.q - lam * (costs[None, :] - problem.budget_units), -np.inf)
    cand_scores = np.where(scores >= 0.0, scores, -np.inf)
    has_candidate = (cand_scores > -np.inf).any(axis=1)
    from_candidates = _argmax_cheapest(cand_scores, costs)
    cheapest = np.argmin(np.where(present, costs[None, :], np.inf), axis=1)
    return np.where(has_candidate, from_candidates, cheapest)


def assign(problem: AllocationProblem, lam: float) -> Assignment:
    if lam < 0:
        raise ValueError("lambda must be >= 0")
    chosen = _assign_choice(problem, lam)
    objective = float(problem.q[np.arange(problem.n), chosen].sum())
    return Assignment(chosen=tuple(int(a) for a in chosen), lam=lam, objective=objective,
                      total_cost_cents=_selection_cost_cents(problem, chosen))


def assign_row(q_row: np.ndarray, costs_cents, budget_cents: int, lam: float) -> int:
    """Single-customer assignment rule (used on the online path)."""
    problem = AllocationProblem(np.asarray(q_row, dtype=float)[None, :],
                                tuple(costs_cents), budget_cents)
    return int(_assign_choice(problem, lam)[0])


def _breakpoints(problem: AllocationProblem, above: float) -> np.ndarray:
    """Candidate multipliers where any customer's assignment can change."""
    costs = problem.costs_units()
    bps = []
    for i in range(problem.n):
        present = np.flatnonzero(np.isfinite(problem.q[i]))
        qi = problem.q[i, present]
        ci = costs[present]
        dq = qi[:, None] - qi[None, :]
        dc = ci[:, None] - ci[None, :]
        with np.errstate(divide="ignore", invalid="ignore"):
            ratios = dq / dc
        bps.append(ratios[np.isfinite(ratios) & (ratios > 0)])
        shifted = ci - problem.budget_units
        with np.errstate(divide="ignore", invalid="ignore"):
            zero_cross = qi / shifted
        bps.append(zero_cross[np.isfinite(zero_cross) & (zero_cross > 0)])
    cand = np.unique(np.concatenate(bps)) if bps else np.array([])
    return cand[cand > above]


def _pack_slack(problem: AllocationProblem, assignment: Assignment) -> Assignment:
    """Spend leftover budget on tied rows at the current multiplier.

    At a breakpoint several actions share a row's best assignment score; the
    cheapest-tie rule leaves slack that can be handed back by upgrading some
    of those rows to their dearer tied action (the classic one-fractional-
    customer rounding of the relaxation). Greedy, deterministic, and only
    ever improves the objective within the budget.
    """
    budget_total = problem.n * problem.budget_cents
    total = assignment.total_cost_cents
    if total > budget_total:
        return assignment
    costs_units = problem.costs_units()
    costs_cents = np.asarray(problem.costs_cents, dtype=np.int64)
    present = np.isfinite(problem.q)
    scores = np.where(present,
                      problem.q - assignment.lam * (costs_units[None, :] - problem.budget_units),
                      -np.inf)
    rowmax = scores.max(axis=1)
    upgrades = []  # (-extra_cost, row, action, gain)
    for i in range(problem.n):
        if rowmax[i] < 0.0:
            continue  # fallback row: no assignment-rule candidates to swap among
        tol_i = 1e-9 * max(1.0, abs(rowmax[i]))
        cur = assignment.chosen[i]
        for j in np.flatnonzero(scores[i] >= rowmax[i] - tol_i):
            extra = int(costs_cents[j] - costs_cents[cur])
            gain = float(problem.q[i, j] - problem.q[i, cur])
            if extra > 0 and gain > 0:
                upgrades.append((-extra, i, int(j), gain))
    if not upgrades:
        return assignment

    chosen = list(assignment.chosen)
    used_rows = set()
    for neg_extra, i, j, gain in sorted(upgrades):
        if i in used_rows:
            continue
        if total - neg_extra <= budget_total:
            total -= neg_extra
            chosen[i] = j
            used_rows.add(i)
    objective = float(problem.q[np.arange(problem.n), chosen].sum())
    return Assignment(chosen=tuple(chosen), lam=assignment.lam, objective=objective,
                      total_cost_cents=int(total))


def repair_feasibility(problem: AllocationProblem, assignment: Assignment) -> Assignment:
    """Raise the multiplier through successive breakpoints until the budget holds,
    then spend any slack on rows left tied at the final breakpoint.

    Only ever moves lam upward (cost downward); raises InfeasibleProblemError
    when no multiplier can meet the budget.
    """
    budget_total = problem.n * problem.budget_cents
    if assignment.total_cost_cents <= budget_total:
        return assignment
    if _cheapest_total_cents(problem) > budget_total:
        raise InfeasibleProblemError(
            "budget below the cheapest eligible assignment; repair cannot terminate")

    cands = _breakpoints(problem, above=assignment.lam)
    # Cost is non-increasing in lam, so feasibility is monotone over candidates.
    feasible_at = {}

    def feasible(idx: int) -> bool:
        if idx not in feasible_at:
            chosen = _assign_choice(problem, float(cands[idx]))
            feasible_at[idx] = _selection_cost_cents(problem, chosen) <= budget_total
        return feasible_at[idx]

    lo, hi = 0, len(cands) - 1
    if len(cands) == 0 or not feasible(hi):
        # Float rounding can leave the last exact breakpoint on the expensive
        # side; a relative nudge lands strictly past it.
        lam = float(cands[hi]) * (1.0 + 1e-12) + 1e-15 if len(cands) else assignment.lam + 1.0
        result = assign(problem, lam)
        if result.total_cost_cents > budget_total:
            raise InfeasibleProblemError("repair failed to reach a feasible assignment")
        return _pack_slack(problem, result)
    while lo < hi:
        mid = (lo + hi) // 2
        if feasible(mid):
            hi = mid
        else:
            lo = mid + 1
    return _pack_slack(problem, assign(problem, float(cands[lo])))


def solve_and_assign(problem: AllocationProblem, tol: float = 1e-9) -> Assignment:
    """Dual solve, assignment, feasibility repair, then slack packing."""
    lam = solve_lambda(problem, tol)
    result = assign(problem, lam)
    if result.total_cost_cents > problem.n * problem.budget_cents:
        return repair_feasibility(problem, result)
    return _pack_slack(problem, result)


# ---------------------------------------------------------------------------
# Near-real-time multiplier maintenance


@dataclass(frozen=True)
class WindowRecord:
    ts: float
    q_row: np.ndarray
    action_index: int
    cost_cents: int


class WindowStore:
    """Time-ordered record window feeding periodic multiplier refreshes.

    Timestamps are logical (caller-provided seconds), so tests and
    simulations run in virtual time. ``lambda_snapshot`` is published
    atomically; readers never block on a refresh.
    """

    def __init__(self, costs_cents, budget_cents: int,
                 window_span: float = 24 * 3600.0, refresh_period: float = 600.0,
                 initial_lambda: float = 0.0, tol: float = 1e-7):
        self.costs_cents = tuple(int(c) for c in costs_cents)
        self.budget_cents = int(budget_cents)
        self.window_span = float(window_span)
        self.refresh_period = float(refresh_period)
        self.tol = tol
        self.lambda_snapshot = float(initial_lambda)
        self.last_refresh: float | None = None
        self._records: deque[WindowRecord] = deque()
        self._lock = threading.Lock()

    def __len__(self) -> int:
        return len(self._records)

    def append(self, ts: float, q_row: np.ndarray, action_index: int, cost_cents: int) -> None:
        with self._lock:
            self._records.append(WindowRecord(ts, np.asarray(q_row, dtype=float),
                                              int(action_index), int(cost_cents)))

    def _evict(self, now: float) -> None:
        cutoff = now - self.window_span
        while self._records and self._records[0].ts <= cutoff:
            self._records.popleft()

    def window_refresh(self, now: float) -> float:
        """Evict expired records, re-solve the multiplier, publish the snapshot.

        An empty window keeps the previous snapshot; so does a transiently
        infeasible one (the budget stays protected by the old, larger lam).
        """
        with self._lock:
            self._evict(now)
            rows = [r.q_row for r in self._records]
        if rows:
            problem = AllocationProblem(np.stack(rows), self.costs_cents, self.budget_cents)
            try:
                self.lambda_snapshot = solve_lambda(problem, self.tol)
            except InfeasibleProblemError:
                pass
        self.last_refresh = now
        return self.lambda_snapshot

    def allocate_online(self, q_row: np.ndarray, now: float) -> int:
        """Single-customer assignment at the current snapshot; logs the record."""
        action = assign_row(q_row, self.costs_cents, self.budget_cents, self.lambda_snapshot)
        self.append(now, q_row, action, self.costs_cents[action])
        return action
