"""Single-batch assignment solvers used both as baseline policies and as
correctness oracles for each other.

All solvers share one objective so their totals are comparable: assign as many
pairs as possible first, then optimize the total (minimum cost or maximum gain
per the matrix mode). Forbidden entries are never part of any output.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment

from .core import DomainError

Assignment = list[tuple[int, int]]  # (row, col) = (order index, driver index)

BRUTE_FORCE_MAX_SIDE = 8


@dataclass
class CostMatrix:
    """Rectangular batch matrix: rows are orders, columns are drivers.
    ``mode`` is "min" (entries are costs) or "max" (entries are gains);
    ``forbidden`` marks ineligible pairs."""

    values: np.ndarray
    mode: str = "min"
    forbidden: np.ndarray | None = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise DomainError("cost matrix must be 2-dimensional")
        if self.mode not in ("min", "max"):
            raise DomainError(f"mode must be 'min' or 'max', got {self.mode!r}")
        if self.forbidden is None:
            self.forbidden = np.zeros(self.values.shape, dtype=bool)
        else:
            self.forbidden = np.asarray(self.forbidden, dtype=bool)
            if self.forbidden.shape != self.values.shape:
                raise DomainError("forbidden mask shape must match values")

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    def cost_space(self) -> np.ndarray:
        """Values mapped so that smaller is always better."""
        return self.values if self.mode == "min" else -self.values

    def total(self, pairs: Assignment) -> float:
        return float(sum(self.values[r, c] for r, c in pairs))


def greedy_match(m: CostMatrix) -> Assignment:
    """Repeatedly take the best remaining eligible entry, ties broken by
    (row, col) ascending."""
    rows, cols = m.shape
    if rows == 0 or cols == 0:
        return []
    cost = m.cost_space()
    entries = [(cost[r, c], r, c)
               for r in range(rows) for c in range(cols)
               if not m.forbidden[r, c]]
    entries.sort(key=lambda e: (e[0], e[1], e[2]))
    used_r: set[int] = set()
    used_c: set[int] = set()
    out: Assignment = []
    for _, r, c in entries:
        if r in used_r or c in used_c:
            continue
        out.append((r, c))
        used_r.add(r)
        used_c.add(c)
    out.sort()
    return out


def km_match(m: CostMatrix) -> Assignment:
    """Optimal assignment: maximum cardinality, best total among those.

    Rectangular and forbidden-entry handling by padding to a square
    (rows + cols) matrix: entries are shifted to be non-negative (a per-pair
    constant shift cannot change the optimum within a cardinality class) and
    each side gets an unassigned-dummy diagonal priced above any augmenting
    path's cost swing, so the solver never trades cardinality for cost.
    """
    rows, cols = m.shape
    if rows == 0 or cols == 0:
        return []
    cost = m.cost_space()
    allowed = ~m.forbidden
    if not allowed.any():
        return []
    shifted = cost - float(cost[allowed].min())
    span = float(shifted[allowed].max())
    pad = (min(rows, cols) + 1) * (span + 1.0)

    k = rows + cols
    big = np.full((k, k), np.inf)
    big[:rows, :cols] = np.where(allowed, shifted, np.inf)
    big[np.arange(rows), cols + np.arange(rows)] = pad
    big[rows + np.arange(cols), np.arange(cols)] = pad
    big[rows:, cols:] = 0.0

    rr, cc = linear_sum_assignment(big)
    out = [(int(r), int(c)) for r, c in zip(rr, cc)
           if r < rows and c < cols and allowed[r, c]]
    out.sort()
    return out


def brute_force_match(m: CostMatrix) -> Assignment:
    """Exhaustive optimum over all one-to-one assignments; exactness oracle
    for km_match. Refuses instances with min side above
    BRUTE_FORCE_MAX_SIDE."""
    rows, cols = m.shape
    if min(rows, cols) > BRUTE_FORCE_MAX_SIDE:
        raise DomainError(f"brute force limited to min side {BRUTE_FORCE_MAX_SIDE}, "
                          f"got {rows}x{cols}")
    if rows == 0 or cols == 0:
        return []
    cost = m.cost_space()
    allowed = ~m.forbidden

    best: tuple[int, float, tuple] | None = None  # (-cardinality, total, pairs)

    def recurse(r: int, used_cols: int, pairs: list[tuple[int, int]], total: float):
        nonlocal best
        if r == rows:
            key = (-len(pairs), total, tuple(pairs))
            if best is None or key < best:
                best = key
            return
        recurse(r + 1, used_cols, pairs, total)  # leave row r unassigned
        for c in range(cols):
            if allowed[r, c] and not used_cols & (1 << c):
                pairs.append((r, c))
                recurse(r + 1, used_cols | (1 << c), pairs, total + cost[r, c])
                pairs.pop()

    recurse(0, 0, [], 0.0)
    assert best is not None
    return list(best[2])


# -- stable matching -----------------------------------------------------------

def prefs_from_cost(m: CostMatrix) -> tuple[list[list[int]], list[list[int]]]:
    """Strict preference lists over eligible partners derived from the matrix:
    better entry preferred, ties broken by partner index."""
    rows, cols = m.shape
    cost = m.cost_space()
    order_prefs = []
    for r in range(rows):
        eligible = [c for c in range(cols) if not m.forbidden[r, c]]
        eligible.sort(key=lambda c: (cost[r, c], c))
        order_prefs.append(eligible)
    driver_prefs = []
    for c in range(cols):
        eligible = [r for r in range(rows) if not m.forbidden[r, c]]
        eligible.sort(key=lambda r: (cost[r, c], r))
        driver_prefs.append(eligible)
    return order_prefs, driver_prefs


def gs_match(order_prefs: list[list[int]], driver_prefs: list[list[int]]) -> Assignment:
    """Order-proposing deferred acceptance. Preference lists may be partial;
    unlisted partners are unacceptable. The result has no blocking pair."""
    n_orders = len(order_prefs)
    driver_rank = [{r: k for k, r in enumerate(prefs)} for prefs in driver_prefs]
    match_of_driver: dict[int, int] = {}
    next_choice = [0] * n_orders
    free = list(range(n_orders - 1, -1, -1))  # pop() proposes in ascending order
    while free:
        o = free.pop()
        while next_choice[o] < len(order_prefs[o]):
            d = order_prefs[o][next_choice[o]]
            next_choice[o] += 1
            if o not in driver_rank[d]:
                continue  # driver finds this order unacceptable
            cur = match_of_driver.get(d)
            if cur is None:
                match_of_driver[d] = o
                break
            if driver_rank[d][o] < driver_rank[d][cur]:
                match_of_driver[d] = o
                free.append(cur)
                break
        # exhausted list: order stays unmatched
    out = sorted((o, d) for d, o in match_of_driver.items())
    return out


def blocking_pairs(order_prefs: list[list[int]], driver_prefs: list[list[int]],
                   matching: Assignment) -> list[tuple[int, int]]:
    """All mutually-acceptable pairs that would both rather be together than
    stay with their current partners. Empty for a stable matching."""
    order_rank = [{d: k for k, d in enumerate(prefs)} for prefs in order_prefs]
    driver_rank = [{r: k for k, r in enumerate(prefs)} for prefs in driver_prefs]
    match_of_order = {o: d for o, d in matching}
    match_of_driver = {d: o for o, d in matching}
    blocking = []
    for o, prefs in enumerate(order_prefs):
        for d in prefs:
            if o not in driver_rank[d]:
                continue
            cur_d = match_of_order.get(o)
            cur_o = match_of_driver.get(d)
            o_prefers = cur_d is None or order_rank[o][d] < order_rank[o][cur_d]
            d_prefers = cur_o is None or driver_rank[d][o] < driver_rank[d][cur_o]
            if o_prefers and d_prefers:
                blocking.append((o, d))
    return blocking


# -- pool helpers and the fixed-delay batch policy ------------------------------

def pool_cost_matrix(state, task: str) -> tuple[CostMatrix, list[int], list[int], dict]:
    """Build the batch matrix for an outer state's pool.

    task "distance" minimizes normalized pickup distance (passenger task);
    task "price" maximizes normalized price (income task). Returns the matrix,
    the sorted order and driver ids backing rows/cols, and a (row, col) ->
    pool row index map.
    """
    from .env import F_PICKUP, F_PRICE
    if task not in ("distance", "price"):
        raise DomainError(f"task must be 'distance' or 'price', got {task!r}")
    order_ids = sorted({p.order_id for p in state.pool})
    driver_ids = sorted({p.driver_id for p in state.pool})
    r_of = {o: i for i, o in enumerate(order_ids)}
    c_of = {d: i for i, d in enumerate(driver_ids)}
    values = np.zeros((len(order_ids), len(driver_ids)))
    forbidden = np.ones((len(order_ids), len(driver_ids)), dtype=bool)
    row_of_rc: dict[tuple[int, int], int] = {}
    col = F_PICKUP if task == "distance" else F_PRICE
    for idx, p in enumerate(state.pool):
        r, c = r_of[p.order_id], c_of[p.driver_id]
        values[r, c] = p.features[col]
        forbidden[r, c] = False
        row_of_rc[(r, c)] = idx
    mode = "min" if task == "distance" else "max"
    return CostMatrix(values, mode=mode, forbidden=forbidden), order_ids, driver_ids, row_of_rc


def solve_pool(state, task: str, solver: str = "km") -> list[int]:
    """Run a one-batch solver over the pool; returns selected pool rows."""
    if not state.pool:
        return []
    matrix, _, _, row_of_rc = pool_cost_matrix(state, task)
    if solver == "km":
        pairs = km_match(matrix)
    elif solver == "greedy":
        pairs = greedy_match(matrix)
    elif solver == "gs":
        pairs = gs_match(*prefs_from_cost(matrix))
    else:
        raise DomainError(f"unknown solver {solver!r}")
    return sorted(row_of_rc[rc] for rc in pairs)


class FixedDelayPolicy:
    """Plumbing baseline: run the optimal matcher every k-th batch and at the
    final batch, hold everything in between."""

    def __init__(self, delay_batches: int, task: str = "price"):
        if delay_batches < 1:
            raise DomainError(f"delay_batches must be >= 1, got {delay_batches}")
        self.delay = int(delay_batches)
        self.task = task
        self._t = 0
        self._total = None

    def reset(self, total_batches: int, seed: int = 0) -> None:
        self._t = 0
        self._total = int(total_batches)

    def should_match(self, t: int) -> bool:
        if self._total is not None and t == self._total - 1:
            return True
        return (t + 1) % self.delay == 0

    def act(self, state) -> tuple[list[int], list[int]]:
        t = self._t
        self._t += 1
        if not self.should_match(t):
            return [], list(range(len(state.pool)))
        # max-cardinality matching leaves only rows that conflict with a
        # selection, so nothing survives to be held on matching batches
        return solve_pool(state, self.task, "km"), []
