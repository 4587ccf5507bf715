"""Minimum-cost injective assignment (rows <= cols).

Shortest-augmenting-path Hungarian algorithm with row/column potentials,
followed by a canonicalisation pass that moves to the lexicographically
smallest optimal assignment when ties exist.
"""
from __future__ import annotations

import itertools

import numpy as np

from .errors import InfeasibleError, NonFiniteError


def hungarian(cost):
    """Return ``cols`` with ``cols[i]`` the column assigned to row ``i``.

    Minimises ``sum(cost[i, cols[i]])`` over injective maps.  Among optimal
    maps the lexicographically smallest ``cols`` is returned.
    """
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2:
        raise InfeasibleError(f"cost must be a matrix, got shape {cost.shape}")
    n, m = cost.shape
    if n > m:
        raise InfeasibleError(f"{n} rows cannot be matched injectively into {m} columns")
    if not np.all(np.isfinite(cost)):
        raise NonFiniteError("cost matrix has non-finite entries")
    if n == 0:
        return np.zeros(0, dtype=np.intp)
    cols, u, v = _solve(cost)
    return _lex_canonical(cost, cols, u, v)


def assignment_cost(cost, cols):
    cost = np.asarray(cost)
    return float(cost[np.arange(len(cols)), cols].sum())


def _solve(cost):
    n, m = cost.shape
    inf = np.inf
    u = np.zeros(n + 1)
    v = np.zeros(m + 1)
    p = np.zeros(m + 1, dtype=np.intp)  # p[j]: 1-based row owning column j (0 = free)
    way = np.zeros(m + 1, dtype=np.intp)
    c = np.zeros((n + 1, m + 1))
    c[1:, 1:] = cost
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = np.full(m + 1, inf)
        used = np.zeros(m + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = p[j0]
            free = ~used
            free[0] = False
            cur = c[i0] - u[i0] - v
            better = free & (cur < minv)
            minv[better] = cur[better]
            way[better] = j0
            cand = np.where(free, minv, inf)
            j1 = int(np.argmin(cand))
            delta = cand[j1]
            u[p[used]] += delta
            v[used] -= delta
            minv[free] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while True:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
            if j0 == 0:
                break
    cols = np.full(n, -1, dtype=np.intp)
    for j in range(1, m + 1):
        if p[j]:
            cols[p[j] - 1] = j - 1
    return cols, u[1:], v[1:]


def _lex_canonical(cost, cols, u, v):
    """Walk rows in order and give each the smallest column that still admits
    an optimal completion.

    An assignment is optimal iff it only uses tight edges (``u_i + v_j ==
    c_ij``) and leaves only columns with ``v_j == 0`` unmatched, so moving row
    ``i`` to column ``j`` keeps optimality iff an alternating chain of tight
    moves starting at ``j`` refills ``i``'s old column.
    """
    n, m = cost.shape
    scale = max(1.0, float(np.abs(cost).max()))
    tol = 1e-12 * scale
    tight = np.abs(cost - u[:, None] - v[None, :]) <= tol
    freeable = np.abs(v) <= tol
    best = cols.copy()
    owner = np.full(m, -1, dtype=np.intp)
    owner[best] = np.arange(n)
    fixed_cols = np.zeros(m, dtype=bool)
    for i in range(n):
        cur = best[i]
        for j in np.flatnonzero(tight[i, :cur]):
            if fixed_cols[j]:
                continue
            path = _chain(i, j, cur, tight, owner, best, fixed_cols, freeable)
            if path is None:
                continue
            trial = best.copy()
            for row, col in path:
                trial[row] = col
            if assignment_cost(cost, trial) <= assignment_cost(cost, best) + tol:
                best = trial
                owner[:] = -1
                owner[best] = np.arange(n)
            break
        fixed_cols[best[i]] = True
    return best


def _chain(i, j, old, tight, owner, cols, fixed_cols, freeable):
    """BFS over columns for a reassignment giving row ``i`` column ``j``.

    Free columns are treated as owned by dummy rows that are tight with every
    ``v == 0`` column.  The chain succeeds when some row (or dummy) moves into
    ``old``.  Returns the real ``(row, new_col)`` moves or None.
    """
    parent = {j: None}
    queue = [j]
    head = 0
    while head < len(queue):
        col = queue[head]
        head += 1
        r = owner[col]
        nbrs = tight[r] if r >= 0 else freeable
        for nxt in np.flatnonzero(nbrs & ~fixed_cols):
            if nxt in parent:
                continue
            parent[nxt] = col
            if nxt == old:
                moves = [(i, j)]
                c = nxt
                while parent[c] is not None:
                    mover = owner[parent[c]]
                    if mover >= 0:
                        moves.append((mover, c))
                    c = parent[c]
                return moves
            queue.append(nxt)
    return None


def brute_force(cost):
    """Exhaustive minimum over all injective row->column maps (small inputs).

    Returns ``(cols, total)`` with the lexicographically first optimum.
    """
    cost = np.asarray(cost, dtype=np.float64)
    n, m = cost.shape
    if n > m:
        raise InfeasibleError("more rows than columns")
    perms = np.array(list(itertools.permutations(range(m), n)), dtype=np.intp).reshape(-1, n)
    totals = cost[np.arange(n), perms].sum(axis=1)
    k = int(np.argmin(totals))  # permutations come in lexicographic order
    return perms[k], float(totals[k])
