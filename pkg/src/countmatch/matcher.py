"""Counting-constrained mask/category assignment.

Given an N x M similarity matrix ``S`` and per-category counts ``num``, find
a binary ``X`` minimizing ``sum (1 - s_ij) x_ij`` such that every mask takes
at most one category and either

* each category j receives exactly ``num[j]`` masks (when N >= sum(num)), or
* every mask is assigned (when N < sum(num)).

The first case is a transportation problem and is solved exactly as a
min-cost flow (source -> masks -> categories -> sink) by successive shortest
paths. The second case has no per-category limit, so each mask independently
takes its cheapest category.

Among cost-equal optima the lexicographically smallest pair set (pairs
ordered by ``(mask, category)``) is returned. This is done after the flow
solve: with optimal node potentials every alternative optimum differs from
the current one by cycles of zero-reduced-cost residual edges, so pairs are
visited in ascending order and each one is pulled in if such a cycle exists
that leaves every smaller pair untouched.
"""
from __future__ import annotations

import bisect
import enum
import math
from collections import deque
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import InputError, SizeGuardError

OBJECTIVE_TOL = 1e-9
TIE_TOL = 1e-11
BRUTE_FORCE_MAX_MASKS = 10
BRUTE_FORCE_MAX_CATEGORIES = 4


class Regime(str, enum.Enum):
    COUNT_EXACT = "CountExact"
    ALL_PROPOSALS = "AllProposals"


@dataclass(frozen=True)
class MatchingProblem:
    similarity: np.ndarray
    counts: tuple[int, ...]

    def __init__(self, similarity, counts: Sequence[int]):
        sim = np.array(similarity, dtype=np.float64)
        if sim.ndim == 1 and sim.size == 0:
            sim = sim.reshape(0, len(counts))
        if sim.ndim != 2:
            raise InputError(f"similarity must be 2-D, got shape {sim.shape}")
        if not np.all(np.isfinite(sim)):
            raise InputError("similarity contains non-finite entries")
        cnt = tuple(int(c) for c in counts)
        if len(cnt) != sim.shape[1]:
            raise InputError(
                f"{len(cnt)} counts given for {sim.shape[1]} similarity columns"
            )
        if any(c < 0 for c in cnt):
            raise InputError(f"counts must be non-negative, got {cnt}")
        sim.setflags(write=False)
        object.__setattr__(self, "similarity", sim)
        object.__setattr__(self, "counts", cnt)

    @property
    def n_masks(self) -> int:
        return self.similarity.shape[0]

    @property
    def n_categories(self) -> int:
        return self.similarity.shape[1]

    @property
    def total_count(self) -> int:
        return sum(self.counts)

    @property
    def regime(self) -> Regime:
        if self.n_masks >= self.total_count:
            return Regime.COUNT_EXACT
        return Regime.ALL_PROPOSALS


@dataclass(frozen=True)
class Assignment:
    pairs: tuple[tuple[int, int], ...]
    objective: float
    regime: Regime

    def __len__(self) -> int:
        return len(self.pairs)

    def as_matrix(self, n_masks: int, n_categories: int) -> np.ndarray:
        x = np.zeros((n_masks, n_categories), dtype=np.int8)
        for i, j in self.pairs:
            x[i, j] = 1
        return x

    def category_of(self) -> dict[int, int]:
        return dict(self.pairs)


def assignment_objective(similarity: np.ndarray, pairs) -> float:
    return math.fsum(1.0 - float(similarity[i, j]) for i, j in pairs)


def _finish(problem: MatchingProblem, assign: np.ndarray) -> Assignment:
    pairs = tuple((int(i), int(assign[i])) for i in np.flatnonzero(assign >= 0))
    return Assignment(
        pairs=pairs,
        objective=assignment_objective(problem.similarity, pairs),
        regime=problem.regime,
    )


def _trivial(problem: MatchingProblem) -> bool:
    return problem.n_masks == 0 or problem.n_categories == 0 or problem.total_count == 0


def solve_matching(problem: MatchingProblem) -> Assignment:
    """Globally optimal assignment with deterministic lexicographic tie-breaking."""
    if _trivial(problem):
        return Assignment((), 0.0, problem.regime)
    cost = 1.0 - problem.similarity
    if problem.regime is Regime.ALL_PROPOSALS:
        best = cost.min(axis=1, keepdims=True)
        assign = np.argmax(cost <= best + TIE_TOL, axis=1)
        return _finish(problem, assign)
    caps = np.asarray(problem.counts, dtype=np.int64)
    assign = _successive_shortest_paths(cost, caps)
    assign = _lexicographic_refine(cost, assign)
    return _finish(problem, assign)


def _successive_shortest_paths(cost: np.ndarray, caps: np.ndarray) -> np.ndarray:
    """Min-cost flow of value sum(caps) on the mask/category network.

    Residual paths alternate categories and currently-assigned masks, so the
    search runs on a graph of category nodes only: ``entry[j]`` is the cheapest
    free mask for j, and ``trans[k, j]`` the cheapest way to move one mask
    from k to j. Masks never return to the free pool, which keeps the per-
    column entry pointers monotone.
    """
    n, m = cost.shape
    cols = np.arange(m)
    assign = np.full(n, -1, dtype=np.int64)
    free = np.ones(n, dtype=bool)
    load = np.zeros(m, dtype=np.int64)
    order = np.argsort(cost, axis=0, kind="stable")
    ptr = np.zeros(m, dtype=np.int64)
    trans = np.full((m, m), np.inf)
    trans_arg = np.full((m, m), -1, dtype=np.int64)

    def refresh(g: int) -> None:
        members = np.flatnonzero(assign == g)
        if members.size == 0:
            trans[g] = np.inf
            trans_arg[g] = -1
            return
        delta = cost[members] - cost[members, g][:, None]
        k = delta.argmin(axis=0)
        trans[g] = delta[k, cols]
        trans_arg[g] = members[k]
        trans[g, g] = np.inf

    entry = np.empty(m)
    entry_arg = np.empty(m, dtype=np.int64)
    for _ in range(int(caps.sum())):
        for j in range(m):
            p = ptr[j]
            while p < n and not free[order[p, j]]:
                p += 1
            ptr[j] = p
            if p < n:
                entry[j] = cost[order[p, j], j]
                entry_arg[j] = order[p, j]
            else:
                entry[j] = np.inf
                entry_arg[j] = -1

        dist = entry.copy()
        pred = np.full(m, -1, dtype=np.int64)
        for _ in range(m):
            cand = dist[:, None] + trans
            k = cand.argmin(axis=0)
            val = cand[k, cols]
            better = val < dist
            if not better.any():
                break
            dist[better] = val[better]
            pred[better] = k[better]

        open_dist = np.where(load < caps, dist, np.inf)
        target = int(open_dist.argmin())
        if not np.isfinite(open_dist[target]):
            raise RuntimeError("no augmenting path in a feasible transportation problem")

        moves = []
        touched = []
        j = target
        while pred[j] >= 0:
            k = int(pred[j])
            moves.append((int(trans_arg[k, j]), j))
            touched.append(j)
            j = k
            if len(touched) > m:
                raise RuntimeError("cycle in shortest-path tree")
        touched.append(j)
        entering = int(entry_arg[j])
        moves.append((entering, j))
        for mask, cat in moves:
            assign[mask] = cat
        free[entering] = False
        load[target] += 1
        for g in touched:
            refresh(g)
    return assign


def _potentials(cost: np.ndarray, assign: np.ndarray) -> tuple[float, np.ndarray, np.ndarray]:
    """Shortest-path potentials on the residual network of an optimal flow.

    Nodes are the source, masks and categories; the sink is saturated and
    plays no part. Bellman-Ford from a virtual root attached to every node.
    """
    n, m = cost.shape
    assigned = assign >= 0
    idx = np.flatnonzero(assigned)
    cat = assign[idx]
    fwd = cost.copy()
    fwd[idx, cat] = np.inf
    rev = -cost[idx, cat]
    d_s = 0.0
    d_m = np.zeros(n)
    d_c = np.zeros(m)
    for _ in range(n + m + 2):
        new_m = d_m.copy()
        new_m[~assigned] = np.minimum(d_m[~assigned], d_s)
        new_m[idx] = np.minimum(d_m[idx], d_c[cat] + rev)
        new_s = min(d_s, float(d_m[idx].min())) if idx.size else d_s
        new_c = np.minimum(d_c, (d_m[:, None] + fwd).min(axis=0))
        if new_s == d_s and np.array_equal(new_m, d_m) and np.array_equal(new_c, d_c):
            break
        d_s, d_m, d_c = new_s, new_m, new_c
    return d_s, d_m, d_c


def _lexicographic_refine(cost: np.ndarray, assign: np.ndarray) -> np.ndarray:
    n, m = cost.shape
    assign = assign.copy()
    d_s, d_m, d_c = _potentials(cost, assign)
    tight = np.abs(cost + d_m[:, None] - d_c[None, :]) <= TIE_TOL
    tight_src = np.abs(d_s - d_m) <= TIE_TOL

    cats_of_mask = {int(i): [int(j) for j in np.flatnonzero(row)] for i, row in enumerate(tight) if row.any()}
    # sorted mask lists: tight members per category, and free masks joined tightly to the source
    members = [sorted(int(i) for i in np.flatnonzero((assign == j) & tight[:, j])) for j in range(m)]
    free_src = sorted(int(i) for i in np.flatnonzero((assign < 0) & tight_src))

    for i, j in np.argwhere(tight):
        i, j = int(i), int(j)
        a = int(assign[i])
        if a == j:
            continue
        # the cycle must re-enter mask i through an unlocked edge
        if not ((a > j and tight[i, a]) or (a < 0 and tight_src[i])):
            continue
        path = _find_cycle(i, j, assign, cats_of_mask, members, free_src, tight_src)
        if path is None:
            continue
        for u, v in zip(path, path[1:]):
            if u[0] == "c" and v[0] == "m":
                members[u[1]].remove(v[1])
                assign[v[1]] = -1
            elif u[0] == "m" and v[0] == "c":
                bisect.insort(members[v[1]], u[1])
                assign[u[1]] = v[1]
            elif u[0] == "m" and v[0] == "s" and tight_src[u[1]]:
                bisect.insort(free_src, u[1])
            elif u[0] == "s":
                free_src.remove(v[1])
        bisect.insort(members[j], i)
        assign[i] = j
    return assign


def _find_cycle(i, j, assign, cats_of_mask, members, free_src, tight_src):
    """BFS from category j back to mask i over unlocked tight residual edges.

    Edges touching a pair smaller than (i, j) are locked, which restricts
    every mask visited to index >= i.
    """
    start = ("c", j)
    goal = ("m", i)
    parent = {start: None}
    queue = deque([start])
    while queue:
        node = queue.popleft()
        kind, x = node
        if kind == "c":
            pool = members[x]
            lo = i if x > j else i + 1
            nxt = [("m", mm) for mm in pool[bisect.bisect_left(pool, lo):]]
        elif kind == "m":
            nxt = [("c", k) for k in cats_of_mask.get(x, ()) if assign[x] != k and (x > i or k > j)]
            if assign[x] >= 0 and tight_src[x]:
                nxt.append(("s", 0))
        else:
            nxt = [("m", mm) for mm in free_src[bisect.bisect_left(free_src, i):]]
        for v in nxt:
            if v in parent:
                continue
            parent[v] = node
            if v == goal:
                path = [v]
                while parent[path[-1]] is not None:
                    path.append(parent[path[-1]])
                return path[::-1]
            queue.append(v)
    return None


def brute_force_matching(problem: MatchingProblem) -> Assignment:
    """Exhaustive oracle over all (M + 1) ** N assignment vectors."""
    n, m = problem.n_masks, problem.n_categories
    if n > BRUTE_FORCE_MAX_MASKS or m > BRUTE_FORCE_MAX_CATEGORIES:
        raise SizeGuardError(
            f"brute force limited to N <= {BRUTE_FORCE_MAX_MASKS}, M <= "
            f"{BRUTE_FORCE_MAX_CATEGORIES}; got N={n}, M={m}"
        )
    if _trivial(problem):
        return Assignment((), 0.0, problem.regime)
    base = m + 1
    # digit m encodes "unassigned" so that code order is lexicographic pair order
    ext = np.hstack([1.0 - problem.similarity, np.zeros((n, 1))])
    weights = base ** np.arange(n - 1, -1, -1, dtype=np.int64)
    counts = np.asarray(problem.counts)
    total = base**n
    chunk = 1 << 18
    kept_codes, kept_costs = [], []
    for lo in range(0, total, chunk):
        codes = np.arange(lo, min(lo + chunk, total), dtype=np.int64)
        digits = (codes[:, None] // weights[None, :]) % base
        if problem.regime is Regime.COUNT_EXACT:
            ok = np.ones(len(codes), dtype=bool)
            for j in range(m):
                ok &= (digits == j).sum(axis=1) == counts[j]
        else:
            ok = (digits != m).all(axis=1)
        if not ok.any():
            continue
        codes, digits = codes[ok], digits[ok]
        costs = ext[np.arange(n)[None, :], digits].sum(axis=1)
        near = costs <= costs.min() + TIE_TOL
        kept_codes.append(codes[near])
        kept_costs.append(costs[near])
    codes = np.concatenate(kept_codes)
    costs = np.concatenate(kept_costs)
    best = codes[costs <= costs.min() + TIE_TOL].min()
    digits = (best // weights) % base
    assign = np.where(digits == m, -1, digits)
    return _finish(problem, assign)


def validate_assignment(problem: MatchingProblem, assignment: Assignment) -> list[str]:
    """Describe every constraint the assignment breaks; empty when valid."""
    n, m = problem.n_masks, problem.n_categories
    problems: list[str] = []
    in_bounds = []
    for i, j in assignment.pairs:
        if not (0 <= i < n and 0 <= j < m):
            problems.append(f"pair ({i}, {j}) out of bounds for a {n}x{m} problem")
        else:
            in_bounds.append((i, j))
    per_mask: dict[int, int] = {}
    for i, _ in in_bounds:
        per_mask[i] = per_mask.get(i, 0) + 1
    for i, c in sorted(per_mask.items()):
        if c > 1:
            problems.append(f"at-most-one: mask {i} carries {c} categories")
    if assignment.regime is not problem.regime:
        problems.append(
            f"regime: assignment says {assignment.regime.value}, problem implies {problem.regime.value}"
        )
    if problem.regime is Regime.COUNT_EXACT:
        per_cat = [0] * m
        for _, j in in_bounds:
            per_cat[j] += 1
        for j, (got, want) in enumerate(zip(per_cat, problem.counts)):
            if got != want:
                problems.append(f"count: category {j} has {got} masks, expected {want}")
    elif len(assignment.pairs) != n:
        problems.append(f"all-proposals: {len(assignment.pairs)} pairs for {n} masks")
    recomputed = assignment_objective(problem.similarity, in_bounds)
    if len(in_bounds) == len(assignment.pairs) and abs(recomputed - assignment.objective) > OBJECTIVE_TOL:
        problems.append(
            f"objective: stored {assignment.objective!r}, recomputed {recomputed!r}"
        )
    return problems

