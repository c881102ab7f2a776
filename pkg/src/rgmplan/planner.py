"""RRT, RRT* and heuristic-biased RRT* (HRRT*) on occupancy grids."""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from .gridmap import GridMap, PlanProblem, Point, segment_free

# keeps uniform draws strictly inside [0, extent)
_BELOW_ONE = math.nextafter(1.0, 0.0)


def default_step(width: int, height: int) -> float:
    """Steer length scaled to the map: 3 cells at 64x64, 8 cells at 201x201."""
    s = min(width, height)
    return 3.0 * s / 64 if s <= 64 else 8.0 * s / 201


@dataclass(frozen=True)
class PlannerConfig:
    step_eta: float = 3.0
    goal_tolerance: float | None = None  # None: same as step_eta
    goal_bias: float = 0.05
    max_iters: int = 5000
    rewire_radius_gamma: float | None = None  # None: derived from the free area
    p_h: float = 0.4
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.goal_bias <= 1.0:
            raise ValueError("goal_bias must lie in [0, 1]")
        if not 0.0 <= self.p_h <= 1.0:
            raise ValueError("p_h must lie in [0, 1]")
        if self.step_eta <= 0:
            raise ValueError("step_eta must be positive")
        if self.max_iters <= 0:
            raise ValueError("max_iters must be positive")

    @property
    def tolerance(self) -> float:
        return self.step_eta if self.goal_tolerance is None else self.goal_tolerance

    @classmethod
    def for_map(cls, gmap: GridMap, **overrides) -> "PlannerConfig":
        return cls(step_eta=default_step(gmap.width, gmap.height), **overrides)

    def with_seed(self, seed: int) -> "PlannerConfig":
        return replace(self, seed=int(seed))


class HeuristicMask:
    """Set of grid cells the planner may draw heuristic samples from."""

    def __init__(self, member: np.ndarray):
        member = np.array(member, dtype=bool)
        if member.ndim != 2:
            raise ValueError("mask must be 2-D")
        member.flags.writeable = False
        self.member = member
        self.height, self.width = member.shape
        self._cells = np.flatnonzero(member)

    @property
    def pixel_count(self) -> int:
        return int(self._cells.size)

    @property
    def cells(self) -> np.ndarray:
        """Flat row-major indices of member cells."""
        return self._cells

    @classmethod
    def full(cls, gmap: GridMap) -> "HeuristicMask":
        return cls(gmap.free)

    def __repr__(self):
        return f"HeuristicMask({self.width}x{self.height}, pixel_count={self.pixel_count})"


class EmptyMaskError(ValueError):
    pass


def sample_uniform(rng: np.random.Generator, gmap: GridMap) -> Point:
    u, v = rng.random(2)
    return (min(u, _BELOW_ONE) * gmap.width, min(v, _BELOW_ONE) * gmap.height)


def sample_heuristic(rng: np.random.Generator, mask: HeuristicMask) -> Point:
    if mask.pixel_count == 0:
        raise EmptyMaskError("cannot sample from an empty heuristic mask")
    idx = int(mask.cells[rng.integers(mask.pixel_count)])
    row, col = divmod(idx, mask.width)
    u, v = rng.random(2)
    return (col + min(u, _BELOW_ONE), row + min(v, _BELOW_ONE))


def biased_sample(
    rng: np.random.Generator,
    gmap: GridMap,
    mask: HeuristicMask | None,
    p_h: float,
    goal: Point | None = None,
    goal_bias: float = 0.0,
) -> Point:
    """Draw from the heuristic with probability ``p_h``, otherwise uniformly.

    One uniform number is consumed on every call so that ``p_h = 0`` and
    ``mask=None`` produce the same random stream.  Goal biasing applies only
    to the uniform branch.
    """
    u = rng.random()
    if mask is not None and mask.pixel_count > 0 and u < p_h:
        return sample_heuristic(rng, mask)
    if goal is not None and goal_bias > 0.0 and rng.random() < goal_bias:
        return goal
    return sample_uniform(rng, gmap)


def path_cost(path: Sequence[Point]) -> float:
    if len(path) < 2:
        raise ValueError("a path needs at least two points")
    return float(sum(math.dist(a, b) for a, b in zip(path[:-1], path[1:])))


class Tree:
    """Search tree with parent links and cost-to-come."""

    def __init__(self, root: Point, capacity: int = 1024):
        self.pos = np.empty((capacity, 2))
        self.parent = np.full(capacity, -1, dtype=np.intp)
        self.cost = np.empty(capacity)
        self.children: list[list[int]] = []
        self.n = 0
        self.root = self.add(root, -1, 0.0)

    def __len__(self):
        return self.n

    def add(self, p: Point, parent: int, cost: float) -> int:
        if self.n == len(self.cost):
            cap = 2 * len(self.cost)
            self.pos = np.resize(self.pos, (cap, 2))
            self.parent = np.resize(self.parent, cap)
            self.cost = np.resize(self.cost, cap)
        i = self.n
        self.pos[i] = p
        self.parent[i] = parent
        self.cost[i] = cost
        self.children.append([])
        if parent >= 0:
            self.children[parent].append(i)
        self.n += 1
        return i

    def point(self, i: int) -> Point:
        return (float(self.pos[i, 0]), float(self.pos[i, 1]))

    def reparent(self, i: int, new_parent: int, new_cost: float) -> None:
        old = int(self.parent[i])
        self.children[old].remove(i)
        self.children[new_parent].append(i)
        self.parent[i] = new_parent
        delta = new_cost - self.cost[i]
        self.cost[i] = new_cost
        stack = list(self.children[i])
        while stack:
            j = stack.pop()
            self.cost[j] += delta
            stack.extend(self.children[j])

    def path_to(self, i: int) -> list[Point]:
        out = []
        while i >= 0:
            out.append(self.point(i))
            i = int(self.parent[i])
        return out[::-1]

    def edges(self) -> list[tuple[Point, Point]]:
        return [(self.point(int(self.parent[i])), self.point(i)) for i in range(self.n) if self.parent[i] >= 0]

    def check_invariants(self, tol: float = 1e-9) -> None:
        """Raise AssertionError on a broken tree (used for replay checks)."""
        parent = self.parent[: self.n]
        roots = np.flatnonzero(parent < 0)
        assert roots.tolist() == [self.root], f"roots {roots.tolist()}"
        depth = np.full(self.n, -1)
        depth[self.root] = 0
        for i in range(self.n):
            seen = set()
            j = i
            while depth[j] < 0:
                assert j not in seen, f"cycle through node {i}"
                seen.add(j)
                j = int(parent[j])
        for i in range(self.n):
            p = int(parent[i])
            if p < 0:
                assert self.cost[i] == 0.0
                continue
            expect = self.cost[p] + math.dist(self.pos[p], self.pos[i])
            assert abs(self.cost[i] - expect) <= tol, f"node {i}: cost {self.cost[i]} != {expect}"


@dataclass
class PlanResult:
    path: list[Point] | None
    path_cost: float
    iters_to_first: int | None
    cost_trace: list[tuple[int, float]]
    iters_total: int
    rng_seed: int
    tree: Tree | None = field(default=None, repr=False, compare=False)

    @property
    def success(self) -> bool:
        return self.path is not None

    def best_cost_at(self, iteration: int) -> float:
        best = math.inf
        for it, c in self.cost_trace:
            if it > iteration:
                break
            best = c
        return best


def _steer(a: Point, b: Point, eta: float) -> Point:
    d = math.dist(a, b)
    if d <= eta:
        return b
    s = eta / d
    return (a[0] + (b[0] - a[0]) * s, a[1] + (b[1] - a[1]) * s)


def _nearest(tree: Tree, p: Point) -> int:
    d = tree.pos[: tree.n] - p
    # argmin returns the first minimum: ties go to the lowest index
    return int(np.argmin(np.einsum("ij,ij->i", d, d)))


def rewire_gamma(gmap: GridMap) -> float:
    """Shrinking-ball constant for 2-D RRT*: 2 * sqrt((1 + 1/2) * free_area / pi)."""
    free_area = float(gmap.free.sum())
    return 2.0 * math.sqrt(1.5 * free_area / math.pi)


def plan_rrt(problem: PlanProblem, cfg: PlannerConfig) -> PlanResult:
    """Plain RRT that stops at the first path to the goal region."""
    gmap, start, goal = problem.map, problem.start, problem.goal
    rng = np.random.default_rng(cfg.seed)
    tree = Tree(start)
    tol, eta = cfg.tolerance, cfg.step_eta
    if math.dist(start, goal) <= tol and segment_free(gmap, start, goal):
        path = [start, goal]
        return PlanResult(path, path_cost(path), 0, [(0, path_cost(path))], 0, cfg.seed, tree)
    for it in range(1, cfg.max_iters + 1):
        s = biased_sample(rng, gmap, None, 0.0, goal, cfg.goal_bias)
        near = _nearest(tree, s)
        a = tree.point(near)
        new = _steer(a, s, eta)
        if new == a or not segment_free(gmap, a, new):
            continue
        i = tree.add(new, near, tree.cost[near] + math.dist(a, new))
        dg = math.dist(new, goal)
        if dg <= tol and segment_free(gmap, new, goal):
            path = tree.path_to(i)
            if dg > 0:
                path.append(goal)
            cost = float(tree.cost[i] + dg)
            return PlanResult(path, cost, it, [(it, cost)], it, cfg.seed, tree)
    return PlanResult(None, math.inf, None, [], cfg.max_iters, cfg.seed, tree)


def plan_rrt_star(
    problem: PlanProblem,
    cfg: PlannerConfig,
    mask: HeuristicMask | None = None,
    on_iteration: Callable[[int, Tree], None] | None = None,
    until: Callable[[float], bool] | None = None,
) -> PlanResult:
    """Anytime RRT*; with a mask this is HRRT* (heuristic draws with prob. ``cfg.p_h``).

    Runs all ``cfg.max_iters`` iterations unless ``until(best_cost)`` turns
    true first.  ``on_iteration(it, tree)`` is called after every iteration,
    which lets tests replay tree invariants.
    """
    gmap, start, goal = problem.map, problem.start, problem.goal
    if mask is not None and (mask.width, mask.height) != (gmap.width, gmap.height):
        raise ValueError("mask and map sizes differ")
    rng = np.random.default_rng(cfg.seed)
    tree = Tree(start, capacity=min(cfg.max_iters + 1, 1 << 16))
    tol, eta = cfg.tolerance, cfg.step_eta
    gamma = cfg.rewire_radius_gamma if cfg.rewire_radius_gamma is not None else rewire_gamma(gmap)

    goal_nodes: list[int] = []
    goal_dist: list[float] = []
    best, best_node = math.inf, -1
    trace: list[tuple[int, float]] = []
    first = None

    def offer_goal(i: int, p: Point):
        dg = math.dist(p, goal)
        if dg <= tol and segment_free(gmap, p, goal):
            goal_nodes.append(i)
            goal_dist.append(dg)

    offer_goal(tree.root, start)
    for it in range(1, cfg.max_iters + 1):
        s = biased_sample(rng, gmap, mask, cfg.p_h, goal, cfg.goal_bias)
        nearest = _nearest(tree, s)
        a = tree.point(nearest)
        new = _steer(a, s, eta)
        if new != a and segment_free(gmap, a, new):
            n = tree.n
            radius = eta if n < 2 else min(eta, gamma * math.sqrt(math.log(n) / n))
            diff = tree.pos[:n] - new
            d = np.sqrt(np.einsum("ij,ij->i", diff, diff))
            near = np.flatnonzero(d <= radius)

            # choose parent: cheapest collision-free candidate among near + nearest
            parent, parent_cost = nearest, tree.cost[nearest] + d[nearest]
            if near.size:
                through = tree.cost[near] + d[near]
                for k in np.argsort(through, kind="stable"):
                    j = int(near[k])
                    if through[k] >= parent_cost:
                        break
                    if j == nearest or segment_free(gmap, tree.point(j), new):
                        parent, parent_cost = j, float(through[k])
                        break
            i = tree.add(new, parent, float(parent_cost))

            # rewire: route near nodes through the new node when strictly cheaper
            if near.size:
                via = parent_cost + d[near]
                better = np.flatnonzero(via < tree.cost[near])
                for k in better:
                    j = int(near[k])
                    if j == parent:
                        continue
                    if via[k] < tree.cost[j] and segment_free(gmap, new, tree.point(j)):
                        tree.reparent(j, i, float(via[k]))
            offer_goal(i, new)

        if goal_nodes:
            totals = tree.cost[goal_nodes] + np.asarray(goal_dist)
            k = int(np.argmin(totals))
            if totals[k] < best:
                best, best_node = float(totals[k]), goal_nodes[k]
                trace.append((it, best))
                if first is None:
                    first = it
        if on_iteration is not None:
            on_iteration(it, tree)
        if until is not None and until(best):
            break

    if best_node < 0:
        return PlanResult(None, math.inf, None, [], it, cfg.seed, tree)
    path = tree.path_to(best_node)
    if path[-1] != goal:
        path.append(goal)
    return PlanResult(path, path_cost(path), first, trace, it, cfg.seed, tree)
