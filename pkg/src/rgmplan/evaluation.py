"""Heuristic quality: iteration metrics, the efficiency test, safety/connectivity and accuracy."""
from __future__ import annotations

import enum
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy import ndimage
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import dijkstra

from .dataset import DOT_RADIUS, DEFAULT_RUNS, derive_seed, disk_cells, path_union, rasterize_path
from .gridmap import DEFAULT_SEGMENT_STEP, GridMap, PlanProblem, Point, cell_center, cell_of
from .planner import HeuristicMask, PlannerConfig, plan_rrt_star

DEFAULT_TRIALS = 31
BAND_FRACTION = 0.02
DH_FRACTION = 0.25

# canonical (dcol, drow) moves of the 16-neighbourhood; the reverse moves are
# the same undirected edges
_MOVES = ((0, 1), (1, -2), (1, -1), (1, 0), (1, 1), (1, 2), (2, -1), (2, 1))


class InfeasibleError(ValueError):
    pass


class Metric(str, enum.Enum):
    F0 = "f0"
    FSTAR = "fstar"


def worker_count(requested: int | None = None) -> int:
    """Worker processes to use; ``RGM_THREADS`` caps the count."""
    n = requested or os.cpu_count() or 1
    cap = os.environ.get("RGM_THREADS")
    if cap:
        n = min(n, max(1, int(cap)))
    return max(1, n)


def parallel_map(fn: Callable, items: Sequence, workers: int | None = None) -> list:
    """Order-preserving map, in worker processes when more than one is allowed."""
    workers = min(worker_count(workers), len(items))
    if workers <= 1:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items, chunksize=max(1, len(items) // (4 * workers))))


# ------------------------------------------------------------------ masks


def extract_mask(h_img: np.ndarray, threshold: float = 0.5, shape: tuple[int, int] | None = None) -> HeuristicMask:
    """Threshold the mean channel intensity of a generator output.

    ``h_img`` is ``(3, S, S)`` or ``(S, S, 3)`` with values in [0, 1], or
    ``uint8`` in [0, 255].  With ``shape=(height, width)`` the mask is scaled
    to planner resolution by nearest neighbour.  An all-dark image gives an
    empty mask; check ``mask_is_empty`` and fall back to uniform sampling.
    """
    img = np.asarray(h_img)
    if img.dtype == np.uint8:
        img = img.astype(np.float64) / 255.0
    if img.ndim == 3 and img.shape[-1] not in (1, 3):
        img = np.moveaxis(img, 0, -1)
    intensity = img.mean(axis=-1) if img.ndim == 3 else img
    member = intensity > threshold
    if shape is not None and member.shape != tuple(shape):
        member = upscale_nearest(member, shape)
    return HeuristicMask(member)


def upscale_nearest(member: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    h, w = shape
    sh, sw = member.shape
    rows = np.minimum((np.arange(h) + 0.5) * sh / h, sh - 1).astype(np.intp)
    cols = np.minimum((np.arange(w) + 0.5) * sw / w, sw - 1).astype(np.intp)
    return member[np.ix_(rows, cols)]


def mask_is_empty(mask: HeuristicMask | None) -> bool:
    return mask is None or mask.pixel_count == 0


# ------------------------------------------------------------------ grid oracle


@dataclass(frozen=True)
class GridPath:
    cost: float
    cells: list[tuple[int, int]]  # (row, col) from start cell to goal cell
    points: list[Point]


def _edge_free(occ: np.ndarray, dcol: int, drow: int, step: float = DEFAULT_SEGMENT_STEP) -> np.ndarray:
    """For every cell, whether the segment to the cell at (+drow, +dcol) is collision free.

    Uses the same sample positions as ``segment_free`` (the canonical start is
    the lexicographically smaller endpoint, which the move set guarantees is
    the origin cell).
    """
    h, w = occ.shape
    length = math.hypot(dcol, drow)
    n = int(length // step)
    t = np.arange(n + 1, dtype=float) * step / length
    rr, cc = np.mgrid[0:h, 0:w]
    ok = (rr + drow >= 0) & (rr + drow < h) & (cc + dcol < w)
    ax = cc[..., None] + 0.5
    ay = rr[..., None] + 0.5
    xs = np.concatenate([ax + t * dcol, ax + dcol], axis=-1)
    ys = np.concatenate([ay + t * drow, ay + drow], axis=-1)
    cols = np.clip(np.floor(xs).astype(np.intp), 0, w - 1)
    rows = np.clip(np.floor(ys).astype(np.intp), 0, h - 1)
    return ok & ~occ[rows, cols].any(axis=-1)


def grid_shortest_path(gmap: GridMap, problem: PlanProblem) -> GridPath:
    """16-connected shortest path between the endpoint cells (edge lengths 1, sqrt 2, sqrt 5).

    The cost is measured center to center between the two endpoint cells.
    """
    occ = gmap.occupancy
    h, w = occ.shape
    src, dst, wts = [], [], []
    idx = np.arange(h * w).reshape(h, w)
    for dcol, drow in _MOVES:
        ok = _edge_free(occ, dcol, drow)
        r, c = np.nonzero(ok)
        src.append(idx[r, c])
        dst.append(idx[r + drow, c + dcol])
        wts.append(np.full(r.size, math.hypot(dcol, drow)))
    graph = coo_matrix((np.concatenate(wts), (np.concatenate(src), np.concatenate(dst))), shape=(h * w, h * w)).tocsr()
    s_row, s_col = cell_of(problem.start)
    g_row, g_col = cell_of(problem.goal)
    s, g = s_row * w + s_col, g_row * w + g_col
    dist, pred = dijkstra(graph, directed=False, indices=s, return_predecessors=True)
    if not np.isfinite(dist[g]):
        raise InfeasibleError("no grid path between start and goal")
    chain = [g]
    while chain[-1] != s:
        chain.append(int(pred[chain[-1]]))
    cells = [divmod(int(k), w) for k in chain[::-1]]
    centers = [cell_center(r, c) for r, c in cells]
    cost = float(dist[g])
    points = [problem.start] + centers + [problem.goal]
    return GridPath(cost, cells, points)


def grid_optimal_cost(gmap: GridMap, problem: PlanProblem) -> float:
    """Reference optimal cost; raises ``InfeasibleError`` if the endpoints are not connected."""
    return grid_shortest_path(gmap, problem).cost


def oracle_corridor(gmap: GridMap, problem: PlanProblem, radius: float = 3.0) -> HeuristicMask:
    """Free cells whose centers lie within ``radius`` of the rasterized grid-optimal path."""
    gp = grid_shortest_path(gmap, problem)
    path = rasterize_path(gp.points, gmap.width, gmap.height)
    if radius <= 0:
        return HeuristicMask(path & gmap.free)
    near = ndimage.distance_transform_edt(~path) <= radius
    return HeuristicMask(near & gmap.free)


# ------------------------------------------------------------------ iteration metrics


def in_band(cost: float, c_ref: float, c_th: float) -> bool:
    """Near-optimality test; a cost below the reference also counts as inside."""
    return cost <= c_ref or (cost - c_ref) ** 2 < c_th


def default_c_th(c_ref: float) -> float:
    return (BAND_FRACTION * c_ref) ** 2


@dataclass(frozen=True)
class TrialOutcome:
    seed: int
    initial_iters: int | None
    initial_cost: float
    optimal_iters: int | None
    best_cost: float
    iters_run: int


@dataclass(frozen=True)
class TrialSpec:
    problem: PlanProblem
    member: np.ndarray | None
    cfg: PlannerConfig
    c_ref: float | None = None
    c_th: float | None = None
    stop: str | None = None  # None runs every iteration; "first" or "band" stops early


def run_trial(spec: TrialSpec) -> TrialOutcome:
    mask = None if spec.member is None else HeuristicMask(spec.member)
    until = None
    if spec.stop == "first":
        until = math.isfinite
    elif spec.stop == "band":
        until = lambda c: in_band(c, spec.c_ref, spec.c_th)  # noqa: E731
    res = plan_rrt_star(spec.problem, spec.cfg, mask, until=until)
    opt_iters = None
    if spec.c_ref is not None:
        for it, c in res.cost_trace:
            if in_band(c, spec.c_ref, spec.c_th):
                opt_iters = it
                break
    first_cost = res.cost_trace[0][1] if res.cost_trace else math.inf
    best = res.cost_trace[-1][1] if res.cost_trace else math.inf
    return TrialOutcome(spec.cfg.seed, res.iters_to_first, first_cost, opt_iters, best, res.iters_total)


@dataclass(frozen=True)
class QualityEstimate:
    metric: Metric
    median_iters: float
    iqr: tuple[float, float]
    n_trials: int
    success_rate: float
    c_th: float | None = None
    values: tuple[int, ...] = field(default=(), repr=False)

    @classmethod
    def from_values(cls, metric: Metric, values: Iterable[int | None], max_iters: int,
                    c_th: float | None = None) -> "QualityEstimate":
        raw = list(values)
        if not raw:
            raise ValueError("need at least one trial")
        ok = sum(v is not None for v in raw)
        vals = sorted(max_iters if v is None else int(v) for v in raw)
        q25, q50, q75 = np.percentile(vals, [25, 50, 75])
        return cls(metric, float(q50), (float(q25), float(q75)), len(vals), ok / len(vals), c_th, tuple(vals))


def trial_seeds(base_seed: int, k: int) -> list[int]:
    return [derive_seed(base_seed, i) for i in range(k)]


def _mask_member(mask: HeuristicMask | None) -> np.ndarray | None:
    return None if mask_is_empty(mask) else np.asarray(mask.member)


def quality_f0(problem: PlanProblem, mask: HeuristicMask | None, cfg: PlannerConfig,
               k: int = DEFAULT_TRIALS, seed: int = 0, workers: int | None = None) -> QualityEstimate:
    """Median iterations to the first feasible path over ``k`` seeded trials."""
    if k < 1:
        raise ValueError("k must be at least 1")
    member = _mask_member(mask)
    specs = [TrialSpec(problem, member, cfg.with_seed(s), stop="first") for s in trial_seeds(seed, k)]
    outs = parallel_map(run_trial, specs, workers)
    return QualityEstimate.from_values(Metric.F0, [o.initial_iters for o in outs], cfg.max_iters)


def quality_fstar(problem: PlanProblem, mask: HeuristicMask | None, cfg: PlannerConfig,
                  k: int = DEFAULT_TRIALS, c_ref: float | None = None, c_th: float | None = None,
                  seed: int = 0, workers: int | None = None) -> QualityEstimate:
    """Median iterations until the best cost enters the near-optimal band around ``c_ref``."""
    if c_ref is None or not c_ref > 0:
        raise ValueError("a positive reference cost c_ref is required")
    if k < 1:
        raise ValueError("k must be at least 1")
    c_th = default_c_th(c_ref) if c_th is None else c_th
    member = _mask_member(mask)
    specs = [TrialSpec(problem, member, cfg.with_seed(s), c_ref, c_th, stop="band") for s in trial_seeds(seed, k)]
    outs = parallel_map(run_trial, specs, workers)
    return QualityEstimate.from_values(Metric.FSTAR, [o.optimal_iters for o in outs], cfg.max_iters, c_th)


@dataclass(frozen=True)
class EfficiencyVerdict:
    f_star_h: QualityEstimate
    f_star_pstar: QualityEstimate
    d_h: float
    efficient: bool


def reference_mask(problem: PlanProblem, n_runs: int = DEFAULT_RUNS, seed: int = 0) -> HeuristicMask:
    """Union of RRT paths, the stand-in for the optimal-path distribution."""
    return HeuristicMask(path_union(problem, n_runs, seed=seed))


def is_efficient(mask: HeuristicMask | None, problem: PlanProblem, cfg: PlannerConfig,
                 d_h: float | None = None, k: int = DEFAULT_TRIALS, reference: HeuristicMask | None = None,
                 c_ref: float | None = None, seed: int = 0, workers: int | None = None) -> EfficiencyVerdict:
    """Efficient iff median F*(mask) - median F*(reference) < d_h.

    ``d_h`` defaults to a quarter of the reference median.  Both arms use the
    same trial seeds.
    """
    reference = reference if reference is not None else reference_mask(problem, seed=seed)
    c_ref = grid_optimal_cost(problem.map, problem) if c_ref is None else c_ref
    ref = quality_fstar(problem, reference, cfg, k, c_ref, seed=seed, workers=workers)
    if mask is reference or (mask is not None and np.array_equal(mask.member, reference.member)):
        est = ref
    else:
        est = quality_fstar(problem, mask, cfg, k, c_ref, seed=seed, workers=workers)
    d_h = DH_FRACTION * ref.median_iters if d_h is None else d_h
    return EfficiencyVerdict(est, ref, d_h, est.median_iters - ref.median_iters < d_h)


# ------------------------------------------------------------------ safety, connectivity, accuracy


_EIGHT = np.ones((3, 3), dtype=bool)


def safety_and_connectivity(mask: HeuristicMask, gmap: GridMap, problem: PlanProblem,
                            radius: float = DOT_RADIUS) -> dict:
    """Fraction of mask cells in free space, and whether one 8-connected
    component of mask plus endpoint disks holds both endpoints.

    An empty mask has safety 0: it carries no usable guidance.
    """
    member = np.asarray(mask.member)
    if member.shape != gmap.occupancy.shape:
        raise ValueError("mask and map sizes differ")
    n = int(member.sum())
    safety = float((member & gmap.free).sum() / n) if n else 0.0
    region = member | disk_cells(problem.start, radius, gmap.width, gmap.height) \
        | disk_cells(problem.goal, radius, gmap.width, gmap.height)
    labels, _ = ndimage.label(region, structure=_EIGHT)
    a = labels[cell_of(problem.start)]
    b = labels[cell_of(problem.goal)]
    return {"safety": safety, "connected": bool(a > 0 and a == b)}


def case_correct(mask: HeuristicMask, gmap: GridMap, problem: PlanProblem, safety_threshold: float = 0.95) -> bool:
    sc = safety_and_connectivity(mask, gmap, problem)
    return sc["safety"] >= safety_threshold and sc["connected"]


def accuracy(generator: Callable[[np.ndarray, np.ndarray], np.ndarray], cases: Sequence[tuple],
             mask_threshold: float = 0.5, safety_threshold: float = 0.95, batch: int = 16) -> float:
    """Fraction of cases whose final generator output is safe and connected.

    ``generator(maps, states)`` takes ``(N, 3, S, S)`` float batches and
    returns the final outputs in the same layout.  Each case is
    ``(map_img, state_img, problem)`` with train-resolution images and the
    native-resolution problem.
    """
    if not cases:
        raise ValueError("no test cases")
    correct = 0
    for lo in range(0, len(cases), batch):
        chunk = cases[lo : lo + batch]
        m = np.stack([_chw(c[0]) for c in chunk])
        q = np.stack([_chw(c[1]) for c in chunk])
        out = np.asarray(generator(m, q))
        for h, (_, _, problem) in zip(out, chunk):
            gm = problem.map
            mask = extract_mask(h, mask_threshold, (gm.height, gm.width))
            correct += case_correct(mask, gm, problem, safety_threshold)
    return correct / len(cases)


def _chw(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img)
    if img.dtype == np.uint8:
        img = img.astype(np.float32) / 255.0
    return np.moveaxis(img, -1, 0) if img.shape[-1] == 3 else img


def model_generator(model, T: int | None = None, seed: int = 0, training: bool = False):
    """Wrap an ``RGM`` as a batch generator returning the final pass ``h_T``."""
    from . import autodiff as ad

    rng = np.random.default_rng(seed)

    def run(m: np.ndarray, q: np.ndarray) -> np.ndarray:
        model.training = training
        z = model.noise(rng, len(m))
        outs = model.generate(ad.Tensor(m), ad.Tensor(q), z, T=T)
        return outs[-1].data

    return run


def manifest_cases(records: Sequence[dict]) -> list[tuple]:
    from .dataset import load_record_images, record_problem

    cases = []
    for rec in records:
        m, q, _ = load_record_images(rec, train=True)
        cases.append((m, q, record_problem(rec)))
    return cases


def test_accuracy(checkpoint, records: Sequence[dict], mask_threshold: float = 0.5,
                  safety_threshold: float = 0.95, seed: int = 0) -> float:
    """Accuracy of a checkpoint (path, bytes or ``RGM``) on manifest records."""
    from .model import RGM
    from .trainer import load_checkpoint

    model = checkpoint if isinstance(checkpoint, RGM) else load_checkpoint(checkpoint)[0]
    return accuracy(model_generator(model, seed=seed), manifest_cases(records), mask_threshold, safety_threshold)


test_accuracy.__test__ = False  # not a pytest test despite the name
