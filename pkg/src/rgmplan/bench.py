"""Paired HRRT* vs RRT* comparison, summary statistics and SVG rendering."""
from __future__ import annotations

import csv
import enum
import math
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy.stats import mannwhitneyu

from .dataset import derive_seed, render_state_image, resize_to_train
from .evaluation import (
    TrialSpec,
    default_c_th,
    extract_mask,
    grid_optimal_cost,
    mask_is_empty,
    model_generator,
    oracle_corridor,
    parallel_map,
    run_trial,
)
from .gridmap import GridMap, PlanProblem, Point, map_image
from .planner import HeuristicMask, PlannerConfig, Tree

QUANTITIES = ("initial_cost", "initial_iters", "optimal_cost", "optimal_iters")
ITER_QUANTITIES = ("initial_iters", "optimal_iters")


class Planner(str, enum.Enum):
    RRT_STAR = "RRTStar"
    HRRT_STAR = "HRRTStar"


@dataclass(frozen=True)
class BenchRecord:
    map_id: str
    trial: int
    planner: Planner
    p_h: float
    initial_cost: float | None
    initial_iters: int | None
    optimal_cost: float | None
    optimal_iters: int | None
    seed: int

    def row(self) -> dict:
        d = asdict(self)
        d["planner"] = self.planner.value
        return {k: "" if v is None else v for k, v in d.items()}


RECORD_FIELDS = [f for f in BenchRecord.__dataclass_fields__]


@dataclass(frozen=True)
class BenchCase:
    map_id: str
    problem: PlanProblem
    mask: HeuristicMask | None


def oracle_cases(problems: Sequence[tuple[str, PlanProblem]], radius: float = 3.0) -> list[BenchCase]:
    return [BenchCase(mid, p, oracle_corridor(p.map, p, radius)) for mid, p in problems]


def model_cases(model, problems: Sequence[tuple[str, PlanProblem]], threshold: float = 0.5,
                seed: int = 0) -> list[BenchCase]:
    """Heuristic masks from a trained generator's final output, one per problem."""
    gen = model_generator(model, seed=seed)
    size = model.cfg.image_size
    cases = []
    for mid, p in problems:
        m = resize_to_train(map_image(p.map), size)
        q = resize_to_train(render_state_image(p), size)
        h = gen(_batch(m), _batch(q))[0]
        mask = extract_mask(h, threshold, (p.map.height, p.map.width))
        cases.append(BenchCase(mid, p, None if mask_is_empty(mask) else mask))
    return cases


def _batch(img: np.ndarray) -> np.ndarray:
    return np.moveaxis(img.astype(np.float32) / 255.0, -1, 0)[None]


def bench_compare(cases: Sequence[BenchCase], cfg: PlannerConfig, trials: int = 120, p_h: float = 0.4,
                  seed: int = 0, workers: int | None = None) -> list[BenchRecord]:
    """Run both planners ``trials`` times per case with shared seeds.

    Every run uses all ``cfg.max_iters`` iterations; the optimal cost is the
    best cost at the end, and ``optimal_iters`` the first iteration inside the
    near-optimal band around the grid reference cost.  Records come back in
    (map, planner, trial) order.
    """
    if trials < 2:
        raise ValueError("need at least two trials")
    specs, keys = [], []
    for ci, case in enumerate(cases):
        c_ref = grid_optimal_cost(case.problem.map, case.problem)
        c_th = default_c_th(c_ref)
        member = None if mask_is_empty(case.mask) else np.asarray(case.mask.member)
        for planner in Planner:
            arm_ph = 0.0 if planner is Planner.RRT_STAR else p_h
            for t in range(trials):
                s = derive_seed(seed, ci, t)
                run_cfg = replace(cfg, seed=s, p_h=arm_ph)
                specs.append(TrialSpec(case.problem, member if planner is Planner.HRRT_STAR else None,
                                       run_cfg, c_ref, c_th))
                keys.append((case.map_id, t, planner, arm_ph, s))
    outs = parallel_map(run_trial, specs, workers)
    records = []
    for (mid, t, planner, arm_ph, s), o in zip(keys, outs):
        records.append(BenchRecord(
            map_id=mid, trial=t, planner=planner, p_h=arm_ph,
            initial_cost=_finite(o.initial_cost), initial_iters=o.initial_iters,
            optimal_cost=_finite(o.best_cost), optimal_iters=o.optimal_iters, seed=s,
        ))
    return records


def _finite(x: float) -> float | None:
    return float(x) if math.isfinite(x) else None


def write_records(records: Iterable[BenchRecord], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=RECORD_FIELDS)
        w.writeheader()
        for r in records:
            w.writerow(r.row())


def read_records(path: str | Path) -> list[BenchRecord]:
    def num(v, kind):
        return None if v == "" else kind(v)

    out = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            out.append(BenchRecord(
                row["map_id"], int(row["trial"]), Planner(row["planner"]), float(row["p_h"]),
                num(row["initial_cost"], float), num(row["initial_iters"], int),
                num(row["optimal_cost"], float), num(row["optimal_iters"], int), int(row["seed"]),
            ))
    return out


# ------------------------------------------------------------------ statistics


@dataclass(frozen=True)
class GroupStats:
    map_id: str
    planner: Planner
    n: int
    median: dict[str, float]
    iqr: dict[str, tuple[float, float]]


@dataclass(frozen=True)
class ComparisonSummary:
    groups: list[GroupStats]
    p_values: dict[str, dict[str, float]]  # map_id -> quantity -> p(HRRT* < RRT*)

    def group(self, map_id: str, planner: Planner) -> GroupStats:
        for g in self.groups:
            if g.map_id == map_id and g.planner == planner:
                return g
        raise KeyError((map_id, planner))

    def rows(self) -> list[dict]:
        out = []
        for g in self.groups:
            row = {"map_id": g.map_id, "planner": g.planner.value, "n": g.n}
            for q in QUANTITIES:
                row[f"{q}_median"] = g.median[q]
                row[f"{q}_q25"], row[f"{q}_q75"] = g.iqr[q]
            for q in ITER_QUANTITIES:
                row[f"p_{q}"] = self.p_values[g.map_id][q]
            out.append(row)
        return out


def censored(values: Iterable[float | None], fill: float) -> np.ndarray:
    """Missing values (no path / never near-optimal) take ``fill``."""
    return np.array([fill if v is None else v for v in values], dtype=float)


def _iters_fill(records: Sequence[BenchRecord]) -> float:
    # a missing iteration count means the run used all its iterations
    seen = [v for r in records for v in (r.initial_iters, r.optimal_iters) if v is not None]
    return float(max(seen, default=0) + 1)


def summarize(records: Sequence[BenchRecord], iters_fill: float | None = None) -> ComparisonSummary:
    """Per (map, planner) medians and IQRs, and one-sided Mann-Whitney p-values.

    Missing iteration counts are censored at ``iters_fill`` (default one past
    the largest observed count); missing costs are left out of the cost
    statistics.
    """
    if not records:
        raise ValueError("no records")
    fill = _iters_fill(records) if iters_fill is None else iters_fill
    by: dict[tuple[str, Planner], list[BenchRecord]] = {}
    for r in records:
        by.setdefault((r.map_id, r.planner), []).append(r)
    groups = []
    for (mid, planner), rs in sorted(by.items(), key=lambda kv: (kv[0][0], kv[0][1].value)):
        if len(rs) < 2:
            raise ValueError(f"group {mid}/{planner.value} has fewer than two records")
        med, iqr = {}, {}
        for q in QUANTITIES:
            vals = [getattr(r, q) for r in rs]
            arr = censored(vals, fill) if q in ITER_QUANTITIES else np.array([v for v in vals if v is not None])
            if arr.size:
                q25, q50, q75 = np.percentile(arr, [25, 50, 75])
            else:
                q25 = q50 = q75 = math.nan
            med[q], iqr[q] = float(q50), (float(q25), float(q75))
        groups.append(GroupStats(mid, planner, len(rs), med, iqr))
    p_values = {}
    for mid in sorted({r.map_id for r in records}):
        h = by.get((mid, Planner.HRRT_STAR), [])
        u = by.get((mid, Planner.RRT_STAR), [])
        if len(h) < 2 or len(u) < 2:
            raise ValueError(f"map {mid} needs both planner arms")
        p_values[mid] = {
            q: one_sided_p(censored([getattr(r, q) for r in h], fill), censored([getattr(r, q) for r in u], fill))
            for q in ITER_QUANTITIES
        }
    return ComparisonSummary(groups, p_values)


def one_sided_p(x: np.ndarray, y: np.ndarray) -> float:
    """Rank-sum p-value for the alternative that ``x`` tends to be smaller than ``y``."""
    return float(mannwhitneyu(x, y, alternative="less").pvalue)


def write_summary(summary: ComparisonSummary, path: str | Path) -> None:
    rows = summary.rows()
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)


# ------------------------------------------------------------------ rendering


def _runs(row: np.ndarray) -> list[tuple[int, int]]:
    """Start and length of each run of True values."""
    padded = np.concatenate([[False], row, [False]])
    edges = np.flatnonzero(padded[1:] != padded[:-1])
    return [(int(a), int(b - a)) for a, b in zip(edges[::2], edges[1::2])]


def render_svg(gmap: GridMap, mask: HeuristicMask | None = None, overlay: Tree | Sequence[Point] | None = None,
               problem: PlanProblem | None = None, scale: int = 4) -> bytes:
    """Layered SVG: free space, obstacles, heuristic cells, tree or path, endpoints.

    Obstacles are merged into horizontal runs; heuristic cells are drawn one
    rectangle per cell.  Output bytes depend only on the inputs.
    """
    w, h = gmap.width, gmap.height
    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{w * scale}" height="{h * scale}" '
        f'viewBox="0 0 {w} {h}" shape-rendering="crispEdges">',
        f'<rect class="free" x="0" y="0" width="{w}" height="{h}" fill="#ffffff"/>',
    ]
    if gmap.occupancy.any():
        out.append('<g class="obstacles" fill="#000000">')
        for r in range(h):
            for c, n in _runs(gmap.occupancy[r]):
                out.append(f'<rect x="{c}" y="{r}" width="{n}" height="1"/>')
        out.append("</g>")
    if mask is not None and mask.pixel_count:
        out.append('<g class="heuristic" fill="#ffd700">')
        for idx in mask.cells:
            r, c = divmod(int(idx), mask.width)
            out.append(f'<rect x="{c}" y="{r}" width="1" height="1"/>')
        out.append("</g>")
    if isinstance(overlay, Tree):
        out.append('<g class="tree" stroke="#4a90d9" stroke-width="0.15">')
        for a, b in overlay.edges():
            out.append(f'<line x1="{a[0]:.4f}" y1="{a[1]:.4f}" x2="{b[0]:.4f}" y2="{b[1]:.4f}"/>')
        out.append("</g>")
    elif overlay is not None and len(overlay) > 1:
        pts = " ".join(f"{x:.4f},{y:.4f}" for x, y in overlay)
        out.append(f'<polyline class="path" points="{pts}" fill="none" stroke="#00a000" stroke-width="0.5"/>')
    if problem is not None:
        (sx, sy), (gx, gy) = problem.start, problem.goal
        out.append(f'<circle class="start" cx="{sx:.4f}" cy="{sy:.4f}" r="1.5" fill="#ff0000"/>')
        out.append(f'<circle class="goal" cx="{gx:.4f}" cy="{gy:.4f}" r="1.5" fill="#00c000"/>')
    out.append("</svg>")
    return ("\n".join(out) + "\n").encode()
