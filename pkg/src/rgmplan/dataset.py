"""Training triplets: map image m, state image q, ground-truth image p^n.

Ground truth is the union of many RRT solutions for one problem, rasterized
as white path pixels on a black background.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy import ndimage

from .gridmap import (
    GridMap,
    MapType,
    PlanProblem,
    Point,
    cell_center,
    generate_map,
    load_ppm,
    map_image,
    save_ppm,
    segment_cells,
    segment_free,
)
from .planner import PlannerConfig, plan_rrt

log = logging.getLogger(__name__)

START_COLOR = (255, 0, 0)
GOAL_COLOR = (0, 0, 255)
DOT_RADIUS = 2.0
DEFAULT_RUNS = 50


class GroundTruthError(RuntimeError):
    pass


def derive_seed(*parts: int) -> int:
    """Independent 63-bit seed from a tuple of integers."""
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(2, np.uint64)[0] >> np.uint64(1))


def disk_cells(center: Point, radius: float, width: int, height: int) -> np.ndarray:
    """Boolean mask of cells whose centers lie within ``radius`` of ``center``."""
    yy, xx = np.mgrid[0:height, 0:width]
    return (xx + 0.5 - center[0]) ** 2 + (yy + 0.5 - center[1]) ** 2 <= radius * radius


def render_state_image(problem: PlanProblem, radius: float = DOT_RADIUS) -> np.ndarray:
    w, h = problem.map.width, problem.map.height
    img = np.full((h, w, 3), 255, dtype=np.uint8)
    img[disk_cells(problem.start, radius, w, h)] = START_COLOR
    img[disk_cells(problem.goal, radius, w, h)] = GOAL_COLOR
    return img


def rasterize_path(path: Sequence[Point], width: int, height: int, out: np.ndarray | None = None) -> np.ndarray:
    """Mark the cells the collision checker visits along each path segment (1 px stroke)."""
    out = np.zeros((height, width), dtype=bool) if out is None else out
    for a, b in zip(path[:-1], path[1:]):
        cells = segment_cells(a, b)
        out[cells[:, 0], cells[:, 1]] = True
    return out


def path_union(problem: PlanProblem, n_runs: int = DEFAULT_RUNS, cfg: PlannerConfig | None = None,
               seed: int = 0, retry_factor: int = 5) -> np.ndarray:
    """Boolean union of ``n_runs`` successful RRT paths."""
    if n_runs < 1:
        raise ValueError("n_runs must be at least 1")
    gmap = problem.map
    cfg = cfg or PlannerConfig.for_map(gmap, max_iters=20 * (gmap.width + gmap.height))
    canvas = np.zeros((gmap.height, gmap.width), dtype=bool)
    ok = 0
    for attempt in range(retry_factor * n_runs):
        res = plan_rrt(problem, cfg.with_seed(derive_seed(seed, attempt)))
        if res.path is None:
            continue
        rasterize_path(res.path, gmap.width, gmap.height, canvas)
        ok += 1
        if ok == n_runs:
            return canvas
    raise GroundTruthError(f"only {ok} of {n_runs} RRT runs succeeded within {retry_factor * n_runs} attempts")


def mask_to_image(mask: np.ndarray) -> np.ndarray:
    img = np.zeros(mask.shape + (3,), dtype=np.uint8)
    img[mask] = 255
    return img


def build_ground_truth(problem: PlanProblem, n_runs: int = DEFAULT_RUNS, cfg: PlannerConfig | None = None,
                       seed: int = 0, retry_factor: int = 5) -> np.ndarray:
    return mask_to_image(path_union(problem, n_runs, cfg, seed, retry_factor))


def resize_to_train(img: np.ndarray, size: int = 64) -> np.ndarray:
    """Bilinear resize of a square image (half-pixel centers, edge clamped)."""
    img = np.asarray(img)
    h, w = img.shape[:2]
    if h != w:
        raise ValueError(f"resize_to_train needs a square image, got {w}x{h}")
    if h == size:
        return img.copy()

    def axis(n_in):
        src = (np.arange(size) + 0.5) * (n_in / size) - 0.5
        src = np.clip(src, 0, n_in - 1)
        lo = np.floor(src).astype(int)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, src - lo

    y0, y1, fy = axis(h)
    x0, x1, fx = axis(w)
    f = img.astype(np.float64)
    if f.ndim == 2:
        f = f[:, :, None]
    top = f[y0][:, x0] * (1 - fx)[None, :, None] + f[y0][:, x1] * fx[None, :, None]
    bot = f[y1][:, x0] * (1 - fx)[None, :, None] + f[y1][:, x1] * fx[None, :, None]
    out = top * (1 - fy)[:, None, None] + bot * fy[:, None, None]
    out = np.clip(np.rint(out), 0, 255).astype(img.dtype)
    return out if img.ndim == 3 else out[:, :, 0]


# ------------------------------------------------------------------ problem sampling


def free_components(gmap: GridMap) -> np.ndarray:
    """4-connected labels of free space (0 = obstacle)."""
    labels, _ = ndimage.label(gmap.free)
    return labels


def sample_problem(gmap: GridMap, rng: np.random.Generator, hard_fraction: float = 0.5,
                   min_dist: float | None = None, tries: int = 200) -> PlanProblem:
    """Draw a feasible start/goal pair at cell centers.

    With probability ``hard_fraction`` the draw is restricted to pairs that are
    far apart (over half the map diagonal) or have no line of sight; this
    stands in for hand-picking rare configurations.
    """
    labels = free_components(gmap)
    free = np.flatnonzero(labels.ravel())
    if free.size < 2:
        raise ValueError("map has fewer than two free cells")
    diag = math.hypot(gmap.width, gmap.height)
    min_dist = max(4 * DOT_RADIUS + 1, 0.2 * min(gmap.width, gmap.height)) if min_dist is None else min_dist
    hard = rng.random() < hard_fraction
    fallback = None
    for _ in range(tries):
        a, b = rng.choice(free, size=2, replace=False)
        if labels.flat[a] != labels.flat[b]:
            continue
        pa = cell_center(*divmod(int(a), gmap.width))
        pb = cell_center(*divmod(int(b), gmap.width))
        d = math.dist(pa, pb)
        if d < min_dist:
            continue
        if not hard or d > 0.5 * diag or not segment_free(gmap, pa, pb):
            return PlanProblem(gmap, pa, pb)
        fallback = fallback or (pa, pb)
    if fallback is None:
        raise ValueError("no feasible start/goal pair found")
    return PlanProblem(gmap, *fallback)


# ------------------------------------------------------------------ dataset building


@dataclass(frozen=True)
class FamilySpec:
    map_type: MapType | str
    n_maps: int
    params: dict = field(default_factory=dict)


@dataclass
class Sample:
    problem: PlanProblem
    map_img: np.ndarray
    state_img: np.ndarray
    gt_img: np.ndarray


def make_sample(problem: PlanProblem, n_runs: int = DEFAULT_RUNS, seed: int = 0,
                cfg: PlannerConfig | None = None) -> Sample:
    return Sample(problem, map_image(problem.map), render_state_image(problem),
                  build_ground_truth(problem, n_runs, cfg, seed))


def build_dataset(specs: Sequence[FamilySpec], pairs_per_map: int, n_runs: int, out_dir: str | Path,
                  seed: int = 0, native_size: int = 201, train_size: int = 64) -> list[dict]:
    """Generate maps, problems and ground truths; write PPMs and ``manifest.jsonl``.

    Every image is written at the native map size and at ``train_size``.
    Problems whose ground truth cannot be built are redrawn.
    """
    out = Path(out_dir)
    for sub in ("maps", "states", "gt"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    records = []
    seen = set()
    for fam_idx, spec in enumerate(specs):
        mtype = MapType.parse(spec.map_type)
        for k in range(spec.n_maps):
            map_seed = derive_seed(seed, fam_idx, k)
            gmap = generate_map(mtype, native_size, native_size, map_seed, **spec.params)
            map_id = f"{mtype.value}_{k:04d}"
            _write_pair(out / "maps", map_id, map_image(gmap), train_size)
            rng = np.random.default_rng(derive_seed(seed, fam_idx, k, 1))
            made = 0
            for attempt in range(20 * pairs_per_map):
                if made == pairs_per_map:
                    break
                problem = sample_problem(gmap, rng)
                key = (map_id, problem.start, problem.goal)
                if key in seen:
                    continue
                try:
                    gt = build_ground_truth(problem, n_runs, seed=derive_seed(seed, fam_idx, k, 2, attempt))
                except GroundTruthError:
                    log.info("redrawing infeasible pair on %s", map_id)
                    continue
                seen.add(key)
                sid = f"{map_id}_{made:03d}"
                _write_pair(out / "states", sid, render_state_image(problem), train_size)
                _write_pair(out / "gt", sid, gt, train_size)
                records.append(
                    {
                        "id": sid,
                        "map_path": f"maps/{map_id}.ppm",
                        "state_path": f"states/{sid}.ppm",
                        "gt_path": f"gt/{sid}.ppm",
                        "train_map_path": f"maps/{map_id}_s{train_size}.ppm",
                        "train_state_path": f"states/{sid}_s{train_size}.ppm",
                        "train_gt_path": f"gt/{sid}_s{train_size}.ppm",
                        "map_type": mtype.value,
                        "seed": map_seed,
                        "q_start": list(problem.start),
                        "q_goal": list(problem.goal),
                        "native_size": native_size,
                        "train_size": train_size,
                        "params": spec.params,
                    }
                )
                made += 1
            if made < pairs_per_map:
                raise GroundTruthError(f"could only build {made} of {pairs_per_map} problems on {map_id}")
    with open(out / "manifest.jsonl", "w") as fh:
        for r in records:
            fh.write(json.dumps(r, sort_keys=True) + "\n")
    return [dict(r, _root=str(out)) for r in records]


def _write_pair(folder: Path, stem: str, img: np.ndarray, train_size: int) -> None:
    (folder / f"{stem}.ppm").write_bytes(save_ppm(img))
    if img.shape[0] != train_size or not (folder / f"{stem}_s{train_size}.ppm").exists():
        (folder / f"{stem}_s{train_size}.ppm").write_bytes(save_ppm(resize_to_train(img, train_size)))


def read_manifest(path: str | Path) -> list[dict]:
    path = Path(path)
    recs = [json.loads(line) for line in path.read_text().splitlines() if line.strip()]
    for r in recs:
        r["_root"] = str(path.parent)
    return recs


def load_record_images(rec: dict, train: bool = True) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    root = Path(rec["_root"])
    prefix = "train_" if train else ""
    return tuple(load_ppm((root / rec[f"{prefix}{k}_path"]).read_bytes()) for k in ("map", "state", "gt"))


def record_problem(rec: dict) -> PlanProblem:
    from .gridmap import map_from_image

    root = Path(rec["_root"])
    gmap = map_from_image(load_ppm((root / rec["map_path"]).read_bytes()))
    return PlanProblem(gmap, tuple(rec["q_start"]), tuple(rec["q_goal"]))


# ------------------------------------------------------------------ synthetic data


def corridor_samples(n: int, size: int = 16, seed: int = 0, width: int = 3) -> list[Sample]:
    """Straight free corridors (horizontal or vertical) with the path along their axis."""
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n):
        occ = np.ones((size, size), dtype=bool)
        off = int(rng.integers(1, size - width))
        lo, hi = int(rng.integers(1, size // 3)), int(rng.integers(2 * size // 3, size - 1))
        mid = off + width // 2
        if rng.random() < 0.5:
            occ[off : off + width, :] = False
            start, goal = cell_center(mid, lo), cell_center(mid, hi)
        else:
            occ[:, off : off + width] = False
            start, goal = cell_center(lo, mid), cell_center(hi, mid)
        gmap = GridMap.from_occupancy(occ)
        problem = PlanProblem(gmap, start, goal)
        gt = mask_to_image(rasterize_path([start, goal], size, size))
        out.append(Sample(problem, map_image(gmap), render_state_image(problem), gt))
    return out
