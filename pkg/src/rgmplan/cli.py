"""Command-line entry point: ``rgmplan <command> ...``."""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import bench as bench_mod
from . import evaluation as ev
from .dataset import (
    FamilySpec,
    build_dataset,
    derive_seed,
    load_record_images,
    read_manifest,
    record_problem,
    resize_to_train,
    sample_problem,
)
from .gridmap import (
    GridMap,
    MapType,
    PlanProblem,
    generate_map,
    load_pgm,
    load_ppm,
    map_from_image,
    map_from_pgm,
    map_image,
    save_ppm,
    write_map,
)
from .planner import PlannerConfig, default_step, plan_rrt, plan_rrt_star

log = logging.getLogger("rgmplan")


def _point(text: str) -> tuple[float, float]:
    try:
        x, y = (float(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected X,Y, got {text!r}") from None
    return (x, y)


def load_map(path: str | Path) -> GridMap:
    data = Path(path).read_bytes()
    if data[:2] == b"P5":
        return map_from_pgm(data)
    return map_from_image(load_ppm(data))


def load_image(path: str | Path) -> np.ndarray:
    data = Path(path).read_bytes()
    return load_pgm(data) if data[:2] == b"P5" else load_ppm(data)


def _chw(img: np.ndarray, size: int) -> np.ndarray:
    img = resize_to_train(img, size) if img.shape[0] != size else img
    return np.moveaxis(img.astype(np.float32) / 255.0, -1, 0)


# ------------------------------------------------------------------ commands


def cmd_gen_maps(args) -> int:
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    mtype = MapType.parse(args.type)
    for k in range(args.count):
        gmap = generate_map(mtype, args.width, args.height, derive_seed(args.seed, k))
        stem = out / f"{mtype.value}_{k:04d}"
        write_map(gmap, stem.with_suffix(".pgm"))
        stem.with_suffix(".ppm").write_bytes(save_ppm(map_image(gmap)))
        print(f"{stem.with_suffix('.pgm')}\tfree_fraction={gmap.free_fraction:.3f}")
    return 0


def cmd_plan(args) -> int:
    gmap = load_map(args.map)
    problem = PlanProblem(gmap, args.start, args.goal)
    cfg = PlannerConfig(step_eta=args.step or default_step(gmap.width, gmap.height), max_iters=args.iters,
                        p_h=args.p_h, seed=args.seed)
    mask = None
    if args.mask:
        mask = ev.extract_mask(load_image(args.mask), args.threshold, (gmap.height, gmap.width))
        if ev.mask_is_empty(mask):
            log.warning("heuristic mask is empty; sampling uniformly")
            mask = None
    if args.planner == "rrt":
        if mask is not None:
            raise SystemExit("--mask needs --planner rrtstar")
        res = plan_rrt(problem, cfg)
    else:
        res = plan_rrt_star(problem, cfg, mask)
    if args.trace:
        with open(args.trace, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["iteration", "best_cost"])
            w.writerows(res.cost_trace)
    if args.render:
        overlay = res.path if res.path is not None else res.tree
        Path(args.render).write_bytes(bench_mod.render_svg(gmap, mask, overlay, problem))
    print(f"success={res.success}\tcost={res.path_cost:.4f}\titers_to_first={res.iters_to_first}"
          f"\titers={res.iters_total}\tnodes={len(res.tree)}")
    return 0 if res.success else 2


def cmd_gen_dataset(args) -> int:
    spec = FamilySpec(args.family, args.maps)
    recs = build_dataset([spec], args.pairs_per_map, args.runs, args.out, seed=args.seed,
                         native_size=args.native, train_size=args.size)
    print(f"wrote {len(recs)} samples to {Path(args.out) / 'manifest.jsonl'}")
    return 0


def _train_data(records, size: int):
    from .trainer import TrainData

    maps, states, truths = [], [], []
    for rec in records:
        train = rec.get("train_size") == size
        m, q, g = load_record_images(rec, train=train)
        maps.append(_chw(m, size))
        states.append(_chw(q, size))
        truths.append(_chw(g, size))
    return TrainData(np.stack(maps), np.stack(states), np.stack(truths))


def cmd_train(args) -> int:
    from .model import RGM, RGMConfig
    from .plotting import loss_curves
    from .trainer import TrainConfig, Trainer, save_checkpoint, write_loss_csv

    records = read_manifest(args.manifest)
    if args.limit:
        records = records[: args.limit]
    data = _train_data(records, args.size)
    model = RGM(RGMConfig(image_size=args.size, T=args.T, base_channels=args.base), seed=args.seed)
    cfg = TrainConfig(learning_rate=args.lr, batch_size=args.batch, epochs=args.epochs, clip_bound=args.clip,
                      T=args.T, seed=args.seed, generator_loss=args.g_loss)
    trainer = Trainer(model, cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(trainer, out / "untrained.rgm")
    reports = []
    for epoch in range(cfg.epochs):
        reports.extend(trainer.train_epoch(data))
        last = reports[-1]
        print(f"epoch={epoch + 1}\tstep={last.step}\tl_g={last.l_g:.4f}\tl_d1={last.l_d1:.4f}"
              f"\tl_d2={last.l_d2:.4f}\treal={last.mean_real_score:.3f}\tfake={last.mean_fake_score:.3f}")
        save_checkpoint(trainer, out / "checkpoint.rgm")
    log_path = Path(args.log) if args.log else out / "losses.csv"
    write_loss_csv(reports, log_path)
    loss_curves(reports, log_path.with_suffix(".png"))
    return 0


def cmd_infer(args) -> int:
    from . import autodiff as ad
    from .trainer import load_checkpoint

    model, _ = load_checkpoint(args.checkpoint)
    model.training = False
    size = model.cfg.image_size
    m = _chw(load_image(args.map), size)[None]
    q = _chw(load_image(args.state), size)[None]
    z = model.noise(np.random.default_rng(args.seed), 1)
    outs = model.generate(ad.Tensor(m), ad.Tensor(q), z, T=args.T)

    def to_img(h):
        return np.round(np.clip(np.moveaxis(h.data[0], 0, -1), 0, 1) * 255).astype(np.uint8)

    Path(args.out).write_bytes(save_ppm(to_img(outs[-1])))
    if args.all_steps:
        d = Path(args.all_steps)
        d.mkdir(parents=True, exist_ok=True)
        for i, h in enumerate(outs, 1):
            (d / f"h_{i}.ppm").write_bytes(save_ppm(to_img(h)))
    print(args.out)
    return 0


def cmd_eval(args) -> int:
    from .trainer import load_checkpoint

    records = read_manifest(args.manifest)
    if args.limit:
        records = records[: args.limit]
    model, _ = load_checkpoint(args.checkpoint)
    rows = []
    if args.metric == "accuracy":
        acc = ev.test_accuracy(model, records, args.threshold, args.safety, seed=args.seed)
        rows.append({"metric": "accuracy", "n": len(records), "value": acc})
    else:
        problems = [(r["id"], record_problem(r)) for r in records]
        cases = bench_mod.model_cases(model, problems, args.threshold, args.seed)
        for case in cases:
            p = case.problem
            cfg = PlannerConfig.for_map(p.map, max_iters=args.iters, p_h=args.p_h)
            for arm, mask in (("heuristic", case.mask), ("uniform", None)):
                if args.metric == "f0":
                    est = ev.quality_f0(p, mask, cfg, args.trials, seed=args.seed)
                else:
                    c_ref = ev.grid_optimal_cost(p.map, p)
                    est = ev.quality_fstar(p, mask, cfg, args.trials, c_ref, seed=args.seed)
                rows.append({"id": case.map_id, "arm": arm, "metric": args.metric, "median": est.median_iters,
                             "q25": est.iqr[0], "q75": est.iqr[1], "success_rate": est.success_rate,
                             "n_trials": est.n_trials})
    _write_rows(rows, args.out)
    for r in rows:
        print("\t".join(f"{k}={v}" for k, v in r.items()))
    return 0


def _write_rows(rows: list[dict], path) -> None:
    if not path:
        return
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)


def bench_problems(maps_dir: str | Path, seed: int = 0, limit: int | None = None) -> list[tuple[str, PlanProblem]]:
    """Problems from ``manifest.jsonl`` if present, else one sampled pair per ``*.pgm`` map."""
    d = Path(maps_dir)
    if (d / "manifest.jsonl").exists():
        out = [(r["id"], record_problem(r)) for r in read_manifest(d / "manifest.jsonl")]
    else:
        paths = sorted(d.glob("*.pgm"))
        if not paths:
            raise FileNotFoundError(f"no manifest.jsonl or *.pgm maps in {d}")
        out = []
        for k, path in enumerate(paths):
            gmap = load_map(path)
            rng = np.random.default_rng(derive_seed(seed, k))
            out.append((path.stem, sample_problem(gmap, rng, hard_fraction=1.0)))
    return out[:limit] if limit else out


def cmd_bench(args) -> int:
    problems = bench_problems(args.maps, args.seed, args.limit)
    if args.oracle:
        cases = bench_mod.oracle_cases(problems, args.radius)
    else:
        from .trainer import load_checkpoint

        model, _ = load_checkpoint(args.checkpoint)
        cases = bench_mod.model_cases(model, problems, args.threshold, args.seed)
    gmap0 = problems[0][1].map
    cfg = PlannerConfig(step_eta=default_step(gmap0.width, gmap0.height), max_iters=args.iters)
    records = bench_mod.bench_compare(cases, cfg, args.trials, args.p_h, args.seed, args.workers)
    summary = bench_mod.summarize(records, iters_fill=args.iters)
    bench_mod.write_records(records, args.out_records)
    bench_mod.write_summary(summary, args.out_summary)
    if args.plot:
        from .plotting import bench_boxplots

        bench_boxplots(records, args.plot, iters_fill=args.iters)
    if args.render_dir:
        rd = Path(args.render_dir)
        rd.mkdir(parents=True, exist_ok=True)
        for case in cases:
            p = case.problem
            res = plan_rrt_star(p, PlannerConfig(step_eta=cfg.step_eta, max_iters=args.iters, p_h=args.p_h,
                                                 seed=args.seed), case.mask)
            (rd / f"{case.map_id}.svg").write_bytes(bench_mod.render_svg(p.map, case.mask, res.path, p))
    for row in summary.rows():
        print("\t".join(f"{k}={v:.4g}" if isinstance(v, float) else f"{k}={v}" for k, v in row.items()))
    return 0


# ------------------------------------------------------------------ parser


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="rgmplan", description="Learned sampling heuristics for RRT*.")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-maps", help="generate occupancy maps")
    p.add_argument("--type", required=True, choices=[m.value for m in MapType])
    p.add_argument("--width", type=int, default=201)
    p.add_argument("--height", type=int, default=201)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--count", type=int, default=1)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(fn=cmd_gen_maps)

    p = sub.add_parser("plan", help="run RRT or (H)RRT* on one map")
    p.add_argument("--map", required=True)
    p.add_argument("--start", type=_point, required=True)
    p.add_argument("--goal", type=_point, required=True)
    p.add_argument("--planner", choices=["rrt", "rrtstar"], default="rrtstar")
    p.add_argument("--mask", help="heuristic image (PPM/PGM); bright pixels are members")
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--p-h", type=float, default=0.4)
    p.add_argument("--iters", type=int, default=5000)
    p.add_argument("--step", type=float, default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--trace")
    p.add_argument("--render")
    p.set_defaults(fn=cmd_plan)

    p = sub.add_parser("gen-dataset", help="build (map, state, ground truth) triplets")
    p.add_argument("--family", required=True, choices=[m.value for m in MapType])
    p.add_argument("--maps", type=int, required=True)
    p.add_argument("--pairs-per-map", type=int, default=1)
    p.add_argument("--runs", type=int, default=50)
    p.add_argument("--size", type=int, default=64, help="training image size")
    p.add_argument("--native", type=int, default=201, help="native map size")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_gen_dataset)

    p = sub.add_parser("train", help="adversarial training")
    p.add_argument("--manifest", required=True)
    p.add_argument("--size", type=int, default=32)
    p.add_argument("--T", type=int, default=4)
    p.add_argument("--base", type=int, default=32, help="generator base channels")
    p.add_argument("--epochs", type=int, default=10)
    p.add_argument("--batch", type=int, default=8)
    p.add_argument("--lr", type=float, default=2e-4)
    p.add_argument("--clip", type=float, default=0.05)
    p.add_argument("--g-loss", choices=["minimax", "nonsaturating"], default="minimax",
                   help="generator loss form: log(1 - D) or -log(D)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--limit", type=int, default=None, help="use only the first N records")
    p.add_argument("--out", required=True)
    p.add_argument("--log")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("infer", help="generate a heuristic image")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--map", required=True)
    p.add_argument("--state", required=True)
    p.add_argument("--T", type=int, default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--all-steps")
    p.set_defaults(fn=cmd_infer)

    p = sub.add_parser("eval", help="accuracy or iteration metrics of a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--metric", choices=["accuracy", "f0", "fstar"], default="accuracy")
    p.add_argument("--trials", type=int, default=ev.DEFAULT_TRIALS)
    p.add_argument("--iters", type=int, default=5000)
    p.add_argument("--p-h", type=float, default=0.4)
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--safety", type=float, default=0.95)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--limit", type=int, default=None)
    p.add_argument("--out")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("bench", help="paired HRRT* vs RRT* comparison")
    p.add_argument("--maps", required=True, help="dataset dir with manifest.jsonl, or a dir of *.pgm maps")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--checkpoint")
    src.add_argument("--oracle", action="store_true", help="use the grid-optimal corridor as heuristic")
    p.add_argument("--radius", type=float, default=3.0, help="oracle corridor radius")
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--trials", type=int, default=120)
    p.add_argument("--p-h", type=float, default=0.4)
    p.add_argument("--iters", type=int, default=5000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--limit", type=int, default=None, help="use only the first N problems")
    p.add_argument("--workers", type=int, default=None)
    p.add_argument("--out-records", default="records.csv")
    p.add_argument("--out-summary", default="summary.csv")
    p.add_argument("--plot", help="box-plot PNG path")
    p.add_argument("--render-dir")
    p.set_defaults(fn=cmd_bench)
    return ap


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.fn(args)
    except (OSError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
