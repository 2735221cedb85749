"""Command-line interface: synth, confidence, train, infer, baseline,
orient, eval, gradcheck.

Exit codes: 0 success, 1 user error (bad flags, malformed files), 2 internal
error. Every randomized command takes --seed and reruns with identical
flags and seeds emit byte-identical outputs.
"""

from __future__ import annotations

import argparse
import sys
import time
import traceback
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import baselines, confidence, datagen, evaluation, orientation, trainer
from .cloud import load_normals, load_pidx, load_xyz, save_normals
from .errors import PcnormalsError
from .model import ModelConfig, infer_cloud, load_checkpoint
from .autodiff import Tensor


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise _UsageError(message)


def _load_cloud(xyz, normals=None):
    cloud = load_xyz(xyz)
    if normals is not None:
        cloud.normals = load_normals(normals, expected_count=cloud.n)
    return cloud


# ---------------------------------------------------------------------------
# subcommand implementations


def _cmd_synth(args) -> int:
    shapes = [s.strip() for s in args.shapes.split(",") if s.strip()]
    noise = args.noise if args.noise else [0.0, 0.006]
    entries = datagen.generate_dataset(
        args.out,
        shapes=shapes,
        n_points=args.points,
        noise_levels=noise,
        seed=args.seed,
        density_modes=args.density or (),
    )
    for e in entries:
        print(f"wrote {e.name}: kind={e.kind} noise={e.noise:g} file={e.xyz}")
    print(f"manifest: {Path(args.out) / 'manifest.txt'}")
    return 0


def _cmd_confidence(args) -> int:
    noisy = _load_cloud(args.noisy, args.noisy_normals)
    clean = _load_cloud(args.clean, args.clean_normals)
    with_normal = args.mode in ("normal", "both")
    prefix = Path(args.out_prefix)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    surface_out = f"{prefix}.surface.conf" if args.mode in ("surface", "both") else None
    normal_out = f"{prefix}.normal.conf" if with_normal else None
    records = confidence.annotate_dataset(
        noisy,
        clean,
        sigma_s=args.sigma_s,
        sigma_n=args.sigma_n,
        with_normal=with_normal,
        surface_out=surface_out,
        normal_out=normal_out,
    )
    mean_s = float(np.mean([r.c_surface for r in records]))
    print(f"points={len(records)} mean_c_surface={mean_s:.6f}", end="")
    if with_normal:
        mean_n = float(np.mean([r.c_normal for r in records]))
        print(f" mean_c_normal={mean_n:.6f}", end="")
    print()
    for path in (surface_out, normal_out):
        if path:
            print(f"wrote {path}")
    return 0


def _cmd_train(args) -> int:
    config = trainer.load_train_config(args.config)
    overrides = {}
    for item in args.set or []:
        if "=" not in item:
            raise PcnormalsError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        overrides[key.strip()] = value.strip()
    if args.seed is not None:
        overrides["seed"] = str(args.seed)
    if overrides:
        config = trainer.apply_overrides(config, overrides)
    samples = trainer.build_samples(args.manifest, config)
    out_dir = Path(args.out_dir)
    result = trainer.train(config, samples, out_dir=out_dir)
    trainer.save_train_config(out_dir / "config_used.cfg", config)
    from .figures import save_loss_figure

    save_loss_figure(out_dir / "loss_curve.png", result.curve)
    final = result.curve[-1]
    print(f"trained {config.epochs} epochs on {len(samples)} samples")
    print(f"final step total={final['total']:.6f} (l1..l5 = "
          + " ".join(f"{final[k]:.6f}" for k in ("l1", "l2", "l3", "l4", "l5")) + ")")
    print(f"checkpoint: {result.checkpoint_path}")
    print(f"log: {out_dir / 'train_log.csv'}")
    print(f"figure: {out_dir / 'loss_curve.png'}")
    return 0


_WORKER = {}


def _infer_worker_init(values, cfg_fields, xyz, seed):
    cloud = load_xyz(xyz)
    _WORKER["cloud"] = cloud
    _WORKER["params"] = {k: Tensor(v, requires_grad=True) for k, v in values.items()}
    _WORKER["config"] = ModelConfig(**cfg_fields)
    _WORKER["seed"] = seed
    from .cloud import KdIndex

    _WORKER["index"] = KdIndex(cloud)


def _infer_worker_chunk(queries):
    return infer_cloud(
        _WORKER["cloud"],
        _WORKER["params"],
        _WORKER["config"],
        seed=_WORKER["seed"],
        queries=queries,
        index=_WORKER["index"],
    )


def _cmd_infer(args) -> int:
    cloud = load_xyz(args.input)
    params, config = load_checkpoint(args.checkpoint)
    queries = load_pidx(args.pidx, point_count=cloud.n) if args.pidx else np.arange(cloud.n)
    if args.jobs > 1 and len(queries) > 1:
        values = {k: t.values for k, t in params.items()}
        cfg_fields = dict(
            r=config.r, r_prime=config.r_prime, k_group=config.k_group,
            m_weight=config.m_weight, widths=config.widths, seed=config.seed,
        )
        chunks = np.array_split(queries, args.jobs)
        with ProcessPoolExecutor(
            max_workers=args.jobs,
            initializer=_infer_worker_init,
            initargs=(values, cfg_fields, args.input, args.seed),
        ) as pool:
            parts = list(pool.map(_infer_worker_chunk, chunks))
        normals = np.concatenate(parts, axis=0)
    else:
        normals = infer_cloud(cloud, params, config, seed=args.seed, queries=queries)
    save_normals(args.out, normals)
    print(f"wrote {len(normals)} normals to {args.out}")
    return 0


def _baseline_worker_init(xyz, method, k):
    cloud = load_xyz(xyz)
    from .cloud import KdIndex

    _WORKER["cloud"] = cloud
    _WORKER["method"] = method
    _WORKER["k"] = k
    _WORKER["index"] = KdIndex(cloud)


def _baseline_worker_chunk(queries):
    return baselines.estimate_normals(
        _WORKER["cloud"], _WORKER["method"], _WORKER["k"], queries=queries, index=_WORKER["index"]
    )


def _cmd_baseline(args) -> int:
    cloud = load_xyz(args.input)
    queries = load_pidx(args.pidx, point_count=cloud.n) if args.pidx else np.arange(cloud.n)
    if args.jobs > 1 and len(queries) > 1:
        chunks = np.array_split(queries, args.jobs)
        with ProcessPoolExecutor(
            max_workers=args.jobs,
            initializer=_baseline_worker_init,
            initargs=(args.input, args.method, args.k),
        ) as pool:
            parts = list(pool.map(_baseline_worker_chunk, chunks))
        normals = np.concatenate(parts, axis=0)
    else:
        normals = baselines.estimate_normals(cloud, args.method, args.k, queries=queries)
    save_normals(args.out, normals)
    print(f"wrote {len(normals)} {args.method} normals to {args.out}")
    return 0


def _cmd_orient(args) -> int:
    if args.action == "mst":
        cloud = _load_cloud(args.input, args.normals)
        field = orientation.mst_orient(cloud, k=args.k)
        save_normals(args.out, field.normals)
        print(f"wrote oriented normals to {args.out}")
        return 0
    pred = load_normals(args.pred)
    ref_cloud = load_normals(args.ref)
    corrected = orientation.sign_correct(pred, ref_cloud / np.linalg.norm(ref_cloud, axis=1)[:, None])
    save_normals(args.out, corrected)
    print(f"wrote sign-corrected normals to {args.out}")
    return 0


def _cmd_eval(args) -> int:
    preds = args.pred
    gts = args.gt
    if len(preds) != len(gts):
        raise PcnormalsError(f"{len(preds)} --pred but {len(gts)} --gt")
    names = args.name or [Path(p).stem for p in preds]
    if len(names) != len(preds):
        raise PcnormalsError("--name count does not match --pred count")
    reports = []
    for pred_path, gt_path, name in zip(preds, gts, names):
        pred = load_normals(pred_path)
        gt = load_normals(gt_path, expected_count=pred.shape[0])
        reports.append(
            evaluation.evaluate(pred, gt, mode=args.mode, name=name, category=args.category)
        )
    for rep in reports:
        print(f"{rep.name}: mode={rep.mode} rmse={rep.rmse:.6f} auc={rep.auc:.6f}")
    if len(reports) > 1:
        mean_rmse = evaluation.category_rmse([r.rmse for r in reports])
        print(f"category mean rmse={mean_rmse:.6f}")
    if args.out_dir:
        out_dir = Path(args.out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        evaluation.write_report_csv(out_dir / "report.csv", reports)
        for rep in reports:
            evaluation.write_error_file(out_dir / f"{rep.name}.errors.txt", rep.per_point_errors)
        from .figures import save_pgp_figure

        save_pgp_figure(
            out_dir / "pgp_curve.png", [(r.name, r.pgp_curve) for r in reports], mode=args.mode
        )
        print(f"report: {out_dir / 'report.csv'}")
        print(f"figure: {out_dir / 'pgp_curve.png'}")
    return 0


def _cmd_gradcheck(args) -> int:
    from . import gradcheck as gc

    started = time.perf_counter()
    if args.micro:
        results = gc.micro_gradcheck(eps=args.eps, seed=args.seed)
    else:
        results = gc.op_suite_check(seed=args.seed, eps=min(args.eps, 1e-5))
    elapsed = time.perf_counter() - started
    for name in sorted(results):
        if name != "max":
            print(f"{name}: {results[name]:.3e}")
    print(f"max rel err: {results['max']:.3e}")
    print(f"elapsed: {elapsed:.1f}s", file=sys.stderr)
    return 0 if results["max"] <= 1e-4 else 1


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="pcnormals", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="generate synthetic clean/noisy shape pairs")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--shapes", default="sphere,torus,saddle", help="comma-separated shape kinds")
    p.add_argument("--points", type=int, default=3000, help="points per shape")
    p.add_argument("--noise", type=float, action="append", help="noise level (repeatable)")
    p.add_argument("--density", action="append", choices=("striped", "gradient"),
                   help="also emit a density variant (repeatable)")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_synth)

    p = sub.add_parser("confidence", help="annotate a noisy cloud against its clean pair")
    p.add_argument("--noisy", required=True, help="noisy .xyz file")
    p.add_argument("--noisy-normals", help="annotated normals of the noisy cloud")
    p.add_argument("--clean", required=True, help="clean .xyz file")
    p.add_argument("--clean-normals", required=True, help="clean normals file")
    p.add_argument("--mode", choices=("surface", "normal", "both"), default="both")
    p.add_argument("--sigma-s", type=float, default=confidence.SIGMA_SURFACE)
    p.add_argument("--sigma-n", type=float, default=confidence.SIGMA_NORMAL)
    p.add_argument("--out-prefix", required=True, help="prefix for the .conf outputs")
    p.set_defaults(func=_cmd_confidence)

    p = sub.add_parser("train", help="train the two-branch model")
    p.add_argument("--config", required=True, help="key=value training config file")
    p.add_argument("--manifest", required=True, help="dataset manifest from synth")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="config override")
    p.add_argument("--seed", type=int, default=None, help="override the config seed")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("infer", help="predict normals with a trained checkpoint")
    p.add_argument("--input", required=True, help=".xyz cloud")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--pidx", help="optional query subset (.pidx file)")
    p.add_argument("--out", required=True, help="output .normals path")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=_cmd_infer)

    p = sub.add_parser("baseline", help="classical estimators")
    p.add_argument("method", choices=("pca", "jet"))
    p.add_argument("--input", required=True, help=".xyz cloud")
    p.add_argument("--k", type=int, default=32, help="neighborhood size")
    p.add_argument("--pidx", help="optional query subset (.pidx file)")
    p.add_argument("--out", required=True, help="output .normals path")
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(func=_cmd_baseline)

    p = sub.add_parser("orient", help="orientation utilities")
    orient_sub = p.add_subparsers(dest="action", required=True, parser_class=_Parser)
    pm = orient_sub.add_parser("mst", help="spanning-tree sign propagation")
    pm.add_argument("--input", required=True, help=".xyz cloud")
    pm.add_argument("--normals", required=True, help="unoriented normals")
    pm.add_argument("--k", type=int, default=10, help="kNN graph degree")
    pm.add_argument("--out", required=True)
    pc = orient_sub.add_parser("correct", help="snap predictions to a reference field")
    pc.add_argument("--pred", required=True, help="predicted normals")
    pc.add_argument("--ref", required=True, help="reference (oriented) normals")
    pc.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_orient)

    p = sub.add_parser("eval", help="angular-error metrics and report")
    p.add_argument("--pred", action="append", required=True, help="predicted normals (repeatable)")
    p.add_argument("--gt", action="append", required=True, help="ground-truth normals (repeatable)")
    p.add_argument("--mode", choices=evaluation.MODES, default="unoriented")
    p.add_argument("--name", action="append", help="shape name per pair (default: file stem)")
    p.add_argument("--category", default="", help="category label for the report")
    p.add_argument("--out-dir", help="write report.csv, per-point errors, and the PGP figure")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    p.add_argument("--micro", action="store_true", help="full model + objective on a micro config")
    p.add_argument("--eps", type=float, default=1e-4)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_gradcheck)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    try:
        return args.func(args)
    except (PcnormalsError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception:
        traceback.print_exc()
        return 2


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
