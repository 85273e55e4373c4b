"""Command-line entry point: ``hsdiff <subcommand> ...``.

Exit codes: 0 success, 2 configuration error, 3 digest mismatch, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path
from typing import List, Optional

import numpy as np

from . import artifacts, evaluate, hsio, oracle, pipeline, purify
from .artifacts import DigestMismatch
from .pipeline import ConfigError

log = logging.getLogger("hsdiff")

EXIT_OK, EXIT_CONFIG, EXIT_DIGEST, EXIT_NUMERIC = 0, 2, 3, 4

RAW_DTYPES = {"f32": "<f4", "f64": "<f8", "u16": "<u2", "i16": "<i2", "u8": "u1", "i32": "<i4"}


# --------------------------------------------------------------------------- convert


def _read_array(path: Path, args) -> np.ndarray:
    suffix = path.suffix.lower()
    if suffix == ".npy":
        return np.load(path)
    if suffix == ".mat":
        from scipy.io import loadmat

        mat = {k: v for k, v in loadmat(path).items() if not k.startswith("__")}
        if args.key is None:
            if len(mat) != 1:
                raise ConfigError(f"{path} holds variables {sorted(mat)}; pick one with --key")
            return next(iter(mat.values()))
        if args.key not in mat:
            raise ConfigError(f"{path} has no variable {args.key!r}")
        return mat[args.key]
    if suffix == ".json":
        src = hsio.load_labels(path) if args.kind == "labels" else hsio.load_cube(path)
        return src.labels if args.kind == "labels" else src.data
    if suffix in (".txt", ".csv", ".tsv", ".dat"):
        delim = args.delimiter or ("," if suffix == ".csv" else None)
        arr = np.loadtxt(path, delimiter=delim, dtype=np.float64, ndmin=2)
        if args.kind == "labels":
            return arr
        if args.height is None or args.width is None:
            raise ConfigError("a delimited-text cube (one row per pixel, row-major) needs --height and --width")
        if arr.shape[0] != args.height * args.width:
            raise ConfigError(f"{path} has {arr.shape[0]} rows, expected {args.height * args.width}")
        return arr.reshape(args.height, args.width, arr.shape[1])
    # anything else is a headerless raw dump
    if args.height is None or args.width is None:
        raise ConfigError("raw input needs --height, --width (and --bands for cubes)")
    bands = 1 if args.kind == "labels" else args.bands
    if bands is None:
        raise ConfigError("raw cube input needs --bands")
    raw = np.fromfile(path, dtype=RAW_DTYPES[args.dtype])
    if raw.size != args.height * args.width * bands:
        raise ConfigError(f"{path} holds {raw.size} values, expected {args.height * args.width * bands}")
    if args.interleave == "bsq":
        return raw.reshape(bands, args.height, args.width).transpose(1, 2, 0)
    if args.interleave == "bil":
        return raw.reshape(args.height, bands, args.width).transpose(0, 2, 1)
    return raw.reshape(args.height, args.width, bands)


def _write_text(out: Path, arr: np.ndarray, labels: bool) -> None:
    if labels:
        np.savetxt(out, arr.astype(np.int64), fmt="%d")
    else:
        np.savetxt(out, arr.reshape(-1, arr.shape[-1]).astype(np.float32), fmt="%.9g")


def cmd_convert(args) -> int:
    src, out = Path(args.input), Path(args.output)
    arr = _read_array(src, args)
    if args.kind == "labels":
        arr = np.squeeze(np.asarray(arr))
        if arr.ndim != 2:
            raise ConfigError(f"label raster must be 2-D, got shape {arr.shape}")
        if np.any(arr != np.round(arr)) or arr.min(initial=0) < 0:
            raise ConfigError("labels must be non-negative integers")
        top = int(arr.max(initial=0))
        C = args.num_classes if args.num_classes is not None else top
        if top > C:
            raise ConfigError(f"label value {top} exceeds the declared {C} classes")
        if out.suffix.lower() in (".txt", ".csv"):
            _write_text(out, arr, True)
        else:
            hsio.save_labels(hsio.LabelRaster(arr.astype(np.int64), int(C)), out)
        n = int(np.count_nonzero(arr))
        print(f"labels {arr.shape[0]}x{arr.shape[1]}, {C} classes, {n} labeled pixels -> {out}")
        return EXIT_OK
    arr = np.asarray(arr, dtype=np.float64)
    if arr.ndim != 3:
        raise ConfigError(f"cube must be 3-D (height, width, bands), got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ConfigError("cube contains NaN or Inf")
    cube = hsio.HsiCube(arr.astype(np.float32))
    if out.suffix.lower() in (".txt", ".csv"):
        _write_text(out, cube.data, False)
    else:
        hsio.save_cube(cube, out)
    print(f"cube {cube.height}x{cube.width}x{cube.bands} -> {out}")
    return EXIT_OK


# --------------------------------------------------------------------------- stages


def _run(args) -> pipeline.Run:
    cfg = pipeline.load_config(args.config, args.set or [])
    return pipeline.Run.resolve(cfg, args.run_dir, args.config)


def _progress(total_every: int = 100):
    def cb(step: int, loss: float) -> None:
        if step % total_every == 0:
            log.info("pretrain step %d  loss %.5f", step, loss)

    return cb


def cmd_pretrain(args) -> int:
    run = _run(args)
    man = pipeline.run_pretrain(run, _progress())
    print(f"pretrain: D={man['outputs']['D']} params={man['outputs']['parameters']} digest={man['digest'][:12]}")
    return EXIT_OK


def cmd_extract(args) -> int:
    man = pipeline.run_extract(_run(args))
    o = man["outputs"]
    print(f"extract: {o['samples']} samples, m={o['m']}, d={o['d']}, t={o['t_values']} digest={man['digest'][:12]}")
    return EXIT_OK


def _per_seed(fn, label):
    def cmd(args) -> int:
        run = _run(args)
        for s in run.seeds(args.seed):
            man = fn(run, s)
            print(f"{label} seed {s}: digest={man['digest'][:12]} {_summary(man['outputs'])}")
        return EXIT_OK

    return cmd


def _summary(outputs: dict) -> str:
    keys = ("K", "train", "test", "E", "oa", "aa", "kappa")
    return " ".join(f"{k}={outputs[k]:.4f}" if isinstance(outputs[k], float) else f"{k}={outputs[k]}"
                    for k in keys if k in outputs)


def cmd_report(args) -> int:
    man = pipeline.run_report(_run(args))
    sys.stdout.write(man["text"])
    return EXIT_OK


def cmd_run(args) -> int:
    man = pipeline.run_all(_run(args), _progress())
    sys.stdout.write(man["text"])
    return EXIT_OK


def cmd_sweep(args) -> int:
    run = _run(args)
    if not args.ablation and not args.grid:
        raise ConfigError("sweep needs --ablation fusion and/or --grid key=v1,v2,...")
    if args.ablation:
        man = pipeline.ablation_fusion(run, None if args.seed is None else [args.seed], _progress())
        sys.stdout.write(man["text"])
    for spec in args.grid or []:
        if "=" not in spec:
            raise ConfigError(f"--grid {spec!r} is not of the form key=v1,v2")
        key, vals = spec.split("=", 1)
        import yaml

        values = [yaml.safe_load(v) for v in vals.split(",") if v.strip()]
        man = pipeline.grid_sweep(run, key.strip(), values, _progress())
        sys.stdout.write(man["text"])
    return EXIT_OK


# --------------------------------------------------------------------------- oracle


def cmd_oracle(args) -> int:
    if args.what == "scene":
        if args.out is None:
            raise ConfigError("oracle scene needs --out")
        sc = oracle.make_scene(args.scene_seed, args.size, args.classes, args.separability, args.bands, args.layout)
        out = Path(args.out)
        hsio.save_cube(sc.cube, out / "cube.json")
        hsio.save_labels(sc.labels, out / "labels.json")
        artifacts.write_json(out / "scene.json", {
            "seed": sc.seed, "size": args.size, "classes": args.classes, "bands": args.bands,
            "separability": sc.separability, "layout": sc.layout, "means": sc.means.tolist(),
            "noise_std": float(np.sqrt(sc.covariances[0, 0, 0])), "nearest_mean_oa": sc.nearest_mean_oa,
        })
        print(f"scene -> {out}  nearest-mean OA {sc.nearest_mean_oa:.4f}")
        return EXIT_OK
    if args.what == "schedule":
        from . import diffusion

        sched = diffusion.build_cosine_schedule(args.T)
        worst = 0.0
        # beta clipping only bites near t = T, so the closed form is compared on the unclipped steps
        for t in sorted({1, max(1, args.T // 2)}):
            ref = oracle.cosine_alpha_bar(t, args.T)
            got = float(sched.alpha_bar[t - 1])
            worst = max(worst, abs(got - ref))
            print(f"t={t:5d}  alpha_bar={got:.12f}  closed form={ref:.12f}")
        last = float(sched.alpha_bar[-1])
        print(f"t={args.T:5d}  alpha_bar={last:.3e}  (beta clipped at 0.999; must be < 0.01)")
        return EXIT_OK if worst < 1e-10 and last < 0.01 else EXIT_NUMERIC
    run = _run(args)
    worst = 0.0
    for s in run.seeds(args.seed):
        if args.what == "scores":
            pdir = run.stage_dir("purify", s)
            man = run.verified(pdir, "purify")
            M = artifacts.load_tensors(pdir / "data", man["outputs"]["rep_matrix"])["rep_matrix"]
            index = purify.load_index(pdir / "data" / "index.json")
            cfg = man["config"]["purify"]
            if cfg["normalize_features"]:
                raise ConfigError("the naive scorer covers the unnormalized formulas only")
            tc, tt = oracle.naive_scores(M, cfg["alpha"], cfg["beta"])
            err = max(oracle.relative_error(index.tau_class, tc), oracle.relative_error(index.tau_t, tt))
            same = oracle.naive_topk(tc + tt, index.K) == list(index.kept)
            worst = max(worst, err if same else float("inf"))
            print(f"seed {s}: score relative error {err:.3e}, top-K {'matches' if same else 'DIFFERS'}")
        else:
            pdir = run.stage_dir("predict", s)
            man = run.verified(pdir, "predict")
            t = artifacts.load_tensors(pdir / "data", man["outputs"]["tensors"])
            _, _, test_ids, _ = pipeline._split_and_index(run, s)
            _, banks = pipeline._banks(run)
            pos = {int(i): k for k, i in enumerate(t["sample_ids"])}
            rows = [pos[int(i)] for i in test_ids]
            ref = oracle.naive_metrics(t["predictions"][rows], banks.labels[rows], len(t["confusion"]))
            got = evaluate.MetricsReport.from_dict(artifacts.read_json(pdir / "data" / "metrics.json"))
            gap = max(abs(ref["oa"] - got.oa), abs(ref["aa"] - got.aa),
                      0.0 if ref["kappa"] is None else abs(ref["kappa"] - got.kappa))
            worst = max(worst, gap)
            print(f"seed {s}: OA {ref['oa']:.6f} AA {ref['aa']:.6f} kappa {ref['kappa']}  max gap {gap:.3e}")
    return EXIT_OK if worst <= 1e-12 else EXIT_NUMERIC


# --------------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="hsdiff", description="Diffusion-feature hyperspectral classification pipeline.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress")
    sub = p.add_subparsers(dest="command", required=True)

    c = sub.add_parser("convert", help="ingest a dataset export into the cube / label format")
    c.add_argument("input")
    c.add_argument("output", help="header path (.json) or .txt for delimited text")
    c.add_argument("--kind", choices=("cube", "labels"), default="cube")
    c.add_argument("--num-classes", type=int, default=None, help="declared class count for labels")
    c.add_argument("--key", default=None, help="variable name inside a .mat file")
    c.add_argument("--height", type=int)
    c.add_argument("--width", type=int)
    c.add_argument("--bands", type=int)
    c.add_argument("--dtype", choices=sorted(RAW_DTYPES), default="f32", help="raw input sample type")
    c.add_argument("--interleave", choices=("bsq", "bil", "bip"), default="bsq", help="raw input layout")
    c.add_argument("--delimiter", default=None)
    c.set_defaults(fn=cmd_convert)

    def staged(name, fn, help_, seeded=False):
        s = sub.add_parser(name, help=help_)
        s.add_argument("--config", "-c", default=None, help="YAML or JSON run config")
        s.add_argument("--run-dir", default=None, help=f"run directory (default: ${pipeline.RUN_ROOT_ENV}/<config name>)")
        s.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key, e.g. train.E=5")
        if seeded:
            s.add_argument("--seed", type=int, default=None, help="one split seed (default: all configured seeds)")
        s.set_defaults(fn=fn)
        return s

    staged("pretrain", cmd_pretrain, "fit PCA / normalization and pretrain the denoiser")
    staged("extract", cmd_extract, "build center and global feature banks")
    staged("purify", _per_seed(pipeline.run_purify, "purify"), "split and select channels", True)
    staged("train", _per_seed(pipeline.run_train, "train"), "train the fusion ensemble", True)
    staged("predict", _per_seed(pipeline.run_predict, "predict"), "classify and score the test split", True)
    staged("report", cmd_report, "average the per-seed metrics into a table")
    staged("run", cmd_run, "every stage in order")
    sw = staged("sweep", cmd_sweep, "fusion ablation and hyperparameter grids", True)
    sw.add_argument("--ablation", choices=("fusion",), default=None)
    sw.add_argument("--grid", action="append", metavar="KEY=V1,V2", help="e.g. preprocess.patch_size=16,24")

    o = staged("oracle", cmd_oracle, "reference computations against stored artifacts", True)
    o.add_argument("what", choices=("scores", "metrics", "scene", "schedule"))
    o.add_argument("--out", default=None, help="output directory for `scene`")
    o.add_argument("--scene-seed", type=int, default=0)
    o.add_argument("--size", type=int, default=64)
    o.add_argument("--classes", type=int, default=4)
    o.add_argument("--bands", type=int, default=16)
    o.add_argument("--separability", type=float, default=6.0)
    o.add_argument("--layout", choices=oracle.LAYOUTS, default="blocks")
    o.add_argument("--T", type=int, default=1000)
    return p


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.fn(args)
    except DigestMismatch as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIGEST
    except FloatingPointError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, hsio.CubeFormatError, FileNotFoundError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except RuntimeError as exc:
        if "locked" in str(exc):
            print(f"config error: {exc}", file=sys.stderr)
            return EXIT_CONFIG
        raise


if __name__ == "__main__":
    sys.exit(main())
