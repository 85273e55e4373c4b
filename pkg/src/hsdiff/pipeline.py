"""Run configuration and the stage runners behind the CLI.

A run directory holds one sub-directory per stage (per split seed for the
purify / train / predict stages). Each stage directory contains ``data/`` with
the artifact itself and ``manifest.json`` recording the effective config, the
digest of ``data/`` and the digests of the upstream stages it consumed.
"""

from __future__ import annotations

import copy
import hashlib
import logging
import os
import shutil
from dataclasses import asdict
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
import yaml

from . import artifacts, diffusion, evaluate, featbank, fuse, hsio, purify, unet
from .artifacts import DigestMismatch

log = logging.getLogger(__name__)

RUN_ROOT_ENV = "HSDIFF_RUN_ROOT"


class ConfigError(ValueError):
    """Invalid or inconsistent run configuration."""


DEFAULTS: dict = {
    "data": {"cube": None, "labels": None, "num_classes": None, "name": None},
    "preprocess": {"components": None, "patch_size": 48},
    "model": {
        "base_channels": 32,
        "stage_multipliers": [1, 2, 4],
        "time_embed_dim": 128,
        "groups_per_norm": 8,
        "num_res_blocks": 1,
        "attention_resolutions": None,
        "tap_middle": False,
    },
    "pretrain": {
        "steps": 40000,
        "batch_size": 128,
        "lr": 1e-4,
        "T": 1000,
        "lambda_vlb": 0.001,
        "loss_mode": "hybrid",
        "seed": 0,
        "ema_rate": None,
        "keep_checkpoints": 3,
    },
    "extract": {"m": 19, "seed": 0, "noise_policy": "shared", "batch_size": 64},
    "purify": {"alpha": 0.5, "beta": 0.5, "K": None, "normalize_features": False, "train_fraction": 0.1},
    "train": {
        "E": 10,
        "epochs": 100,
        "lr": 1e-4,
        "lr_min": 5e-6,
        "batch_size": 64,
        "hidden": [128, 64],
        "mode": "selective",
        "shared_fusion": False,
    },
    "seeds": [0],
    "run_dir": None,
}

# config sections each stage's output depends on
STAGE_SECTIONS = {
    "pretrain": ("data", "preprocess", "model", "pretrain"),
    "extract": ("data", "preprocess", "model", "pretrain", "extract"),
    "purify": ("data", "preprocess", "model", "pretrain", "extract", "purify"),
    "train": ("data", "preprocess", "model", "pretrain", "extract", "purify", "train"),
    "predict": ("data", "preprocess", "model", "pretrain", "extract", "purify", "train"),
}


# --------------------------------------------------------------------------- config


def _merge(base: dict, over: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        key = f"{path}{k}"
        if k not in base:
            raise ConfigError(f"unknown config key {key!r}")
        if isinstance(base[k], dict):
            if not isinstance(v, dict):
                raise ConfigError(f"config key {key!r} must be a mapping")
            out[k] = _merge(base[k], v, key + ".")
        else:
            out[k] = v
    return out


def apply_override(cfg: dict, assignment: str) -> dict:
    """Apply one ``section.key=value`` override; the value is parsed as YAML."""
    if "=" not in assignment:
        raise ConfigError(f"override {assignment!r} is not of the form key=value")
    key, raw = assignment.split("=", 1)
    parts = key.strip().split(".")
    nested: dict = {}
    cur = nested
    for p in parts[:-1]:
        cur[p] = {}
        cur = cur[p]
    cur[parts[-1]] = yaml.safe_load(raw)
    return _merge(cfg, nested)


def load_config(path=None, overrides: Sequence[str] = ()) -> dict:
    """Defaults, then the YAML/JSON document at ``path``, then ``key=value`` overrides."""
    cfg = copy.deepcopy(DEFAULTS)
    if path is not None:
        try:
            doc = yaml.safe_load(Path(path).read_text()) or {}
        except (OSError, yaml.YAMLError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        if not isinstance(doc, dict):
            raise ConfigError(f"config {path} must be a mapping")
        cfg = _merge(cfg, doc)
    for o in overrides:
        cfg = apply_override(cfg, o)
    validate_config(cfg)
    return cfg


def unet_config(cfg: dict, D: int) -> unet.UNetConfig:
    m = cfg["model"]
    attn = m["attention_resolutions"]
    return unet.UNetConfig(
        in_channels=D,
        image_size=cfg["preprocess"]["patch_size"],
        base_channels=m["base_channels"],
        stage_multipliers=tuple(m["stage_multipliers"]),
        time_embed_dim=m["time_embed_dim"],
        groups_per_norm=m["groups_per_norm"],
        attention_resolutions=None if attn is None else tuple(attn),
        num_res_blocks=m["num_res_blocks"],
        tap_middle=m["tap_middle"],
    )


def pretrain_config(cfg: dict) -> diffusion.PretrainConfig:
    p = cfg["pretrain"]
    return diffusion.PretrainConfig(
        total_steps=p["steps"], batch_size=p["batch_size"], learning_rate=p["lr"], T=p["T"],
        lambda_vlb=p["lambda_vlb"], seed=p["seed"], ema_rate=p["ema_rate"], loss_mode=p["loss_mode"],
        keep_checkpoints=p["keep_checkpoints"],
    )


def purify_config(cfg: dict) -> purify.PurifyConfig:
    p = cfg["purify"]
    return purify.PurifyConfig(p["alpha"], p["beta"], p["K"], p["normalize_features"])


def train_config(cfg: dict, seed: int, **changes) -> fuse.TrainConfig:
    t = dict(cfg["train"])
    t["hidden"] = tuple(t["hidden"])
    t.update(changes)
    return fuse.TrainConfig(seed=seed, **t)


def validate_config(cfg: dict) -> None:
    """Check every knob against the owning module's preconditions."""
    try:
        pre = cfg["preprocess"]
        H = pre["patch_size"]
        if not isinstance(H, int) or H < 2 or H % 2:
            raise ValueError(f"preprocess.patch_size must be an even integer >= 2, got {H}")
        if pre["components"] is not None and int(pre["components"]) < 1:
            raise ValueError("preprocess.components must be >= 1")
        unet_config(cfg, 1 if pre["components"] is None else int(pre["components"])).validate()
        pretrain_config(cfg).validate()
        T = cfg["pretrain"]["T"]
        if T < 2:
            raise ValueError("pretrain.T must be >= 2")
        ex = cfg["extract"]
        if not 1 <= ex["m"] <= T - 1:
            raise ValueError(f"extract.m must lie in [1, {T - 1}]")
        if ex["noise_policy"] not in featbank.NOISE_POLICIES:
            raise ValueError(f"extract.noise_policy must be one of {featbank.NOISE_POLICIES}")
        purify_config(cfg).validate()
        if cfg["purify"]["K"] is not None and cfg["purify"]["K"] < 1:
            raise ValueError("purify.K must be >= 1")
        if not 0 < cfg["purify"]["train_fraction"] < 1:
            raise ValueError("purify.train_fraction must lie in (0, 1)")
        if len(cfg["train"]["hidden"]) != 2:
            raise ValueError("train.hidden must list two widths")
        train_config(cfg, 0).validate()
        seeds = cfg["seeds"]
        if not seeds or any(not isinstance(s, int) for s in seeds) or len(set(seeds)) != len(seeds):
            raise ValueError("seeds must be a non-empty list of distinct integers")
    except (ValueError, TypeError, KeyError) as exc:
        raise ConfigError(str(exc)) from None


# --------------------------------------------------------------------------- run directory


def file_digest(paths: Sequence[Path]) -> str:
    h = hashlib.sha256()
    for p in paths:
        h.update(Path(p).name.encode())
        h.update(hashlib.sha256(Path(p).read_bytes()).digest())
    return h.hexdigest()


def _with_payload(header: Path) -> List[Path]:
    doc = artifacts.read_json(header)
    return [header, header.parent / doc.get("payload", header.stem + ".raw")]


class Run:
    """A run directory bound to an effective configuration."""

    def __init__(self, root, cfg: dict):
        self.root = Path(root)
        self.cfg = cfg

    @classmethod
    def resolve(cls, cfg: dict, run_dir=None, config_path=None) -> "Run":
        root = run_dir or cfg.get("run_dir")
        if root is None:
            base = os.environ.get(RUN_ROOT_ENV)
            if base is None:
                raise ConfigError(f"no run directory: pass --run-dir, set run_dir, or set ${RUN_ROOT_ENV}")
            root = Path(base) / (Path(config_path).stem if config_path else "run")
        return cls(root, cfg)

    # ---- layout

    def stage_dir(self, stage: str, seed: Optional[int] = None) -> Path:
        return self.root / stage if seed is None else self.root / stage / f"seed_{seed:03d}"

    def rel(self, path: Path) -> str:
        return path.relative_to(self.root).as_posix()

    def seeds(self, seed: Optional[int] = None) -> List[int]:
        return list(self.cfg["seeds"]) if seed is None else [seed]

    # ---- manifests and the digest chain

    def write_stage(self, stage_dir: Path, stage: str, build, upstream: Dict[str, str], extra: Optional[dict] = None) -> dict:
        """Build ``data/`` via ``build(tmp_data_dir) -> dict`` and record its manifest."""
        with artifacts.atomic_dir(stage_dir) as tmp:
            data = tmp / "data"
            data.mkdir()
            outputs = build(data) or {}
            manifest = {
                "stage": stage,
                "config": {k: self.cfg[k] for k in STAGE_SECTIONS.get(stage, tuple(self.cfg))},
                "upstream": upstream,
                "outputs": outputs,
                "digest": artifacts.dir_digest(data),
            }
            manifest.update(extra or {})
            artifacts.write_json(tmp / artifacts.MANIFEST, manifest)
        return manifest

    def verified(self, stage_dir: Path, stage: str) -> dict:
        """Manifest of ``stage_dir`` after checking its data and the whole upstream chain."""
        man_path = stage_dir / artifacts.MANIFEST
        if not man_path.exists():
            raise ConfigError(f"stage {stage!r} has not been run ({stage_dir}); run it first")
        man = artifacts.read_json(man_path)
        artifacts.verify_digest(stage_dir / "data", man["digest"], f"{stage} artifact")
        for rel, digest in man["upstream"].items():
            up = self.root / rel
            up_man = up / artifacts.MANIFEST
            if not up_man.exists():
                raise DigestMismatch(f"upstream {rel} of {self.rel(stage_dir)} is missing")
            recorded = artifacts.read_json(up_man)
            if recorded["digest"] != digest:
                raise DigestMismatch(
                    f"{self.rel(stage_dir)} was built from {rel} digest {digest[:12]}, "
                    f"which is now {recorded['digest'][:12]}; rerun {stage}"
                )
            self.verified(up, recorded["stage"])
        sections = STAGE_SECTIONS.get(stage)
        if sections:
            for sec in sections:
                if man["config"].get(sec) != self.cfg[sec]:
                    raise ConfigError(f"{self.rel(stage_dir)} was built with different {sec!r} settings; rerun {stage}")
        return man

    # ---- shared loading

    def inputs(self) -> Dict[str, object]:
        d = self.cfg["data"]
        if not d["cube"] or not d["labels"]:
            raise ConfigError("data.cube and data.labels are required")
        try:
            cube = hsio.load_cube(d["cube"])
            labels = hsio.load_labels(d["labels"])
        except (OSError, hsio.CubeFormatError) as exc:
            raise ConfigError(str(exc)) from None
        if d["num_classes"] is not None:
            if labels.labels.max(initial=0) > d["num_classes"]:
                raise ConfigError(f"label raster holds class {labels.labels.max()} > data.num_classes")
            labels = hsio.LabelRaster(labels.labels, int(d["num_classes"]))
        if (labels.height, labels.width) != (cube.height, cube.width):
            raise ConfigError("cube and label raster dimensions differ")
        digest = file_digest(_with_payload(Path(d["cube"])) + _with_payload(Path(d["labels"])))
        return {"cube": cube, "labels": labels, "digest": digest}

    def prepared(self, pre_dir: Path, man: dict, inp: dict) -> hsio.HsiCube:
        if inp["digest"] != man["outputs"]["inputs_digest"]:
            raise DigestMismatch("input cube or labels changed since pretraining; rerun pretrain")
        pca = hsio.load_pca(pre_dir / "data" / "pca", man["outputs"]["pca"])
        b = artifacts.load_tensors(pre_dir / "data", man["outputs"]["bounds"])
        return hsio.normalize(hsio.apply_pca(inp["cube"], pca), (b["lo"], b["hi"]))


# --------------------------------------------------------------------------- stages


def run_pretrain(run: Run, progress=None) -> dict:
    cfg = run.cfg
    inp = run.inputs()
    cube = inp["cube"]
    D = cfg["preprocess"]["components"] or hsio.default_components(cube.bands)
    if D > cube.bands:
        raise ConfigError(f"preprocess.components={D} exceeds the cube's {cube.bands} bands")
    H = cfg["preprocess"]["patch_size"]
    if H // 2 > min(cube.height, cube.width) - 1:
        raise ConfigError(f"patch size {H} is too large for a {cube.height}x{cube.width} cube")
    pca = hsio.fit_pca(cube, D)
    reduced = hsio.apply_pca(cube, pca)
    lo, hi = hsio.percentile_bounds(reduced)
    norm = hsio.normalize(reduced, (lo, hi))
    mcfg = unet_config(cfg, D)
    try:
        mcfg.validate()
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    model = unet.build(mcfg, seed=cfg["pretrain"]["seed"])
    pcfg = pretrain_config(cfg)
    ckpt_dir = run.root / "checkpoints"
    with artifacts.stage_lock(run.root, "pretrain"):
        try:
            ckpt = diffusion.pretrain(diffusion.RandomPatchSource(norm.data, H), model, pcfg, ckpt_dir, progress=progress)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

        def build(data: Path) -> dict:
            pca_entry = hsio.save_pca(pca, data / "pca")
            bounds = artifacts.save_tensors(data, {"lo": lo, "hi": hi}, tag="f64")
            shutil.copytree(ckpt, data / "model")
            return {
                "inputs_digest": inp["digest"],
                "D": D,
                "N": cube.bands,
                "pca": pca_entry,
                "bounds": bounds,
                "parameters": unet.parameter_count(model),
                "feature_dim": mcfg.feature_dim,
            }

        return run.write_stage(run.stage_dir("pretrain"), "pretrain", build, {})


def run_extract(run: Run) -> dict:
    cfg = run.cfg
    pre_dir = run.stage_dir("pretrain")
    pre = run.verified(pre_dir, "pretrain")
    inp = run.inputs()
    norm = run.prepared(pre_dir, pre, inp)
    model, schedule, _ = diffusion.load_checkpoint(pre_dir / "data" / "model")
    raster = inp["labels"]
    ids = raster.labeled_ids()
    H = cfg["preprocess"]["patch_size"]
    patches = hsio.extract_patches(norm, raster, H, "labeled_centers", ids=ids)
    data = np.stack([p.data for p in patches]) if patches else np.zeros((0, H, H, norm.bands), np.float32)
    grid = featbank.make_grid(schedule.T, cfg["extract"]["m"])
    ex = cfg["extract"]
    with artifacts.stage_lock(run.root, "extract"):
        banks = featbank.build_banks(
            model, data, grid, ex["seed"], schedule, sample_ids=ids, labels=raster.class_of(ids),
            batch_size=ex["batch_size"], noise_policy=ex["noise_policy"],
        )
        if not (np.all(np.isfinite(banks.center)) and np.all(np.isfinite(banks.global_))):
            raise FloatingPointError("feature banks contain non-finite values")

        def build(d: Path) -> dict:
            featbank.save_banks(banks, d / "banks", {"checkpoint_digest": pre["digest"]})
            return {"samples": int(len(ids)), "m": grid.m, "d": banks.d, "t_values": list(grid.t_values),
                    "num_classes": raster.num_classes, "shape": [raster.height, raster.width]}

        return run.write_stage(run.stage_dir("extract"), "extract", build, {"pretrain": pre["digest"]})


def _banks(run: Run):
    ex_dir = run.stage_dir("extract")
    man = run.verified(ex_dir, "extract")
    return man, featbank.load_banks(ex_dir / "data" / "banks")


def run_purify(run: Run, seed: int) -> dict:
    ex_man, banks = _banks(run)
    C = ex_man["outputs"]["num_classes"]
    h, w = ex_man["outputs"]["shape"]
    raster = np.zeros(h * w, dtype=np.int64)
    raster[banks.sample_ids] = banks.labels
    train_ids, test_ids = hsio.split_train_test(hsio.LabelRaster(raster.reshape(h, w), C),
                                                run.cfg["purify"]["train_fraction"], seed)
    pc = purify_config(run.cfg)
    try:
        pc.validate(banks.d)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    sub = banks.subset(train_ids)
    rep, index = purify.purify(sub.center, sub.labels, C, pc)
    with artifacts.stage_lock(run.root, f"purify-{seed}"):

        def build(d: Path) -> dict:
            purify.save_index(index, d / "index.json", pc)
            split = artifacts.save_tensors(d, {"train_ids": train_ids, "test_ids": test_ids}, tag="i64")
            rep_entry = artifacts.save_tensors(d, {"rep_matrix": rep.M}, tag="f64")
            return {"split": split, "rep_matrix": rep_entry, "class_counts": list(rep.class_counts),
                    "K": index.K, "index_digest": index.digest(), "train": int(len(train_ids)),
                    "test": int(len(test_ids))}

        return run.write_stage(run.stage_dir("purify", seed), "purify", build,
                               {"extract": ex_man["digest"]}, {"seed": seed})


def _split_and_index(run: Run, seed: int):
    pdir = run.stage_dir("purify", seed)
    man = run.verified(pdir, "purify")
    split = artifacts.load_tensors(pdir / "data", man["outputs"]["split"])
    index = purify.load_index(pdir / "data" / "index.json")
    return man, split["train_ids"], split["test_ids"], index


def run_train(run: Run, seed: int) -> dict:
    ex_man, banks = _banks(run)
    pman, train_ids, _, index = _split_and_index(run, seed)
    sub = banks.subset(train_ids)
    tc = train_config(run.cfg, seed)
    with artifacts.stage_lock(run.root, f"train-{seed}"):
        ens = fuse.train_ensemble(purify.apply_purification(sub.center, index), sub.global_, sub.labels,
                                  tc, ex_man["outputs"]["num_classes"])

        def build(d: Path) -> dict:
            fuse.save_ensemble(ens, d / "ensemble", {"index_digest": index.digest(), "bank_digest": ex_man["digest"]})
            return {"E": ens.E, "final_losses": [c[-1] for c in ens.loss_curves]}

        return run.write_stage(run.stage_dir("train", seed), "train", build,
                               {run.rel(run.stage_dir("purify", seed)): pman["digest"]}, {"seed": seed})


def run_predict(run: Run, seed: int) -> dict:
    ex_man, banks = _banks(run)
    tdir = run.stage_dir("train", seed)
    tman = run.verified(tdir, "train")
    _, _, test_ids, index = _split_and_index(run, seed)
    ens = fuse.load_ensemble(tdir / "data" / "ensemble")
    if ens.meta.get("index_digest") != index.digest() or ens.meta.get("bank_digest") != ex_man["digest"]:
        raise DigestMismatch(f"ensemble for seed {seed} was trained on a different index or bank; rerun train")
    preds = fuse.predict(ens, purify.apply_purification(banks.center, index), banks.global_)
    pos = {int(s): k for k, s in enumerate(banks.sample_ids)}
    rows = np.array([pos[int(i)] for i in test_ids], dtype=np.int64)
    C = ex_man["outputs"]["num_classes"]
    cm = evaluate.confusion(preds[rows], banks.labels[rows], C)
    report = evaluate.metrics(cm, seed)
    h, w = ex_man["outputs"]["shape"]
    raster = np.zeros(h * w, dtype=np.int64)
    raster[banks.sample_ids] = preds
    with artifacts.stage_lock(run.root, f"predict-{seed}"):

        def build(d: Path) -> dict:
            tensors = artifacts.save_tensors(d, {"sample_ids": banks.sample_ids, "predictions": preds,
                                                 "confusion": cm}, tag="i64")
            artifacts.write_json(d / "metrics.json", report.to_dict())
            evaluate.render_map(raster.reshape(h, w), evaluate.default_palette(C), d / "map.ppm")
            return {"tensors": tensors, "oa": report.oa, "aa": report.aa, "kappa": report.kappa}

        return run.write_stage(run.stage_dir("predict", seed), "predict", build,
                               {run.rel(tdir): tman["digest"]}, {"seed": seed})


def load_metrics(run: Run, seed: int) -> evaluate.MetricsReport:
    pdir = run.stage_dir("predict", seed)
    run.verified(pdir, "predict")
    return evaluate.MetricsReport.from_dict(artifacts.read_json(pdir / "data" / "metrics.json"))


def _references(cfg: dict) -> dict:
    name = cfg["data"].get("name")
    refs = evaluate.REFERENCE_TARGETS
    return {name: refs[name]} if name in refs else dict(refs)


def run_report(run: Run) -> dict:
    seeds = run.seeds()
    reports = [load_metrics(run, s) for s in seeds]
    upstream = {run.rel(run.stage_dir("predict", s)): artifacts.read_json(run.stage_dir("predict", s) / artifacts.MANIFEST)["digest"]
                for s in seeds}
    mean = evaluate.average_runs(reports)
    columns = {f"seed {s}": r for s, r in zip(seeds, reports)}
    columns["mean"] = mean
    text = evaluate.format_table(columns, references=_references(run.cfg))

    def build(d: Path) -> dict:
        artifacts.write_json(d / "report.json", mean.to_dict())
        (d / "report.txt").write_text(text)
        return {"oa": mean.oa, "aa": mean.aa, "kappa": mean.kappa, "runs": mean.runs}

    man = run.write_stage(run.stage_dir("report"), "report", build, upstream)
    man["text"] = text
    return man


def run_all(run: Run, progress=None, seeds: Optional[Sequence[int]] = None) -> dict:
    """Every stage in order, skipping nothing."""
    run_pretrain(run, progress)
    run_extract(run)
    for s in seeds if seeds is not None else run.seeds():
        run_purify(run, s)
        run_train(run, s)
        run_predict(run, s)
    return run_report(run)


def _ready(run: Run, stage_dir: Path, stage: str) -> bool:
    try:
        run.verified(stage_dir, stage)
        return True
    except (ConfigError, DigestMismatch):
        return False


def ensure_upstream(run: Run, seeds: Sequence[int], progress=None) -> None:
    """Run pretrain / extract / purify where missing or stale."""
    if not _ready(run, run.stage_dir("pretrain"), "pretrain"):
        run_pretrain(run, progress)
    if not _ready(run, run.stage_dir("extract"), "extract"):
        run_extract(run)
    for s in seeds:
        if not _ready(run, run.stage_dir("purify", s), "purify"):
            run_purify(run, s)


# --------------------------------------------------------------------------- sweeps


ABLATION_ROWS = ("manual", "average", "selective_noguide", "selective")


def ablation_fusion(run: Run, seeds: Optional[Sequence[int]] = None, progress=None) -> dict:
    """Manual single-timestep / average / selective without and with guidance, per seed."""
    seeds = list(seeds) if seeds is not None else run.seeds()
    ensure_upstream(run, seeds, progress)
    ex_man, banks = _banks(run)
    C = ex_man["outputs"]["num_classes"]
    m = ex_man["outputs"]["m"]
    per_seed: Dict[str, Dict[str, float]] = {}
    upstream = {}
    for s in seeds:
        pman, train_ids, test_ids, index = _split_and_index(run, s)
        upstream[run.rel(run.stage_dir("purify", s))] = pman["digest"]
        tr, te = banks.subset(train_ids), banks.subset(test_ids)
        c_tr, c_te = purify.apply_purification(tr.center, index), purify.apply_purification(te.center, index)
        row: Dict[str, float] = {}
        for i in range(m):
            ens = fuse.manual_single_timestep(c_tr, tr.labels, train_config(run.cfg, s), i, C)
            row[f"manual_t{i}"] = evaluate.metrics(evaluate.confusion(fuse.predict(ens, c_te, None), te.labels, C)).oa
        for mode in ABLATION_ROWS[1:]:
            g_tr = tr.global_ if mode == "selective" else None
            g_te = te.global_ if mode == "selective" else None
            ens = fuse.train_ensemble(c_tr, g_tr, tr.labels, train_config(run.cfg, s, mode=mode), C)
            row[mode] = evaluate.metrics(evaluate.confusion(fuse.predict(ens, c_te, g_te), te.labels, C)).oa
        per_seed[str(s)] = row
        log.info("ablation seed %d: %s", s, row)
    keys = list(next(iter(per_seed.values())))
    mean = {k: float(np.mean([per_seed[str(s)][k] for s in seeds])) for k in keys}
    best_t = max(range(m), key=lambda i: (mean[f"manual_t{i}"], -i))
    rows = {
        "manual": mean[f"manual_t{best_t}"],
        "average": mean["average"],
        "selective_noguide": mean["selective_noguide"],
        "selective": mean["selective"],
    }
    ordering = sorted(rows, key=lambda k: -rows[k])
    lines = ["Fusion ablation (mean OA over seeds %s)" % seeds, "-" * 48]
    labels = {"manual": f"Manual selection (best t index {best_t})", "average": "Average fusion",
              "selective_noguide": "Selective fusion, no guidance", "selective": "Selective fusion"}
    for k in ABLATION_ROWS:
        lines.append(f"{labels[k]:<38}{100 * rows[k]:8.2f}")
    lines.append("")
    lines.append("Per-timestep manual selection: " + ", ".join(f"t{i}={100 * mean[f'manual_t{i}']:.2f}" for i in range(m)))
    lines.append("Ordering: " + " > ".join(ordering))
    text = "\n".join(lines) + "\n"

    def build(d: Path) -> dict:
        doc = {"rows": rows, "best_timestep_index": best_t, "mean": mean, "per_seed": per_seed,
               "ordering": ordering, "seeds": seeds}
        artifacts.write_json(d / "ablation.json", doc)
        (d / "ablation.txt").write_text(text)
        return {"rows": rows, "best_timestep_index": best_t}

    man = run.write_stage(run.stage_dir("sweep") / "ablation_fusion", "sweep", build, upstream)
    man["text"] = text
    man["mean"] = mean
    man["per_seed"] = per_seed
    return man


def grid_sweep(run: Run, key: str, values: Sequence[object], progress=None) -> dict:
    """Full pipeline once per value of ``key`` in sub-runs under ``sweep/``."""
    results = {}
    upstream = {}
    for v in values:
        sub_cfg = apply_override(run.cfg, f"{key}={yaml.safe_dump(v, default_flow_style=True).strip()}")
        validate_config(sub_cfg)
        name = f"grid_{key.replace('.', '_')}_{v}"
        sub = Run(run.stage_dir("sweep") / name, sub_cfg)
        man = run_all(sub, progress)
        results[str(v)] = {"oa": man["outputs"]["oa"], "aa": man["outputs"]["aa"], "kappa": man["outputs"]["kappa"]}
        upstream[run.rel(sub.stage_dir("report"))] = man["digest"]
    lines = [f"Sweep over {key}", f"{'value':>12}{'OA (%)':>10}{'AA (%)':>10}{'kappa':>10}"]
    for v, r in results.items():
        k = "n/a" if r["kappa"] is None else f"{r['kappa']:.4f}"
        lines.append(f"{v:>12}{100 * r['oa']:10.2f}{100 * r['aa']:10.2f}{k:>10}")
    text = "\n".join(lines) + "\n"

    def build(d: Path) -> dict:
        artifacts.write_json(d / "sweep.json", {"key": key, "results": results})
        (d / "sweep.txt").write_text(text)
        return {"key": key, "results": results}

    # sub-runs carry their own configs, so their report digests are recorded rather than chain-verified
    man = run.write_stage(run.stage_dir("sweep") / f"summary_{key.replace('.', '_')}", "sweep", build, {},
                          {"subruns": upstream})
    man["text"] = text
    return man
