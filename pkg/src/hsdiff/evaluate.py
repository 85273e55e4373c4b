"""Confusion matrices, OA/AA/kappa, run averaging, classification maps and report tables."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence

import numpy as np

# Full-scale figures published for the method; layout references only.
REFERENCE_TARGETS = {
    "indian_pines": {"oa": 99.45, "aa": 99.40, "kappa": 0.9937},
    "paviau": {"oa": 99.95, "aa": 99.92, "kappa": 0.9994},
    "houston2018": {"oa": 98.29, "aa": 96.04, "kappa": 0.9777},
    "longkou": {"oa": 99.61, "aa": 98.59, "kappa": 0.9949},
}


def confusion(preds: Sequence[int], truth: Sequence[int], num_classes: int) -> np.ndarray:
    """counts[true - 1, pred - 1]; labels are 1-based."""
    preds = np.asarray(preds, dtype=np.int64)
    truth = np.asarray(truth, dtype=np.int64)
    if preds.shape != truth.shape:
        raise ValueError("preds and truth lengths differ")
    for name, arr in (("prediction", preds), ("truth", truth)):
        if arr.size and (arr.min() < 1 or arr.max() > num_classes):
            raise ValueError(f"{name} label out of range [1, {num_classes}]")
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(cm, (truth - 1, preds - 1), 1)
    return cm


@dataclass
class MetricsReport:
    oa: float
    aa: float
    kappa: Optional[float]
    per_class: List[float]
    runs: int = 1
    seeds: List[int] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "oa": self.oa,
            "aa": self.aa,
            "kappa": self.kappa,
            "per_class": [None if math.isnan(x) else x for x in self.per_class],
            "runs": self.runs,
            "seeds": list(self.seeds),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        per = [float("nan") if x is None else float(x) for x in d["per_class"]]
        return cls(d["oa"], d["aa"], d["kappa"], per, d.get("runs", 1), list(d.get("seeds", [])))


def metrics(cm: np.ndarray, seed: Optional[int] = None) -> MetricsReport:
    cm = np.asarray(cm, dtype=np.int64)
    total = int(cm.sum())
    if total <= 0:
        raise ValueError("confusion matrix is empty")
    rows = cm.sum(axis=1)
    cols = cm.sum(axis=0)
    oa = float(np.trace(cm)) / total
    per_class = [float(cm[j, j]) / rows[j] if rows[j] else float("nan") for j in range(len(cm))]
    present = [x for x in per_class if not math.isnan(x)]
    if len(present) < len(per_class):
        missing = [j + 1 for j, x in enumerate(per_class) if math.isnan(x)]
        warnings.warn(f"classes {missing} absent from evaluation; excluded from AA", stacklevel=2)
    aa = float(sum(present) / len(present))
    p_e = float(np.sum(rows.astype(np.float64) * cols)) / (float(total) * total)
    kappa = None if p_e == 1.0 else (oa - p_e) / (1.0 - p_e)
    return MetricsReport(oa, aa, kappa, per_class, 1, [] if seed is None else [seed])


def average_runs(reports: Sequence[MetricsReport]) -> MetricsReport:
    if not reports:
        raise ValueError("need at least one report")
    C = len(reports[0].per_class)
    if any(len(r.per_class) != C for r in reports):
        raise ValueError("reports disagree on the number of classes")
    n = len(reports)
    kappas = [r.kappa for r in reports]
    kappa = None if any(k is None for k in kappas) else sum(kappas) / n
    per = np.array([r.per_class for r in reports], dtype=np.float64)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        per_mean = np.nanmean(per, axis=0)
    return MetricsReport(
        sum(r.oa for r in reports) / n,
        sum(r.aa for r in reports) / n,
        kappa,
        per_mean.tolist(),
        sum(r.runs for r in reports),
        [s for r in reports for s in r.seeds],
    )


# --------------------------------------------------------------------------- maps


def default_palette(num_classes: int) -> np.ndarray:
    """Black for unlabeled, then evenly spaced hues."""
    import colorsys

    pal = [(0, 0, 0)]
    for j in range(num_classes):
        r, g, b = colorsys.hsv_to_rgb(j / max(num_classes, 1), 0.85, 0.95 if j % 2 == 0 else 0.7)
        pal.append((int(round(r * 255)), int(round(g * 255)), int(round(b * 255))))
    return np.array(pal, dtype=np.uint8)


def write_ppm(rgb: np.ndarray, path) -> Path:
    rgb = np.asarray(rgb, dtype=np.uint8)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    h, w, _ = rgb.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(rgb).tobytes())
    return path


def read_ppm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while raw[pos : pos + 1].isspace():
            pos += 1
        if raw[pos : pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        end = pos
        while not raw[end : end + 1].isspace():
            end += 1
        tokens.append(raw[pos:end].decode("ascii"))
        pos = end
    if tokens[0] != "P6" or tokens[3] != "255":
        raise ValueError(f"{path}: not an 8-bit binary PPM")
    w, h = int(tokens[1]), int(tokens[2])
    data = np.frombuffer(raw[pos + 1 : pos + 1 + w * h * 3], dtype=np.uint8)
    return data.reshape(h, w, 3)


def render_map(raster: np.ndarray, palette: np.ndarray, path) -> Path:
    """Write a class raster (0 = unlabeled) as a binary PPM."""
    raster = np.asarray(raster, dtype=np.int64)
    palette = np.asarray(palette, dtype=np.uint8)
    if raster.size and raster.max() >= len(palette):
        raise ValueError(f"palette has {len(palette)} colors, raster needs {raster.max() + 1}")
    return write_ppm(palette[raster], path)


def decode_map(rgb: np.ndarray, palette: np.ndarray) -> np.ndarray:
    """Inverse of render_map for an image drawn with ``palette``."""
    palette = np.asarray(palette, dtype=np.uint8)
    keys = {tuple(int(v) for v in c): k for k, c in reversed(list(enumerate(palette)))}
    h, w, _ = rgb.shape
    out = np.empty((h, w), dtype=np.int64)
    for r in range(h):
        for c in range(w):
            out[r, c] = keys[tuple(int(v) for v in rgb[r, c])]
    return out


# --------------------------------------------------------------------------- tables


def format_table(columns: Mapping[str, MetricsReport], class_names: Optional[Sequence[str]] = None,
                 references: Optional[Mapping[str, Mapping[str, float]]] = None) -> str:
    """Per-class accuracy rows (percent) with an OA / AA / kappa footer, one column per run."""
    names = list(columns)
    C = max(len(r.per_class) for r in columns.values())
    width = max(10, *(len(n) + 2 for n in names))
    head = "Class".ljust(28) + "".join(n.rjust(width) for n in names)
    lines = [head, "-" * len(head)]
    for j in range(C):
        label = f"{j + 1}" + (f" {class_names[j]}" if class_names and j < len(class_names) else "")
        cells = []
        for n in names:
            per = columns[n].per_class
            x = per[j] if j < len(per) else float("nan")
            cells.append(("-" if math.isnan(x) else f"{100 * x:.2f}").rjust(width))
        lines.append(label[:27].ljust(28) + "".join(cells))
    lines.append("-" * len(head))
    lines.append("OA (%)".ljust(28) + "".join(f"{100 * columns[n].oa:.2f}".rjust(width) for n in names))
    lines.append("AA (%)".ljust(28) + "".join(f"{100 * columns[n].aa:.2f}".rjust(width) for n in names))
    lines.append("kappa".ljust(28) + "".join(
        ("n/a" if columns[n].kappa is None else f"{columns[n].kappa:.4f}").rjust(width) for n in names))
    lines.append("runs".ljust(28) + "".join(str(columns[n].runs).rjust(width) for n in names))
    if references:
        lines.append("")
        lines.append("Reference (full-scale, not reproduced here):")
        for key, ref in references.items():
            lines.append(f"  {key}: OA {ref['oa']:.2f}  AA {ref['aa']:.2f}  kappa {ref['kappa']:.4f}")
    return "\n".join(lines) + "\n"
