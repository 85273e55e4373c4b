"""Hyperspectral cube and label I/O, PCA, normalization, patching and splits."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np

from . import artifacts


class CubeFormatError(ValueError):
    """Malformed cube/label header or payload."""


@dataclass(frozen=True)
class HsiCube:
    data: np.ndarray  # (height, width, bands), float32

    def __post_init__(self):
        if self.data.ndim != 3:
            raise ValueError(f"cube data must be 3-D (height, width, bands), got shape {self.data.shape}")
        if not np.all(np.isfinite(self.data)):
            raise ValueError("cube contains NaN or Inf")

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def bands(self) -> int:
        return self.data.shape[2]


@dataclass(frozen=True)
class LabelRaster:
    labels: np.ndarray  # (height, width), 0 = unlabeled
    num_classes: int

    def __post_init__(self):
        if self.labels.ndim != 2:
            raise ValueError("label raster must be 2-D")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() > self.num_classes):
            raise ValueError(f"labels must lie in [0, {self.num_classes}]")

    @property
    def height(self) -> int:
        return self.labels.shape[0]

    @property
    def width(self) -> int:
        return self.labels.shape[1]

    def labeled_ids(self) -> np.ndarray:
        """Flat (row-major) indices of labeled pixels, ascending."""
        return np.flatnonzero(self.labels.ravel() > 0)

    def class_of(self, ids: np.ndarray) -> np.ndarray:
        return self.labels.ravel()[np.asarray(ids)]


@dataclass(frozen=True)
class PcaModel:
    mean: np.ndarray  # (N,)
    components: np.ndarray  # (D, N), rows orthonormal
    explained_variance: np.ndarray  # (D,), non-increasing
    degenerate: bool = False

    @property
    def D(self) -> int:
        return self.components.shape[0]

    @property
    def N(self) -> int:
        return self.components.shape[1]


@dataclass(frozen=True)
class Patch:
    data: np.ndarray  # (H, H, D)
    center_row: int
    center_col: int
    label: Optional[int] = None


# --------------------------------------------------------------------------- file format

_CUBE_FIELDS = ("width", "height", "bands", "dtype", "layout", "byte_order")


def _payload_path(header_path: Path, header: dict) -> Path:
    return header_path.with_name(header.get("payload", header_path.stem + ".raw"))


def _read_header(path: Path, dtype: str) -> dict:
    try:
        header = artifacts.read_json(path)
    except (OSError, ValueError) as exc:
        raise CubeFormatError(f"{path}: unreadable header ({exc})") from exc
    if not isinstance(header, dict):
        raise CubeFormatError(f"{path}: header must be a mapping")
    missing = [k for k in _CUBE_FIELDS if k not in header]
    if missing:
        raise CubeFormatError(f"{path}: header missing {missing}")
    if header["dtype"] != dtype or header["layout"] != "BSQ" or header["byte_order"] != "little":
        raise CubeFormatError(
            f"{path}: expected dtype={dtype!r}, layout='BSQ', byte_order='little'; got "
            f"{header['dtype']!r}, {header['layout']!r}, {header['byte_order']!r}"
        )
    for k in ("width", "height", "bands"):
        if not isinstance(header[k], int) or header[k] < 1:
            raise CubeFormatError(f"{path}: {k} must be a positive integer")
    return header


def _read_payload(path: Path, header: dict, np_dtype: str) -> np.ndarray:
    payload = _payload_path(path, header)
    raw = payload.read_bytes()
    h, w, b = header["height"], header["width"], header["bands"]
    itemsize = np.dtype(np_dtype).itemsize
    if len(raw) != h * w * b * itemsize:
        raise CubeFormatError(
            f"{payload}: size mismatch, header declares {h * w * b} values "
            f"but payload holds {len(raw) / itemsize:g}"
        )
    bsq = np.frombuffer(raw, dtype=np_dtype).reshape(b, h, w)
    return np.ascontiguousarray(bsq.transpose(1, 2, 0))


def load_cube(path) -> HsiCube:
    path = Path(path)
    header = _read_header(path, "f32")
    data = _read_payload(path, header, "<f4").astype(np.float32)
    if not np.all(np.isfinite(data)):
        raise CubeFormatError(f"{path}: payload contains NaN or Inf")
    return HsiCube(data)


def save_cube(cube: HsiCube, path) -> Path:
    path = Path(path)
    header = {
        "kind": "cube",
        "width": cube.width,
        "height": cube.height,
        "bands": cube.bands,
        "dtype": "f32",
        "layout": "BSQ",
        "byte_order": "little",
        "payload": path.stem + ".raw",
    }
    bsq = np.ascontiguousarray(cube.data.transpose(2, 0, 1), dtype="<f4")
    path.parent.mkdir(parents=True, exist_ok=True)
    _payload_path(path, header).write_bytes(bsq.tobytes())
    artifacts.write_json(path, header)
    return path


def load_labels(path) -> LabelRaster:
    path = Path(path)
    header = _read_header(path, "u16")
    if header["bands"] != 1:
        raise CubeFormatError(f"{path}: label raster must have bands=1")
    labels = _read_payload(path, header, "<u2")[:, :, 0].astype(np.int64)
    num_classes = header.get("num_classes", int(labels.max()) if labels.size else 0)
    if labels.max(initial=0) > num_classes:
        raise CubeFormatError(f"{path}: label {labels.max()} exceeds num_classes={num_classes}")
    return LabelRaster(labels, int(num_classes))


def save_labels(raster: LabelRaster, path) -> Path:
    path = Path(path)
    header = {
        "kind": "labels",
        "width": raster.width,
        "height": raster.height,
        "bands": 1,
        "dtype": "u16",
        "layout": "BSQ",
        "byte_order": "little",
        "num_classes": int(raster.num_classes),
        "payload": path.stem + ".raw",
    }
    path.parent.mkdir(parents=True, exist_ok=True)
    _payload_path(path, header).write_bytes(np.ascontiguousarray(raster.labels, dtype="<u2").tobytes())
    artifacts.write_json(path, header)
    return path


# --------------------------------------------------------------------------- PCA


def default_components(n_bands: int) -> int:
    return max(1, int(math.floor(n_bands / 8 + 0.5)))


def fit_pca(cube: HsiCube, D: int) -> PcaModel:
    """Top-``D`` eigenvectors of the pixel-spectrum covariance.

    A covariance of rank < ``D`` is not truncated: the model is returned with
    ``degenerate=True`` and a warning.
    """
    N = cube.bands
    if not 1 <= D <= N:
        raise ValueError(f"PCA component count D={D} must lie in [1, {N}]")
    X = cube.data.reshape(-1, N).astype(np.float64)
    mean = X.mean(axis=0)
    Xc = X - mean
    cov = Xc.T @ Xc / max(X.shape[0] - 1, 1)
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(evals)[::-1][:D]
    evals = np.clip(evals[order], 0.0, None)
    comps = evecs[:, order].T.copy()
    # deterministic sign: largest-magnitude loading positive
    flip = np.sign(comps[np.arange(D), np.abs(comps).argmax(axis=1)])
    comps *= np.where(flip == 0, 1.0, flip)[:, None]
    top = float(np.max(np.linalg.eigvalsh(cov))) if N else 0.0
    tol = max(top, 0.0) * N * 1e-12
    rank = int(np.sum(evals > tol)) if top > 0 else 0
    degenerate = rank < D
    if degenerate:
        warnings.warn(f"pixel covariance has rank {rank} < D={D}; PCA model flagged degenerate", stacklevel=2)
    return PcaModel(mean=mean, components=comps, explained_variance=evals, degenerate=degenerate)


def apply_pca(cube: HsiCube, model: PcaModel) -> HsiCube:
    if cube.bands != model.N:
        raise ValueError(f"cube has {cube.bands} bands, PCA model expects {model.N}")
    X = cube.data.reshape(-1, model.N).astype(np.float64)
    Y = (X - model.mean) @ model.components.T
    return HsiCube(Y.reshape(cube.height, cube.width, model.D).astype(np.float32))


def back_project(cube: HsiCube, model: PcaModel) -> np.ndarray:
    """Map a projected cube back to spectral space (float64)."""
    Y = cube.data.reshape(-1, model.D).astype(np.float64)
    return (Y @ model.components + model.mean).reshape(cube.height, cube.width, model.N)


def save_pca(model: PcaModel, directory) -> dict:
    entries = artifacts.save_tensors(
        directory,
        {"pca_mean": model.mean, "pca_components": model.components, "pca_explained_variance": model.explained_variance},
        tag="f64",
    )
    return {"tensors": entries, "degenerate": model.degenerate}


def load_pca(directory, entry: dict) -> PcaModel:
    t = artifacts.load_tensors(directory, entry["tensors"])
    return PcaModel(t["pca_mean"], t["pca_components"], t["pca_explained_variance"], bool(entry["degenerate"]))


# --------------------------------------------------------------------------- normalization


def percentile_bounds(cube: HsiCube) -> Tuple[np.ndarray, np.ndarray]:
    X = cube.data.reshape(-1, cube.bands).astype(np.float64)
    return np.percentile(X, 1, axis=0), np.percentile(X, 99, axis=0)


def normalize(cube: HsiCube, bounds: Optional[Tuple[np.ndarray, np.ndarray]] = None) -> HsiCube:
    """Per band, map the [p1, p99] range onto [-1, 1] and clamp to [-1.5, 1.5]."""
    lo, hi = percentile_bounds(cube) if bounds is None else bounds
    lo = np.asarray(lo, dtype=np.float64)
    hi = np.asarray(hi, dtype=np.float64)
    span = hi - lo
    flat = span <= 0
    if np.any(flat):
        warnings.warn(f"constant band(s) {np.flatnonzero(flat).tolist()} mapped to 0", stacklevel=2)
    X = cube.data.astype(np.float64)
    safe = np.where(flat, 1.0, span)
    Y = 2.0 * (X - lo) / safe - 1.0
    Y[..., flat] = 0.0
    return HsiCube(np.clip(Y, -1.5, 1.5).astype(np.float32))


# --------------------------------------------------------------------------- patches


def pad_cube(data: np.ndarray, H: int) -> np.ndarray:
    """Mirror-pad ``H/2`` pixels on every spatial border."""
    if H < 2 or H % 2:
        raise ValueError(f"patch size H={H} must be even and >= 2")
    pad = H // 2
    if pad > min(data.shape[0], data.shape[1]) - 1:
        raise ValueError(f"patch size H={H} is larger than the mirror-padded cube {data.shape[:2]}")
    return np.pad(data, ((pad, pad), (pad, pad), (0, 0)), mode="reflect")


def crop(padded: np.ndarray, rows: Sequence[int], cols: Sequence[int], H: int) -> np.ndarray:
    """Patches of size H centered (at index H//2) on source pixels ``(rows, cols)``."""
    rows = np.asarray(rows)
    cols = np.asarray(cols)
    out = np.empty((len(rows), H, H, padded.shape[2]), dtype=padded.dtype)
    for n, (r, c) in enumerate(zip(rows, cols)):
        out[n] = padded[r : r + H, c : c + H]
    return out


def random_centers(shape: Tuple[int, int], count: int, rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
    # centers fall on real pixels; the crops themselves reach into the mirror margin
    return rng.integers(0, shape[0], size=count), rng.integers(0, shape[1], size=count)


def extract_patches(
    cube: HsiCube,
    labels: Optional[LabelRaster],
    H: int,
    mode: str = "labeled_centers",
    count: Optional[int] = None,
    rng: Optional[np.random.Generator] = None,
    ids: Optional[Sequence[int]] = None,
) -> List[Patch]:
    """Cut H x H patches from a (normalized) cube.

    ``random_unlabeled`` draws ``count`` crops at uniformly random centers.
    ``labeled_centers`` yields one patch per labeled pixel (or per flat pixel id
    in ``ids``) with the pixel at index ``(H//2, H//2)``.
    """
    padded = pad_cube(cube.data, H)
    if mode == "random_unlabeled":
        if count is None:
            raise ValueError("random_unlabeled needs a count")
        rng = rng if rng is not None else np.random.default_rng(0)
        rows, cols = random_centers((cube.height, cube.width), count, rng)
        data = crop(padded, rows, cols, H)
        return [Patch(d, int(r), int(c)) for d, r, c in zip(data, rows, cols)]
    if mode != "labeled_centers":
        raise ValueError(f"unknown patch mode {mode!r}")
    if labels is None:
        raise ValueError("labeled_centers needs a label raster")
    if (labels.height, labels.width) != (cube.height, cube.width):
        raise ValueError("label raster and cube dimensions differ")
    flat = labels.labeled_ids() if ids is None else np.asarray(ids)
    if count is not None:
        flat = flat[:count]
    rows, cols = np.divmod(flat, cube.width)
    data = crop(padded, rows, cols, H)
    lab = labels.labels
    return [Patch(d, int(r), int(c), int(lab[r, c])) for d, r, c in zip(data, rows, cols)]


# --------------------------------------------------------------------------- splits


def apportion(class_sizes: Sequence[int], fraction: float) -> List[int]:
    """Per-class training counts: floor(fraction * total) spread proportionally.

    Integer parts go first, leftover slots to the largest remainders (ties to the
    lower class index), then every class gets at least one training pixel.
    """
    sizes = [int(n) for n in class_sizes]
    total = sum(sizes)
    n_train = math.floor(round(fraction * total, 9))
    base = [n * n_train // total for n in sizes]
    rem = [n * n_train % total for n in sizes]
    left = n_train - sum(base)
    for j in sorted(range(len(sizes)), key=lambda j: (-rem[j], j))[:left]:
        base[j] += 1
    return [min(n, max(1, b)) for n, b in zip(sizes, base)]


def split_train_test(labels: LabelRaster, fraction: float, seed: int) -> Tuple[np.ndarray, np.ndarray]:
    """Stratified split of labeled pixels; returns sorted flat pixel ids (train, test)."""
    if not 0 < fraction < 1:
        raise ValueError(f"fraction must lie in (0, 1), got {fraction}")
    flat = labels.labels.ravel()
    members = [np.flatnonzero(flat == j) for j in range(1, labels.num_classes + 1)]
    empty = [j + 1 for j, m in enumerate(members) if m.size == 0]
    if empty:
        raise ValueError(f"classes {empty} have no labeled pixels")
    counts = apportion([m.size for m in members], fraction)
    rng = np.random.default_rng(seed)
    train, test = [], []
    for m, k in zip(members, counts):
        perm = rng.permutation(m)
        train.append(perm[:k])
        test.append(perm[k:])
    return np.sort(np.concatenate(train)), np.sort(np.concatenate(test))
