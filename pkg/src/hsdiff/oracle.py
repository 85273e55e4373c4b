"""Brute-force reference computations and a synthetic hyperspectral scene generator.

Everything here is deliberately loop-level and 64-bit; nothing is imported from
the production scoring, schedule or metrics code so the two can check each other.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from .hsio import HsiCube, LabelRaster

LAYOUTS = ("blocks", "checkerboard")


# --------------------------------------------------------------------------- purification


def naive_rep_matrix(center: np.ndarray, labels: Sequence[int], num_classes: int) -> np.ndarray:
    """Per-element accumulation of class means, shape (m, C, d)."""
    center = np.asarray(center, dtype=np.float64)
    n, m, d = center.shape
    M = np.zeros((m, num_classes, d))
    counts = [0] * num_classes
    for s in range(n):
        counts[int(labels[s]) - 1] += 1
    for j in range(num_classes):
        for i in range(m):
            for k in range(d):
                acc = 0.0
                for s in range(n):
                    if int(labels[s]) == j + 1:
                        acc += float(center[s, i, k])
                M[i, j, k] = acc / counts[j]
    return M


def _naive_pair_spread(get, outer: int, inner: int, d: int) -> Tuple[List[float], List[float]]:
    U, V = [], []
    for k in range(d):
        u = 0.0
        for o in range(outer):
            for p in range(inner):
                for q in range(inner):
                    if q != p:
                        u += get(o, p, k) * get(o, q, k)
        v = 0.0
        for o in range(outer):
            s = 0.0
            for q in range(inner):
                s += get(o, q, k)
            mean = s / inner
            for p in range(inner):
                dev = get(o, p, k) - mean
                v += dev * dev
        U.append(u / (outer * inner * inner))
        V.append(v / (outer * inner))
    return U, V


def naive_scores(M: np.ndarray, alpha: float, beta: float) -> Tuple[np.ndarray, np.ndarray]:
    """(tau_class, tau_t) evaluated term by term from the printed sums."""
    M = np.asarray(M, dtype=np.float64)
    m, C, d = M.shape
    Uc, Vc = _naive_pair_spread(lambda i, p, k: float(M[i, p, k]), m, C, d)
    Ut, Vt = _naive_pair_spread(lambda i, p, k: float(M[p, i, k]), C, m, d)
    tau_class = np.array([-alpha * Uc[k] + (1 - alpha) * Vc[k] for k in range(d)])
    tau_t = np.array([-beta * Ut[k] + (1 - beta) * Vt[k] for k in range(d)])
    return tau_class, tau_t


def naive_topk(tau: Sequence[float], K: int) -> List[int]:
    """Repeatedly take the largest remaining score, lowest id first on ties."""
    remaining = list(range(len(tau)))
    kept = []
    for _ in range(K):
        best = remaining[0]
        for k in remaining[1:]:
            if tau[k] > tau[best]:
                best = k
        kept.append(best)
        remaining.remove(best)
    return sorted(kept)


def naive_gather(center: np.ndarray, kept: Sequence[int]) -> np.ndarray:
    n, m, _ = center.shape
    out = np.empty((n, m, len(kept)), dtype=center.dtype)
    for s in range(n):
        for i in range(m):
            for c, k in enumerate(kept):
                out[s, i, c] = center[s, i, k]
    return out


# --------------------------------------------------------------------------- linear algebra / calculus


def naive_matmul(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    A = np.asarray(A, dtype=np.float64)
    B = np.asarray(B, dtype=np.float64)
    n, r = A.shape
    r2, c = B.shape
    if r != r2:
        raise ValueError("inner dimensions differ")
    out = np.zeros((n, c))
    for i in range(n):
        for j in range(c):
            acc = 0.0
            for k in range(r):
                acc += A[i, k] * B[k, j]
            out[i, j] = acc
    return out


def fd_grad(f: Callable[[np.ndarray], float], params: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar function of a flat parameter vector."""
    p = np.array(params, dtype=np.float64).ravel()
    g = np.empty_like(p)
    for k in range(p.size):
        orig = p[k]
        p[k] = orig + eps
        hi = float(f(p.copy()))
        p[k] = orig - eps
        lo = float(f(p.copy()))
        p[k] = orig
        g[k] = (hi - lo) / (2 * eps)
    return g.reshape(np.shape(params))


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    """Norm-wise relative difference, guarded against a zero reference."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    num = math.sqrt(sum((x - y) ** 2 for x, y in zip(a, b)))
    den = max(math.sqrt(sum(y * y for y in b)), math.sqrt(sum(x * x for x in a)), 1e-300)
    return num / den


# --------------------------------------------------------------------------- diffusion references


def cosine_alpha_bar(t: int, T: int, s: float = 0.008) -> float:
    """Closed-form cumulative signal level f(t)/f(0) of the cosine schedule."""
    f = lambda u: math.cos((u / T + s) / (1 + s) * math.pi / 2) ** 2
    return f(t) / f(0)


def forward_moments(x0: np.ndarray, alpha_bar_t: float) -> Tuple[np.ndarray, float]:
    """Mean and per-element variance of x_t given x0."""
    return math.sqrt(alpha_bar_t) * np.asarray(x0, dtype=np.float64), 1.0 - alpha_bar_t


def monte_carlo_moments(sampler: Callable[[np.ndarray], np.ndarray], shape, draws: int,
                        rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
    """Sample mean and unbiased variance of sampler(eps) over ``draws`` standard-normal eps."""
    total = np.zeros(shape)
    total_sq = np.zeros(shape)
    for _ in range(draws):
        x = np.asarray(sampler(rng.standard_normal(shape)), dtype=np.float64)
        total += x
        total_sq += x * x
    mean = total / draws
    var = (total_sq - draws * mean * mean) / (draws - 1)
    return mean, var


# --------------------------------------------------------------------------- metrics


def naive_metrics(preds: Sequence[int], truth: Sequence[int], num_classes: int) -> dict:
    """OA, AA and kappa by explicit counting."""
    cm = [[0] * num_classes for _ in range(num_classes)]
    for p, t in zip(preds, truth):
        cm[int(t) - 1][int(p) - 1] += 1
    total = sum(sum(r) for r in cm)
    correct = sum(cm[j][j] for j in range(num_classes))
    rows = [sum(cm[j]) for j in range(num_classes)]
    cols = [sum(cm[i][j] for i in range(num_classes)) for j in range(num_classes)]
    per = [cm[j][j] / rows[j] for j in range(num_classes) if rows[j]]
    oa = correct / total
    pe = sum(rows[j] * cols[j] for j in range(num_classes)) / (total * total)
    return {"oa": oa, "aa": sum(per) / len(per), "kappa": None if pe == 1 else (oa - pe) / (1 - pe), "cm": cm}


# --------------------------------------------------------------------------- synthetic scenes


@dataclass(frozen=True)
class SyntheticScene:
    cube: HsiCube
    labels: LabelRaster
    means: np.ndarray  # (C, N)
    covariances: np.ndarray  # (C, N, N)
    layout: str
    separability: float
    seed: int
    nearest_mean_oa: float


def _layout(size: int, C: int, layout: str, cell: int, rng: np.random.Generator) -> np.ndarray:
    cells = -(-size // cell)
    if layout == "blocks":
        n = cells * cells
        assign = np.arange(n) % C
        rng.shuffle(assign)
        grid = assign.reshape(cells, cells) + 1
    elif layout == "checkerboard":
        r, c = np.meshgrid(np.arange(cells), np.arange(cells), indexing="ij")
        grid = (r + c) % C + 1
    else:
        raise ValueError(f"layout must be one of {LAYOUTS}")
    return np.kron(grid, np.ones((cell, cell), dtype=np.int64))[:size, :size].astype(np.uint16)


def nearest_mean_oa(cube: np.ndarray, labels: np.ndarray, num_classes: int) -> float:
    """Fit class means on even-indexed labeled pixels, score the odd-indexed ones."""
    X = np.asarray(cube, dtype=np.float64).reshape(-1, cube.shape[-1])
    y = np.asarray(labels).ravel().astype(np.int64)
    idx = np.flatnonzero(y > 0)
    fit, test = idx[0::2], idx[1::2]
    means = []
    for j in range(1, num_classes + 1):
        rows = fit[y[fit] == j]
        means.append(X[rows].mean(axis=0) if rows.size else np.full(X.shape[1], np.inf))
    correct = 0
    for s in test:
        best, best_d = 0, math.inf
        for j, mu in enumerate(means):
            dist = float(((X[s] - mu) ** 2).sum())
            if dist < best_d:
                best, best_d = j + 1, dist
        correct += best == y[s]
    return correct / len(test)


def make_scene(seed: int, size: int = 64, C: int = 4, separability: float = 6.0, bands: int = 16,
               layout: str = "blocks", cell: int = 8, noise: float = 0.05) -> SyntheticScene:
    """Blocky scene whose class spectra are Gaussian bumps on a smooth baseline.

    Bump amplitudes are scaled so the closest pair of class means sits exactly
    ``separability * noise`` apart; pixel noise is isotropic with std ``noise``.
    """
    if separability < 0:
        raise ValueError("separability must be >= 0")
    if C < 1 or size < 1 or bands < 1:
        raise ValueError("size, C and bands must be positive")
    rng = np.random.default_rng(seed)
    labels = _layout(size, C, layout, cell, rng)
    b = np.arange(bands, dtype=np.float64)
    baseline = 0.3 + 0.1 * np.sin(b / max(bands - 1, 1) * math.pi)
    centers = (np.arange(C) + 0.5) * bands / C + rng.uniform(-0.25, 0.25, C)
    width = max(bands / (2.0 * C), 1.0)
    bumps = np.exp(-((b[None, :] - centers[:, None]) ** 2) / (2 * width**2))
    if C > 1:
        gaps = [np.linalg.norm(bumps[i] - bumps[j]) for i in range(C) for j in range(i + 1, C)]
        amp = separability * noise / min(gaps)
    else:
        amp = 0.0
    means = baseline[None, :] + amp * bumps
    cov = np.stack([noise**2 * np.eye(bands)] * C)
    data = means[labels.astype(np.int64) - 1] + noise * rng.standard_normal((size, size, bands))
    cube = HsiCube(data.astype(np.float32))
    raster = LabelRaster(labels, C)
    return SyntheticScene(cube, raster, means, cov, layout, float(separability), seed,
                          nearest_mean_oa(cube.data, labels, C))
