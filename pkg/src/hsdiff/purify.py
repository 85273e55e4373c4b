"""Class- and timestep-oriented channel purification of the center bank."""

from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional, Sequence, Tuple

import numpy as np

from . import artifacts

# products held in memory at once while scoring
_CHUNK_ELEMS = 1 << 22


@dataclass(frozen=True)
class RepresentativeMatrix:
    M: np.ndarray  # (m, C, d) float64
    class_counts: tuple


@dataclass
class PurifyConfig:
    alpha: float = 0.5
    beta: float = 0.5
    K: Optional[int] = None  # None -> min(d, 256)
    normalize_features: bool = False

    def validate(self, d: Optional[int] = None) -> None:
        if not 0 < self.alpha < 1:
            raise ValueError(f"alpha must lie in (0, 1), got {self.alpha}")
        if not 0 < self.beta < 1:
            raise ValueError(f"beta must lie in (0, 1), got {self.beta}")
        if d is not None and self.K is not None and not 1 <= self.K <= d:
            raise ValueError(f"K={self.K} must lie in [1, {d}]")

    def resolve_K(self, d: int) -> int:
        return min(d, 256) if self.K is None else int(self.K)


@dataclass(frozen=True)
class PurificationIndex:
    kept: tuple
    tau: np.ndarray
    tau_class: np.ndarray
    tau_t: np.ndarray

    @property
    def d(self) -> int:
        return len(self.tau)

    @property
    def K(self) -> int:
        return len(self.kept)

    def to_dict(self) -> dict:
        return {
            "kept": [int(k) for k in self.kept],
            "tau": [float(x) for x in self.tau],
            "tau_class": [float(x) for x in self.tau_class],
            "tau_t": [float(x) for x in self.tau_t],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PurificationIndex":
        return cls(
            tuple(int(k) for k in d["kept"]),
            np.asarray(d["tau"], dtype=np.float64),
            np.asarray(d["tau_class"], dtype=np.float64),
            np.asarray(d["tau_t"], dtype=np.float64),
        )

    def digest(self) -> str:
        return hashlib.sha256(artifacts.dumps(self.to_dict()).encode()).hexdigest()


def rep_matrix(center: np.ndarray, labels: Sequence[int], num_classes: int) -> RepresentativeMatrix:
    """Class-averaged center bank, M[i, j, :] over samples of class j + 1."""
    center = np.asarray(center)
    labels = np.asarray(labels)
    if center.ndim != 3 or len(labels) != center.shape[0]:
        raise ValueError("center bank must be (samples, m, d) with one label per sample")
    n, m, d = center.shape
    M = np.empty((m, num_classes, d), dtype=np.float64)
    counts = []
    for j in range(num_classes):
        rows = center[labels == j + 1]
        if rows.shape[0] == 0:
            raise ValueError(f"class {j + 1} has no samples in the bank")
        M[:, j, :] = rows.astype(np.float64).mean(axis=0)
        counts.append(int(rows.shape[0]))
    if not np.all(np.isfinite(M)):
        raise FloatingPointError("representative matrix is not finite")
    return RepresentativeMatrix(M, tuple(counts))


def _l2_rows(M: np.ndarray) -> np.ndarray:
    norm = np.sqrt((M * M).sum(axis=-1, keepdims=True))
    return M / np.where(norm == 0, 1.0, norm)


def _ordered_sum(terms: np.ndarray) -> np.ndarray:
    # strict left-to-right accumulation over axis 0; matches a scalar loop bit for bit
    if terms.shape[0] == 0:
        return np.zeros(terms.shape[1:])
    return np.cumsum(terms, axis=0)[-1]


def _pair_and_spread(A: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """For A of shape (outer, inner, d) return per channel

    U = sum_o sum_p sum_{q != p} A[o,p]*A[o,q] / (outer * inner^2)
    V = sum_o sum_p (A[o,p] - mean_q A[o,q])^2 / (outer * inner)
    """
    outer, inner, d = A.shape
    o_idx, p_idx, q_idx = [], [], []
    for o in range(outer):
        for p in range(inner):
            for q in range(inner):
                if q != p:
                    o_idx.append(o)
                    p_idx.append(p)
                    q_idx.append(q)
    o_idx, p_idx, q_idx = map(np.asarray, (o_idx, p_idx, q_idx))
    U = np.empty(d)
    V = np.empty(d)
    step = max(1, _CHUNK_ELEMS // max(1, len(o_idx)))
    for lo in range(0, d, step):
        a = A[:, :, lo : lo + step]
        prods = a[o_idx, p_idx] * a[o_idx, q_idx]
        U[lo : lo + step] = _ordered_sum(prods) / (outer * inner * inner)
        means = np.cumsum(a, axis=1)[:, -1, :] / inner
        dev = a - means[:, None, :]
        V[lo : lo + step] = _ordered_sum((dev * dev).reshape(outer * inner, -1)) / (outer * inner)
    return U, V


def class_score(M: np.ndarray, alpha: float, normalize_features: bool = False) -> np.ndarray:
    """tau_class = -alpha * U_class + (1 - alpha) * V_class, per channel."""
    M = np.asarray(M, dtype=np.float64)
    if M.shape[1] < 2:
        raise ValueError("class score needs at least 2 classes")
    if normalize_features:
        M = _l2_rows(M)
    U, V = _pair_and_spread(M)
    return -alpha * U + (1 - alpha) * V


def timestep_score(M: np.ndarray, beta: float, normalize_features: bool = False) -> np.ndarray:
    """tau_t = -beta * U_t + (1 - beta) * V_t; same sums with timesteps and classes swapped."""
    M = np.asarray(M, dtype=np.float64)
    if M.shape[0] < 2:
        raise ValueError("timestep score needs at least 2 timesteps")
    if normalize_features:
        M = _l2_rows(M)
    U, V = _pair_and_spread(M.transpose(1, 0, 2))
    return -beta * U + (1 - beta) * V


def select_topk(tau_class: np.ndarray, tau_t: np.ndarray, K: int) -> PurificationIndex:
    tau_class = np.asarray(tau_class, dtype=np.float64)
    tau_t = np.asarray(tau_t, dtype=np.float64)
    tau = tau_class + tau_t
    if not 1 <= K <= tau.size:
        raise ValueError(f"K={K} must lie in [1, {tau.size}]")
    order = np.argsort(-tau, kind="stable")  # ties -> ascending channel id
    kept = tuple(int(k) for k in np.sort(order[:K]))
    return PurificationIndex(kept, tau, tau_class, tau_t)


def apply_purification(center: np.ndarray, index: PurificationIndex) -> np.ndarray:
    """Gather the kept channels of a (samples, m, d) center bank."""
    center = np.asarray(center)
    if center.shape[-1] != index.d:
        raise ValueError(f"bank has d={center.shape[-1]}, index was built for d={index.d}")
    return center[..., list(index.kept)]


def purify(center: np.ndarray, labels: Sequence[int], num_classes: int, config: PurifyConfig):
    """Representative matrix, both scores and the top-K index in one call."""
    d = np.asarray(center).shape[-1]
    config.validate(d)
    rep = rep_matrix(center, labels, num_classes)
    tc = class_score(rep.M, config.alpha, config.normalize_features)
    tt = timestep_score(rep.M, config.beta, config.normalize_features)
    return rep, select_topk(tc, tt, config.resolve_K(d))


def save_index(index: PurificationIndex, path, config: PurifyConfig, extra: Optional[dict] = None) -> Path:
    doc = index.to_dict()
    doc["config"] = asdict(config)
    doc["d"] = index.d
    doc.update(extra or {})
    artifacts.write_json(path, doc)
    return Path(path)


def load_index(path) -> PurificationIndex:
    return PurificationIndex.from_dict(artifacts.read_json(path))
