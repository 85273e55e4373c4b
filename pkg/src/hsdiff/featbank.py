"""Multi-timestep, multi-stage feature extraction into center and global banks."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from . import artifacts
from .diffusion import NoiseSchedule, q_sample
from .hsio import Patch
from .unet import UNet

NOISE_POLICIES = ("shared", "per_sample")


@dataclass(frozen=True)
class TimestepGrid:
    T: int
    t_values: tuple

    @property
    def m(self) -> int:
        return len(self.t_values)

    def to_dict(self) -> dict:
        return {"T": self.T, "t_values": list(self.t_values)}

    @classmethod
    def from_dict(cls, d: dict) -> "TimestepGrid":
        return cls(int(d["T"]), tuple(int(t) for t in d["t_values"]))


def make_grid(T: int, m: int) -> TimestepGrid:
    """m interior steps t_i = round(i * T / (m + 1)), i = 1..m (halves round up)."""
    if not 1 <= m <= T - 1:
        raise ValueError(f"m={m} must lie in [1, {T - 1}]")
    # integer form of floor(i*T/(m+1) + 1/2)
    ts = tuple((2 * i * T + m + 1) // (2 * (m + 1)) for i in range(1, m + 1))
    return TimestepGrid(T, ts)


@dataclass
class FeatureBanks:
    sample_ids: np.ndarray  # (n,)
    center: np.ndarray  # (n, m, d) float32
    global_: np.ndarray  # (n, m, d) float32
    grid: TimestepGrid
    noise_seed: int
    labels: Optional[np.ndarray] = None  # (n,), class ids when known

    @property
    def d(self) -> int:
        return self.center.shape[2]

    def subset(self, ids: Sequence[int]) -> "FeatureBanks":
        pos = {int(s): k for k, s in enumerate(self.sample_ids)}
        try:
            rows = np.array([pos[int(i)] for i in ids], dtype=np.int64)
        except KeyError as exc:
            raise KeyError(f"sample id {exc.args[0]} not in bank") from None
        return FeatureBanks(
            self.sample_ids[rows],
            self.center[rows],
            self.global_[rows],
            self.grid,
            self.noise_seed,
            None if self.labels is None else self.labels[rows],
        )


def center_of(f: np.ndarray) -> np.ndarray:
    """Feature vector at pixel (H//2, H//2) of an (H, H, d) map."""
    H = f.shape[0]
    return f[H // 2, H // 2, :]


def global_of(f: np.ndarray) -> np.ndarray:
    """Spatial mean of an (H, H, d) map, accumulated in 64-bit."""
    return f.mean(axis=(0, 1), dtype=np.float64)


def _feature_maps(model: UNet, x_t: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
    """(B, D, H, W) noisy input -> (B, d, H, W) upsampled, deepest-first concatenation."""
    _, taps = model(x_t, t, return_taps=True)
    H = x_t.shape[-1]
    maps = [a if a.shape[-1] == H else F.interpolate(a, size=(H, H), mode="bilinear", align_corners=False) for a in taps]
    return torch.cat(maps, dim=1)


def extract_feature(model: UNet, patch, t: int, eps: np.ndarray, schedule: NoiseSchedule) -> np.ndarray:
    """f_t (H, H, d) for one patch noised to step ``t`` with noise ``eps``."""
    data = patch.data if isinstance(patch, Patch) else np.asarray(patch)
    x_t = q_sample(data, t, eps, schedule)
    x = torch.as_tensor(x_t, dtype=model.conv_in.weight.dtype).permute(2, 0, 1)[None]
    model.eval()
    with torch.no_grad():
        f = _feature_maps(model, x, torch.tensor([t]))
    return f[0].permute(1, 2, 0).numpy()


def timestep_noise(seed: int, index: int, shape, sample_id: Optional[int] = None) -> np.ndarray:
    # the marker entry keeps sample 0 distinct: seed sequences ignore trailing zeros
    key = [seed, index] if sample_id is None else [seed, index, 1, int(sample_id)]
    return np.random.default_rng(key).standard_normal(shape).astype(np.float32)


def build_banks(
    model: UNet,
    patches,
    grid: TimestepGrid,
    seed: int,
    schedule: NoiseSchedule,
    sample_ids: Optional[Sequence[int]] = None,
    labels: Optional[Sequence[int]] = None,
    batch_size: int = 64,
    noise_policy: str = "shared",
) -> FeatureBanks:
    """Center and global banks for every patch at every grid step.

    ``patches`` is a Patch sequence or an ``(n, H, H, D)`` array. Under the default
    ``shared`` policy each grid step uses one noise draw (from ``seed``) for all
    samples; ``per_sample`` draws per (step, sample id).
    """
    if noise_policy not in NOISE_POLICIES:
        raise ValueError(f"noise_policy must be one of {NOISE_POLICIES}")
    if isinstance(patches, np.ndarray):
        data = patches
    else:
        patches = list(patches)
        data = np.stack([p.data for p in patches]) if patches else np.zeros((0,) + (model.config.image_size,) * 2 + (model.config.in_channels,), np.float32)
        if labels is None and patches and all(p.label is not None for p in patches):
            labels = [p.label for p in patches]
    cfg = model.config
    if data.ndim != 4 or data.shape[1:] != (cfg.image_size, cfg.image_size, cfg.in_channels):
        raise ValueError(f"patch shape {data.shape[1:]} does not match model ({cfg.image_size}, {cfg.image_size}, {cfg.in_channels})")
    if grid.T != schedule.T:
        raise ValueError(f"grid T={grid.T} differs from schedule T={schedule.T}")
    n, H = data.shape[0], cfg.image_size
    ids = np.arange(n, dtype=np.int64) if sample_ids is None else np.asarray(sample_ids, dtype=np.int64)
    d = cfg.feature_dim
    center = np.empty((n, grid.m, d), dtype=np.float32)
    glob = np.empty((n, grid.m, d), dtype=np.float32)
    dtype = model.conv_in.weight.dtype
    model.eval()
    for i, t in enumerate(grid.t_values):
        shared = timestep_noise(seed, i, data.shape[1:]) if noise_policy == "shared" else None
        for lo in range(0, n, batch_size):
            hi = min(n, lo + batch_size)
            x0 = torch.from_numpy(np.ascontiguousarray(data[lo:hi])).to(dtype).permute(0, 3, 1, 2)
            if shared is not None:
                eps = torch.from_numpy(shared).to(dtype).permute(2, 0, 1).expand_as(x0)
            else:
                eps = torch.from_numpy(np.stack([timestep_noise(seed, i, data.shape[1:], s) for s in ids[lo:hi]])).to(dtype).permute(0, 3, 1, 2)
            tt = torch.full((hi - lo,), t, dtype=torch.long)
            with torch.no_grad():
                f = _feature_maps(model, q_sample(x0, tt, eps, schedule), tt)
            center[lo:hi, i] = f[:, :, H // 2, H // 2].numpy()
            glob[lo:hi, i] = f.double().mean(dim=(2, 3)).numpy()
    lab = None if labels is None else np.asarray(labels, dtype=np.int64)
    return FeatureBanks(ids, center, glob, grid, seed, lab)


def save_banks(banks: FeatureBanks, directory, extra: Optional[dict] = None) -> Path:
    directory = Path(directory)
    with artifacts.atomic_dir(directory) as tmp:
        manifest = {
            "sample_ids": banks.sample_ids.tolist(),
            "labels": None if banks.labels is None else banks.labels.tolist(),
            "grid": banks.grid.to_dict(),
            "d": banks.d,
            "seed": banks.noise_seed,
            "center": artifacts.write_blob(tmp / "center.bin", banks.center, "f32"),
            "global": artifacts.write_blob(tmp / "global.bin", banks.global_, "f32"),
        }
        manifest.update(extra or {})
        artifacts.write_json(tmp / artifacts.MANIFEST, manifest)
    return directory


def load_banks(directory) -> FeatureBanks:
    directory = Path(directory)
    man = artifacts.read_json(directory / artifacts.MANIFEST)
    c, g = man["center"], man["global"]
    return FeatureBanks(
        np.asarray(man["sample_ids"], dtype=np.int64),
        artifacts.read_blob(directory / c["file"], c["dtype"], c["shape"]),
        artifacts.read_blob(directory / g["file"], g["dtype"], g["shape"]),
        TimestepGrid.from_dict(man["grid"]),
        int(man["seed"]),
        None if man.get("labels") is None else np.asarray(man["labels"], dtype=np.int64),
    )
