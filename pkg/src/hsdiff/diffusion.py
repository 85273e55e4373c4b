"""Cosine noise schedule, forward noising, hybrid loss and the pretraining loop."""

from __future__ import annotations

import logging
import math
import shutil
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np
import torch
import torch.nn as nn

from . import artifacts
from .unet import UNet, UNetConfig, build

log = logging.getLogger(__name__)

LOSS_MODES = ("hybrid", "vlb", "simple")


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-step tables; index ``t - 1`` holds step ``t`` (steps are 1-based)."""

    T: int
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray
    s: float = 0.008
    max_beta: float = 0.999

    @property
    def alpha_bar_prev(self) -> np.ndarray:
        return np.append(1.0, self.alpha_bar[:-1])

    @property
    def posterior_variance(self) -> np.ndarray:
        return self.beta * (1.0 - self.alpha_bar_prev) / (1.0 - self.alpha_bar)

    @property
    def posterior_log_variance_clipped(self) -> np.ndarray:
        # step 1 has zero posterior variance; borrow step 2's
        pv = self.posterior_variance
        return np.log(np.append(pv[1], pv[1:]))

    @property
    def posterior_mean_coef1(self) -> np.ndarray:
        return self.beta * np.sqrt(self.alpha_bar_prev) / (1.0 - self.alpha_bar)

    @property
    def posterior_mean_coef2(self) -> np.ndarray:
        return (1.0 - self.alpha_bar_prev) * np.sqrt(self.alpha) / (1.0 - self.alpha_bar)

    def to_dict(self) -> dict:
        return {"kind": "cosine", "T": self.T, "s": self.s, "max_beta": self.max_beta}


def cosine_f(t, T: int, s: float = 0.008):
    return np.cos(((np.asarray(t, dtype=np.float64) / T + s) / (1 + s)) * math.pi / 2) ** 2


def build_cosine_schedule(T: int, s: float = 0.008, max_beta: float = 0.999) -> NoiseSchedule:
    if T < 2:
        raise ValueError(f"T must be >= 2, got {T}")
    f = cosine_f(np.arange(T + 1), T, s)
    ab = f / f[0]
    beta = np.minimum(1.0 - ab[1:] / ab[:-1], max_beta)
    alpha = 1.0 - beta
    return NoiseSchedule(T, beta, alpha, np.cumprod(alpha), s, max_beta)


def schedule_from_dict(d: dict) -> NoiseSchedule:
    if d.get("kind", "cosine") != "cosine":
        raise ValueError(f"unknown schedule kind {d['kind']!r}")
    return build_cosine_schedule(int(d["T"]), float(d.get("s", 0.008)), float(d.get("max_beta", 0.999)))


def _gather(table: np.ndarray, t: torch.Tensor, like: torch.Tensor) -> torch.Tensor:
    vals = torch.as_tensor(table, dtype=like.dtype)[t.long() - 1]
    return vals.reshape(-1, *([1] * (like.ndim - 1)))


def _check_t(t, T: int) -> None:
    tt = np.asarray(t.cpu() if isinstance(t, torch.Tensor) else t)
    if tt.size == 0 or tt.min() < 1 or tt.max() > T:
        raise ValueError(f"timestep(s) must lie in [1, {T}]")


def q_sample(x0, t, eps, schedule: NoiseSchedule):
    """sqrt(abar_t) * x0 + sqrt(1 - abar_t) * eps.

    numpy input with a scalar ``t`` returns numpy; torch input takes a per-sample
    ``t`` of shape ``(B,)`` (or a scalar).
    """
    if tuple(np.shape(x0)) != tuple(np.shape(eps)):
        raise ValueError(f"x0 shape {np.shape(x0)} != eps shape {np.shape(eps)}")
    _check_t(t, schedule.T)
    if isinstance(x0, torch.Tensor):
        t = torch.as_tensor(t).reshape(-1)
        if t.numel() == 1:
            t = t.expand(x0.shape[0])
        return _gather(np.sqrt(schedule.alpha_bar), t, x0) * x0 + _gather(np.sqrt(1.0 - schedule.alpha_bar), t, x0) * eps
    ab = schedule.alpha_bar[int(t) - 1]
    x0 = np.asarray(x0)
    return (np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * np.asarray(eps)).astype(np.result_type(x0, np.float32))


def normal_kl(mean1, logvar1, mean2, logvar2):
    """KL(N(mean1, e^logvar1) || N(mean2, e^logvar2)), elementwise."""
    return 0.5 * (-1.0 + logvar2 - logvar1 + torch.exp(logvar1 - logvar2) + (mean1 - mean2) ** 2 * torch.exp(-logvar2))


def model_mean_from_eps(x_t, t, eps, schedule: NoiseSchedule):
    """mu = (x_t - beta_t / sqrt(1 - abar_t) * eps) / sqrt(alpha_t)."""
    coef = _gather(schedule.beta / np.sqrt(1.0 - schedule.alpha_bar), t, x_t)
    return (x_t - coef * eps) / _gather(np.sqrt(schedule.alpha), t, x_t)


def model_log_variance(v, t, schedule: NoiseSchedule):
    """Interpolate (per element) between log beta_t and the clipped posterior log-variance."""
    frac = (v + 1.0) / 2.0
    max_log = _gather(np.log(schedule.beta), t, v)
    min_log = _gather(schedule.posterior_log_variance_clipped, t, v)
    return frac * max_log + (1.0 - frac) * min_log


@dataclass
class DiffusionLossReport:
    simple_term: torch.Tensor
    vlb_term: torch.Tensor
    total: torch.Tensor

    def as_floats(self) -> Tuple[float, float, float]:
        return tuple(float(x.detach()) for x in (self.simple_term, self.vlb_term, self.total))


def training_loss(
    model: nn.Module,
    x0: torch.Tensor,
    schedule: NoiseSchedule,
    generator: Optional[torch.Generator] = None,
    *,
    t: Optional[torch.Tensor] = None,
    noise: Optional[torch.Tensor] = None,
    lambda_vlb: float = 0.001,
    loss_mode: str = "hybrid",
) -> DiffusionLossReport:
    """Noise-prediction MSE plus the learned-variance variational bound.

    ``x0`` is ``(B, D, H, W)``; the model returns ``(B, 2D, H, W)`` (noise, variance
    interpolation). ``vlb_term`` is ``T`` times the mean per-element KL in bits,
    i.e. a one-sample estimate of the bound summed over steps. In ``hybrid`` mode
    the mean prediction is detached inside the KL so only the variance head learns
    from it and ``total = simple + lambda_vlb * vlb``; ``vlb`` trains on the bound
    alone and ``simple`` on the MSE alone.
    """
    if loss_mode not in LOSS_MODES:
        raise ValueError(f"loss_mode must be one of {LOSS_MODES}")
    B, D = x0.shape[:2]
    if t is None:
        t = torch.randint(1, schedule.T + 1, (B,), generator=generator)
    if noise is None:
        noise = torch.randn(x0.shape, generator=generator, dtype=x0.dtype)
    t = torch.as_tensor(t).long()
    x_t = q_sample(x0, t, noise, schedule)
    out = model(x_t, t)
    eps, v = out[:, :D], out[:, D:]

    simple = torch.mean((noise - eps) ** 2)

    eps_for_mean = eps.detach() if loss_mode == "hybrid" else eps
    mean = model_mean_from_eps(x_t, t, eps_for_mean, schedule)
    logvar = model_log_variance(v, t, schedule)
    true_mean = _gather(schedule.posterior_mean_coef1, t, x0) * x0 + _gather(schedule.posterior_mean_coef2, t, x0) * x_t
    true_logvar = _gather(schedule.posterior_log_variance_clipped, t, x0)
    kl = normal_kl(true_mean, true_logvar.expand_as(x0), mean, logvar)
    vlb = schedule.T * kl.mean() / math.log(2.0)

    if loss_mode == "hybrid":
        total = simple + lambda_vlb * vlb
    elif loss_mode == "vlb":
        total = vlb
    else:
        total = simple
    if not torch.isfinite(total):
        raise FloatingPointError(
            f"non-finite diffusion loss: simple={float(simple)}, vlb={float(vlb)}, t={t.tolist()}"
        )
    return DiffusionLossReport(simple, vlb, total)


# --------------------------------------------------------------------------- pretraining


@dataclass
class PretrainConfig:
    total_steps: int = 40_000
    batch_size: int = 128
    learning_rate: float = 1e-4
    T: int = 1000
    lambda_vlb: float = 0.001
    seed: int = 0
    ema_rate: Optional[float] = None
    loss_mode: str = "hybrid"
    keep_checkpoints: int = 3

    def validate(self) -> None:
        if self.total_steps < 1:
            raise ValueError("total_steps must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.loss_mode not in LOSS_MODES:
            raise ValueError(f"loss_mode must be one of {LOSS_MODES}")

    @property
    def checkpoint_every(self) -> int:
        return max(100, self.total_steps // 20)


class RandomPatchSource:
    """Uniform random H x H crops from a normalized, mirror-padded cube."""

    def __init__(self, data: np.ndarray, H: int):
        from .hsio import pad_cube

        self.shape = data.shape[:2]
        self.H = H
        self.padded = pad_cube(data, H)
        self.channels = data.shape[2]

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        from .hsio import crop, random_centers

        rows, cols = random_centers(self.shape, n, rng)
        return crop(self.padded, rows, cols, self.H)


def _step_rng(seed: int, step: int) -> Tuple[np.random.Generator, torch.Generator]:
    rng = np.random.default_rng([seed, step])
    gen = torch.Generator().manual_seed(int(rng.integers(0, 2**63 - 1)))
    return rng, gen


def _ckpt_name(step: int) -> str:
    return f"step_{step:07d}"


def save_checkpoint(
    directory: Path,
    model: UNet,
    schedule: NoiseSchedule,
    step: int,
    config: PretrainConfig,
    curve: Dict[str, List[float]],
    optimizer: Optional[torch.optim.Optimizer] = None,
    ema: Optional[Dict[str, torch.Tensor]] = None,
    extra: Optional[dict] = None,
) -> Path:
    final = Path(directory) / _ckpt_name(step)
    with artifacts.atomic_dir(final) as tmp:
        params = {k: v.detach().cpu().numpy() for k, v in model.state_dict().items()}
        manifest = {
            "model_config": model.config.to_dict(),
            "schedule": schedule.to_dict(),
            "step": step,
            "seed": config.seed,
            "pretrain_config": asdict(config),
            "loss_curve": curve,
            "tensors": artifacts.save_tensors(tmp / "params", params, tag="f32"),
        }
        if optimizer is not None:
            state = {}
            names = dict(model.named_parameters())
            for name, p in names.items():
                s = optimizer.state.get(p)
                if s:
                    state[name + ".exp_avg"] = s["exp_avg"].numpy()
                    state[name + ".exp_avg_sq"] = s["exp_avg_sq"].numpy()
            manifest["optimizer"] = {
                "tensors": artifacts.save_tensors(tmp / "optim", state, tag="f32"),
                "step": step,
            }
        if ema is not None:
            manifest["ema"] = artifacts.save_tensors(tmp / "ema", {k: v.numpy() for k, v in ema.items()}, tag="f32")
        if extra:
            manifest.update(extra)
        artifacts.write_json(tmp / artifacts.MANIFEST, manifest)
    return final


def latest_checkpoint(directory) -> Optional[Path]:
    cands = sorted(p for p in Path(directory).glob("step_*") if (p / artifacts.MANIFEST).exists())
    return cands[-1] if cands else None


def load_checkpoint(path, use_ema: bool = False) -> Tuple[UNet, NoiseSchedule, dict]:
    path = Path(path)
    manifest = artifacts.read_json(path / artifacts.MANIFEST)
    model = UNet(UNetConfig.from_dict(manifest["model_config"]))
    entries = manifest["ema"] if use_ema and "ema" in manifest else manifest["tensors"]
    sub = "ema" if use_ema and "ema" in manifest else "params"
    arrays = artifacts.load_tensors(path / sub, entries)
    model.load_state_dict({k: torch.from_numpy(np.array(v)) for k, v in arrays.items()})
    model.eval()
    return model, schedule_from_dict(manifest["schedule"]), manifest


def pretrain(
    source: RandomPatchSource,
    model: UNet,
    config: PretrainConfig,
    out_dir,
    extra_manifest: Optional[dict] = None,
    progress: Optional[Callable[[int, float], None]] = None,
) -> Path:
    """Run ``config.total_steps`` Adam steps on random patches; returns the final checkpoint.

    Every step draws its batch, timesteps and noise from ``(seed, step)``, so a run
    resumed from a checkpoint continues exactly as an uninterrupted one.
    """
    config.validate()
    out_dir = Path(out_dir)
    schedule = build_cosine_schedule(config.T)
    opt = torch.optim.Adam(model.parameters(), lr=config.learning_rate)
    curve: Dict[str, List[float]] = {"simple": [], "vlb": [], "total": []}
    start = 0
    ema = None

    prev = latest_checkpoint(out_dir) if out_dir.exists() else None
    if prev is not None:
        manifest = artifacts.read_json(prev / artifacts.MANIFEST)
        if manifest["pretrain_config"] != asdict(config) or manifest["model_config"] != model.config.to_dict():
            raise ValueError(f"existing checkpoint {prev} was written with a different configuration")
        start = int(manifest["step"])
        arrays = artifacts.load_tensors(prev / "params", manifest["tensors"])
        model.load_state_dict({k: torch.from_numpy(np.array(v)) for k, v in arrays.items()})
        curve = {k: list(v) for k, v in manifest["loss_curve"].items()}
        if "optimizer" in manifest:
            st = artifacts.load_tensors(prev / "optim", manifest["optimizer"]["tensors"])
            for name, p in model.named_parameters():
                if name + ".exp_avg" in st:
                    opt.state[p] = {
                        "step": torch.tensor(float(start)),
                        "exp_avg": torch.from_numpy(np.array(st[name + ".exp_avg"])),
                        "exp_avg_sq": torch.from_numpy(np.array(st[name + ".exp_avg_sq"])),
                    }
        if "ema" in manifest:
            ema = {k: torch.from_numpy(np.array(v)) for k, v in artifacts.load_tensors(prev / "ema", manifest["ema"]).items()}
        log.info("resuming pretraining from %s", prev)
    if config.ema_rate is not None and ema is None:
        ema = {k: v.detach().clone() for k, v in model.state_dict().items()}

    extra = dict(extra_manifest or {})
    model.train()
    every = config.checkpoint_every
    last = prev
    for step in range(start, config.total_steps):
        rng, gen = _step_rng(config.seed, step)
        batch = torch.from_numpy(source.sample(rng, config.batch_size)).permute(0, 3, 1, 2).contiguous()
        rep = training_loss(model, batch, schedule, gen, lambda_vlb=config.lambda_vlb, loss_mode=config.loss_mode)
        opt.zero_grad(set_to_none=True)
        rep.total.backward()
        opt.step()
        if ema is not None:
            with torch.no_grad():
                for k, v in model.state_dict().items():
                    if v.dtype.is_floating_point:
                        ema[k].mul_(config.ema_rate).add_(v, alpha=1 - config.ema_rate)
                    else:
                        ema[k].copy_(v)
        s, v, tot = rep.as_floats()
        curve["simple"].append(s)
        curve["vlb"].append(v)
        curve["total"].append(tot)
        if progress is not None:
            progress(step + 1, tot)
        done = step + 1
        if done % every == 0 or done == config.total_steps:
            last = save_checkpoint(out_dir, model, schedule, done, config, curve, opt, ema, extra)
            _prune(out_dir, config.keep_checkpoints)
    model.eval()
    return last


def _prune(directory: Path, keep: int) -> None:
    ckpts = sorted(p for p in directory.glob("step_*") if p.is_dir())
    for p in ckpts[:-keep] if keep > 0 else []:
        shutil.rmtree(p, ignore_errors=True)


@torch.no_grad()
def p_sample_loop(
    model: UNet,
    schedule: NoiseSchedule,
    shape: Tuple[int, ...],
    generator: Optional[torch.Generator] = None,
    clip: float = 1.5,
) -> np.ndarray:
    """Ancestral sampling x_T -> x_0 with learned variances (diagnostic only).

    ``shape`` is ``(H, H, D)`` or ``(B, H, H, D)``; returns channels-last.
    """
    cfg = model.config
    single = len(shape) == 3
    full = (1,) + tuple(shape) if single else tuple(shape)
    if full[1:] != (cfg.image_size, cfg.image_size, cfg.in_channels):
        raise ValueError(f"sample shape {tuple(shape)} does not match model config")
    model.eval()
    dtype = model.conv_in.weight.dtype
    B, D = full[0], cfg.in_channels
    x = torch.randn((B, D, full[1], full[2]), generator=generator, dtype=dtype)
    for step in range(schedule.T, 0, -1):
        t = torch.full((B,), step, dtype=torch.long)
        out = model(x, t)
        eps, v = out[:, :D], out[:, D:]
        mean = model_mean_from_eps(x, t, eps, schedule)
        if step > 1:
            logvar = model_log_variance(v, t, schedule)
            x = mean + torch.exp(0.5 * logvar) * torch.randn(x.shape, generator=generator, dtype=dtype)
        else:
            x = mean
    out = x.clamp(-clip, clip).permute(0, 2, 3, 1).numpy()
    return out[0] if single else out
