"""Global-feature-guided selective timestep fusion and the classifier ensemble."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import artifacts

log = logging.getLogger(__name__)

MODES = ("selective", "selective_noguide", "average", "manual")


def sum_timesteps(c: torch.Tensor) -> torch.Tensor:
    """(B, m, K) -> (B, K): elementwise sum over timesteps."""
    return c.sum(dim=1)


def timestep_softmax(logits: torch.Tensor) -> torch.Tensor:
    """Softmax over the timestep axis (dim 1), independently per channel."""
    shifted = logits - logits.max(dim=1, keepdim=True).values
    e = torch.exp(shifted)
    return e / e.sum(dim=1, keepdim=True)


def fuse(c: torch.Tensor, weights: torch.Tensor) -> torch.Tensor:
    """r_s[c] = sum_i w_i[c] * c'_i[c]."""
    if c.shape != weights.shape:
        raise ValueError(f"features {tuple(c.shape)} and weights {tuple(weights.shape)} differ")
    return (weights * c).sum(dim=1)


def uniform_weights(c: torch.Tensor) -> torch.Tensor:
    return torch.full_like(c, 1.0 / c.shape[1])


def _linear_init(weight: torch.Tensor, bias: torch.Tensor, fan_in: int) -> None:
    bound = 1.0 / math.sqrt(fan_in)
    nn.init.uniform_(weight, -bound, bound)
    nn.init.uniform_(bias, -bound, bound)


class SelectiveFusion(nn.Module):
    """Compact feature z from the summed bank, per-timestep logits from [F_i(z), g_i], softmax over t."""

    def __init__(self, m: int, K: int, d_g: int, guidance: bool = True):
        super().__init__()
        self.m, self.K, self.d_g, self.guidance = m, K, d_g, guidance
        self.K_r = K_r = max(1, K // 2)
        self.W2 = nn.Linear(K, K_r)
        self.bn = nn.BatchNorm1d(K_r)
        self.W1 = nn.Linear(K_r, K_r)
        self.F_weight = nn.Parameter(torch.empty(m, K, K_r))
        self.F_bias = nn.Parameter(torch.empty(m, K))
        width = K + d_g if guidance else K
        self.W_weight = nn.Parameter(torch.empty(m, K, width))
        self.W_bias = nn.Parameter(torch.empty(m, K))
        for i in range(m):
            _linear_init(self.F_weight.data[i], self.F_bias.data[i], K_r)
            _linear_init(self.W_weight.data[i], self.W_bias.data[i], width)

    def compact(self, c_t: torch.Tensor) -> torch.Tensor:
        return self.W1(F.relu(self.bn(self.W2(c_t))))

    def logits(self, z: torch.Tensor, g: Optional[torch.Tensor]) -> torch.Tensor:
        h = torch.einsum("mkr,br->bmk", self.F_weight, z) + self.F_bias
        if self.guidance:
            if g is None:
                raise ValueError("guided fusion needs the global bank")
            h = torch.cat([h, g], dim=-1)
        return torch.einsum("mko,bmo->bmk", self.W_weight, h) + self.W_bias

    def weights(self, z: torch.Tensor, g: Optional[torch.Tensor]) -> torch.Tensor:
        return timestep_softmax(self.logits(z, g))

    def forward(self, c: torch.Tensor, g: Optional[torch.Tensor] = None) -> torch.Tensor:
        z = self.compact(sum_timesteps(c))
        return fuse(c, self.weights(z, g))


class ClassifierHead(nn.Module):
    def __init__(self, K: int, num_classes: int, hidden: Sequence[int] = (128, 64)):
        super().__init__()
        h1, h2 = hidden
        self.net = nn.Sequential(
            nn.Linear(K, h1), nn.BatchNorm1d(h1), nn.ReLU(),
            nn.Linear(h1, h2), nn.BatchNorm1d(h2), nn.ReLU(),
            nn.Linear(h2, num_classes),
        )

    def forward(self, r: torch.Tensor) -> torch.Tensor:
        return self.net(r)


class FusionClassifier(nn.Module):
    """One ensemble member: a fusion rule feeding a classifier head."""

    def __init__(self, mode: str, m: int, K: int, d_g: int, num_classes: int,
                 hidden: Sequence[int] = (128, 64), timestep: Optional[int] = None,
                 fusion: Optional[SelectiveFusion] = None):
        super().__init__()
        if mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if mode == "manual" and (timestep is None or not 0 <= timestep < m):
            raise ValueError(f"manual mode needs a timestep index in [0, {m})")
        self.mode, self.timestep = mode, timestep
        if mode.startswith("selective"):
            self.fusion = fusion if fusion is not None else SelectiveFusion(m, K, d_g, guidance=(mode == "selective"))
        else:
            self.fusion = None
        self.head = ClassifierHead(K, num_classes, hidden)

    def represent(self, c: torch.Tensor, g: Optional[torch.Tensor]) -> torch.Tensor:
        if self.mode == "manual":
            return c[:, self.timestep]
        if self.mode == "average":
            return fuse(c, uniform_weights(c))
        return self.fusion(c, g)

    def forward(self, c: torch.Tensor, g: Optional[torch.Tensor] = None) -> torch.Tensor:
        return self.head(self.represent(c, g))


@dataclass
class TrainConfig:
    E: int = 10
    epochs: int = 100
    lr: float = 1e-4
    lr_min: float = 5e-6
    batch_size: int = 64
    seed: int = 0
    hidden: Tuple[int, int] = (128, 64)
    mode: str = "selective"
    timestep: Optional[int] = None
    shared_fusion: bool = False

    def validate(self) -> None:
        if self.E < 1 or self.epochs < 1 or self.batch_size < 2:
            raise ValueError("E, epochs must be >= 1 and batch_size >= 2")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d


@dataclass
class EnsembleModel:
    members: List[FusionClassifier]
    config: TrainConfig
    num_classes: int
    m: int
    K: int
    d_g: int
    loss_curves: List[List[float]] = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    @property
    def E(self) -> int:
        return len(self.members)


def _tensors(Bc, Bg):
    c = torch.as_tensor(np.asarray(Bc), dtype=torch.float32)
    g = None if Bg is None else torch.as_tensor(np.asarray(Bg), dtype=torch.float32)
    return c, g


def _new_member(cfg: TrainConfig, m, K, d_g, C, seed, fusion=None) -> FusionClassifier:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return FusionClassifier(cfg.mode, m, K, d_g, C, cfg.hidden, cfg.timestep, fusion)


def _batches(n: int, size: int, rng: np.random.Generator):
    perm = rng.permutation(n)
    for lo in range(0, n, size):
        idx = perm[lo : lo + size]
        if len(idx) >= 2:  # batch norm needs two samples
            yield idx


def _fit(params, modules, forward_loss, n, cfg: TrainConfig, seed: int) -> List[float]:
    opt = torch.optim.Adam(params, lr=cfg.lr)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=cfg.epochs, eta_min=cfg.lr_min)
    rng = np.random.default_rng(seed)
    curve = []
    for mod in modules:
        mod.train()
    for epoch in range(cfg.epochs):
        total, count = 0.0, 0
        for idx in _batches(n, cfg.batch_size, rng):
            loss = forward_loss(torch.from_numpy(idx))
            if not torch.isfinite(loss):
                raise FloatingPointError(f"non-finite classifier loss at epoch {epoch}")
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            total += float(loss.detach()) * len(idx)
            count += len(idx)
        sched.step()
        curve.append(total / max(count, 1))
    for mod in modules:
        mod.eval()
    return curve


def train_ensemble(Bc_prime, Bg, labels, config: TrainConfig, num_classes: Optional[int] = None) -> EnsembleModel:
    """Train E members (fusion + head) with cross-entropy, Adam and cosine annealing.

    Member ``e`` is seeded with ``config.seed + e``. With ``shared_fusion`` a single
    fusion module is trained jointly with all heads.
    """
    config.validate()
    c, g = _tensors(Bc_prime, Bg)
    y = np.asarray(labels, dtype=np.int64)
    C = int(num_classes if num_classes is not None else y.max())
    missing = sorted(set(range(1, C + 1)) - set(y.tolist()))
    if missing:
        raise ValueError(f"classes {missing} are absent from the training labels")
    n, m, K = c.shape
    d_g = 0 if g is None else g.shape[-1]
    target = torch.from_numpy(y - 1)

    if config.shared_fusion and config.mode.startswith("selective"):
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(config.seed)
            fusion = SelectiveFusion(m, K, d_g, guidance=(config.mode == "selective"))
        members = [_new_member(config, m, K, d_g, C, config.seed + e, fusion) for e in range(config.E)]
        params = list(fusion.parameters()) + [p for mem in members for p in mem.head.parameters()]

        def loss_fn(idx):
            r = fusion(c[idx], None if g is None else g[idx])
            return sum(F.cross_entropy(mem.head(r), target[idx]) for mem in members)

        curves = [_fit(params, members, loss_fn, n, config, config.seed)]
    else:
        members, curves = [], []
        for e in range(config.E):
            mem = _new_member(config, m, K, d_g, C, config.seed + e)

            def loss_fn(idx, mem=mem):
                return F.cross_entropy(mem(c[idx], None if g is None else g[idx]), target[idx])

            curves.append(_fit(list(mem.parameters()), [mem], loss_fn, n, config, config.seed + e))
            members.append(mem)
    return EnsembleModel(members, config, C, m, K, d_g, curves)


def manual_single_timestep(Bc_prime, labels, config: TrainConfig, timestep: int, num_classes: Optional[int] = None) -> EnsembleModel:
    """Ablation baseline: the same heads on one timestep's purified features."""
    cfg = TrainConfig(**{**asdict(config), "mode": "manual", "timestep": timestep, "hidden": tuple(config.hidden)})
    return train_ensemble(Bc_prime, None, labels, cfg, num_classes)


def member_votes(ensemble: EnsembleModel, Bc_prime, Bg, batch_size: int = 4096) -> np.ndarray:
    """(E, n) argmax class ids (1-based) of every member."""
    c, g = _tensors(Bc_prime, Bg)
    votes = np.empty((ensemble.E, c.shape[0]), dtype=np.int64)
    with torch.no_grad():
        for e, mem in enumerate(ensemble.members):
            mem.eval()
            for lo in range(0, c.shape[0], batch_size):
                sl = slice(lo, lo + batch_size)
                votes[e, sl] = mem(c[sl], None if g is None else g[sl]).argmax(dim=1).numpy() + 1
    return votes


def majority_vote(votes: np.ndarray, num_classes: int) -> np.ndarray:
    """Mode over members (axis 0); ties go to the lowest class id."""
    votes = np.asarray(votes)
    counts = np.zeros((num_classes, votes.shape[1]), dtype=np.int64)
    for row in votes:
        counts[row - 1, np.arange(votes.shape[1])] += 1
    return counts.argmax(axis=0) + 1


def predict(ensemble: EnsembleModel, Bc_prime, Bg) -> np.ndarray:
    return majority_vote(member_votes(ensemble, Bc_prime, Bg), ensemble.num_classes)


# --------------------------------------------------------------------------- persistence


def save_ensemble(ensemble: EnsembleModel, directory, extra: Optional[dict] = None) -> Path:
    directory = Path(directory)
    with artifacts.atomic_dir(directory) as tmp:
        members = []
        for e, mem in enumerate(ensemble.members):
            state = {k: v.detach().numpy() for k, v in mem.state_dict().items()}
            members.append(artifacts.save_tensors(tmp / f"member_{e:03d}", state))
        manifest = {
            "config": ensemble.config.to_dict(),
            "num_classes": ensemble.num_classes,
            "m": ensemble.m,
            "K": ensemble.K,
            "d_g": ensemble.d_g,
            "members": members,
            "loss_curves": ensemble.loss_curves,
        }
        manifest.update(ensemble.meta)
        manifest.update(extra or {})
        artifacts.write_json(tmp / artifacts.MANIFEST, manifest)
    return directory


def load_ensemble(directory) -> EnsembleModel:
    directory = Path(directory)
    man = artifacts.read_json(directory / artifacts.MANIFEST)
    cd = dict(man["config"])
    cd["hidden"] = tuple(cd["hidden"])
    cfg = TrainConfig(**cd)
    members = []
    for e, entries in enumerate(man["members"]):
        mem = FusionClassifier(cfg.mode, man["m"], man["K"], man["d_g"], man["num_classes"], cfg.hidden, cfg.timestep)
        arrays = artifacts.load_tensors(directory / f"member_{e:03d}", entries)
        mem.load_state_dict({k: torch.from_numpy(np.array(v)) for k, v in arrays.items()})
        mem.eval()
        members.append(mem)
    keys = {"config", "num_classes", "m", "K", "d_g", "members", "loss_curves"}
    return EnsembleModel(members, cfg, man["num_classes"], man["m"], man["K"], man["d_g"],
                         man["loss_curves"], {k: v for k, v in man.items() if k not in keys})
