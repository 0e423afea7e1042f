"""Conditional trajectory diffusion: schedules, forward noising, denoiser training and sampling.

Trajectories are diffused as ``[T, M, 4]`` state tensors after per-channel
z-scoring. The denoiser predicts the injected noise; the reverse mean is
recovered analytically and the reverse variance is fixed to ``beta_k``.
"""
from __future__ import annotations

import json
import logging
import math
import struct
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
import torch
from torch import nn

from .guides import GuideConfig, evaluate_guides
from .maps import LAYER_NAMES, MapGrid
from .scene import DEFAULT_DT, Scene, THETA, V

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"EGSD"
SCHEMA_VERSION = "1.0"


class TrainingDivergedError(RuntimeError):
    pass


# -- variance schedule ----------------------------------------------------------

@dataclass(frozen=True)
class VarianceSchedule:
    betas: np.ndarray

    def __post_init__(self):
        betas = np.array(self.betas, dtype=float).reshape(-1)
        if betas.size < 1 or np.any(betas <= 0) or np.any(betas >= 1):
            raise ValueError("betas must lie in (0, 1)")
        if np.any(np.diff(betas) < 0):
            raise ValueError("betas must be non-decreasing")
        betas.setflags(write=False)
        object.__setattr__(self, "betas", betas)

    @property
    def K(self) -> int:
        return self.betas.size

    @property
    def alphas(self) -> np.ndarray:
        return 1.0 - self.betas

    @property
    def alpha_bars(self) -> np.ndarray:
        return np.cumprod(self.alphas)

    def beta(self, k: int) -> float:
        return float(self.betas[k - 1])

    def alpha_bar(self, k: int) -> float:
        return float(self.alpha_bars[k - 1])


def make_schedule(K: int, beta_min: float, beta_max: float, kind: str = "linear") -> VarianceSchedule:
    """Linear or cosine schedule over ``K`` steps, with betas inside ``[beta_min, beta_max]``."""
    if K < 1:
        raise ValueError("K must be >= 1")
    if not 0 < beta_min <= beta_max < 1:
        raise ValueError(f"need 0 < beta_min <= beta_max < 1, got {beta_min}, {beta_max}")
    if kind == "linear":
        betas = np.linspace(beta_min, beta_max, K)
    elif kind == "cosine":
        s = 0.008
        steps = np.arange(K + 1) / K
        f = np.cos((steps + s) / (1 + s) * math.pi / 2) ** 2
        abar = f / f[0]
        betas = np.clip(1.0 - abar[1:] / abar[:-1], beta_min, beta_max)
        betas = np.maximum.accumulate(betas)
    else:
        raise ValueError(f"unknown schedule kind {kind!r}")
    return VarianceSchedule(betas)


def default_schedule(K: int = 100, kind: str = "linear") -> VarianceSchedule:
    """The usual 1e-4..0.02 linear range defined for 1000 steps, rescaled to ``K`` steps."""
    scale = 1000.0 / K
    return make_schedule(K, min(1e-4 * scale, 0.5), min(0.02 * scale, 0.999), kind)


def forward_sample(tau0: np.ndarray, k: int, noise: np.ndarray, sched: VarianceSchedule) -> np.ndarray:
    """Closed-form ``q(tau^k | tau^0)``: ``sqrt(abar_k) tau0 + sqrt(1 - abar_k) eps``."""
    tau0 = np.asarray(tau0, dtype=float)
    noise = np.asarray(noise, dtype=float)
    if tau0.shape != noise.shape:
        raise ValueError(f"shape mismatch: {tau0.shape} vs {noise.shape}")
    if not 1 <= k <= sched.K:
        raise ValueError(f"diffusion step {k} outside [1, {sched.K}]")
    ab = sched.alpha_bar(k)
    return math.sqrt(ab) * tau0 + math.sqrt(1.0 - ab) * noise


# -- condition features -------------------------------------------------------

def encode_condition(g: MapGrid, center, h: int = 1, window_m: float = 200.0, pool: int = 16) -> np.ndarray:
    """Average-pooled map layers around ``center``, repeated over ``h`` history frames.

    The window is sampled at the grid resolution and pooled into ``pool x pool``
    blocks per layer. The map has no vehicles on it, so every history frame
    sees the same raster.
    """
    if h < 1:
        raise ValueError("history length must be >= 1")
    per_block = max(int(round(window_m / pool / g.resolution)), 1)
    n = per_block * pool
    step = window_m / n
    offs = -window_m / 2 + (np.arange(n) + 0.5) * step
    px, py = np.meshgrid(center[0] + offs, center[1] + offs)
    pts = np.stack([px, py], axis=-1)
    blocks = []
    for name in LAYER_NAMES:
        layer = g.sample(name, pts).astype(float)
        blocks.append(layer.reshape(pool, per_block, pool, per_block).mean(axis=(1, 3)))
    frame = np.stack(blocks).ravel()
    return np.tile(frame, h)


def condition_dim(h: int = 1, pool: int = 16) -> int:
    return len(LAYER_NAMES) * pool * pool * h


# -- denoiser ------------------------------------------------------------------

@dataclass(frozen=True)
class Normalizer:
    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, states: np.ndarray) -> "Normalizer":
        flat = np.asarray(states, dtype=float).reshape(-1, 4)
        std = flat.std(axis=0)
        return cls(flat.mean(axis=0), np.where(std > 1e-6, std, 1.0))

    def encode(self, states):
        return (states - self.mean) / self.std

    def decode(self, z):
        return z * self.std + self.mean


def _timestep_embedding(k: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float32) / half)
    args = k.float()[:, None] * freqs[None]
    return torch.cat([torch.sin(args), torch.cos(args)], dim=-1)


class EpsNet(nn.Module):
    """Per-agent temporal MLP with a mean-pooled cross-agent context.

    Shared weights across agents plus a symmetric pooling make the network
    permutation-equivariant in the agent axis.
    """

    def __init__(self, T: int, hidden: int = 256, emb: int = 64, cond_dim: int = 0, input_skip: bool = False):
        super().__init__()
        self.T = T
        # applied by Denoiser.eps, which knows the schedule
        self.input_skip = input_skip
        self.emb = emb
        self.time_mlp = nn.Sequential(nn.Linear(emb, emb), nn.SiLU(), nn.Linear(emb, emb))
        self.cond_proj = nn.Linear(cond_dim, emb) if cond_dim else None
        self.encoder = nn.Sequential(nn.Linear(T * 4 + emb, hidden), nn.SiLU(),
                                     nn.Linear(hidden, hidden), nn.SiLU())
        self.decoder = nn.Sequential(nn.Linear(2 * hidden + emb, hidden), nn.SiLU(),
                                     nn.Linear(hidden, hidden), nn.SiLU(),
                                     nn.Linear(hidden, T * 4))

    def forward(self, x, k, cond=None, mask=None):
        # x: [B, T, M, 4] -> per-agent rows [B, M, T*4]
        B, T, M, _ = x.shape
        rows = x.permute(0, 2, 1, 3).reshape(B, M, T * 4)
        e = self.time_mlp(_timestep_embedding(k, self.emb))
        if self.cond_proj is not None and cond is not None:
            e = e + self.cond_proj(cond)
        e_rows = e[:, None, :].expand(B, M, self.emb)
        hid = self.encoder(torch.cat([rows, e_rows], dim=-1))
        if mask is None:
            ctx = hid.mean(dim=1)
        else:
            m = mask.float()[..., None]
            ctx = (hid * m).sum(dim=1) / m.sum(dim=1).clamp(min=1.0)
        out = self.decoder(torch.cat([hid, ctx[:, None, :].expand_as(hid), e_rows], dim=-1))
        return out.reshape(B, M, T, 4).permute(0, 2, 1, 3)


@dataclass
class Denoiser:
    """Noise-prediction network plus what it needs to run: architecture, normalization, schedule."""

    net: EpsNet
    arch: dict
    normalizer: Normalizer
    schedule: VarianceSchedule
    meta: dict = field(default_factory=dict)

    @classmethod
    def create(cls, T: int, normalizer: Normalizer, schedule: VarianceSchedule,
               hidden: int = 256, emb: int = 64, cond_dim: int = 0, seed: int = 0,
               input_skip: bool = False) -> "Denoiser":
        torch.manual_seed(seed)
        arch = {"T": T, "hidden": hidden, "emb": emb, "cond_dim": cond_dim, "input_skip": input_skip}
        return cls(EpsNet(**arch), arch, normalizer, schedule)

    @property
    def T(self) -> int:
        return self.arch["T"]

    @property
    def clip(self) -> Optional[np.ndarray]:
        """Per-channel bound on the implied clean sample, in normalized units (``None`` disables it)."""
        bound = self.meta.get("clip_x0")
        return None if bound is None else np.asarray(bound, dtype=float)

    def eps(self, x: torch.Tensor, k: torch.Tensor, cond=None, mask=None) -> torch.Tensor:
        """Noise prediction; with ``input_skip`` the net only models the residual over ``sqrt(1 - abar_k) x``.

        For unit-variance data that linear term is the best linear noise estimate,
        which the bare MLP otherwise fits poorly at high noise levels.
        """
        out = self.net(x, k, cond, mask)
        if self.net.input_skip:
            ab = torch.as_tensor(self.schedule.alpha_bars, dtype=x.dtype)[k - 1]
            out = out + torch.sqrt(1.0 - ab)[:, None, None, None] * x
        return out

    def predict(self, tau, k: int, f=None, mask=None) -> np.ndarray:
        """Predicted noise for normalized ``tau`` (``[T, M, 4]`` or batched)."""
        tau = np.asarray(tau)
        single = tau.ndim == 3
        x = torch.from_numpy(np.ascontiguousarray(tau[None] if single else tau, dtype=np.float32))
        kk = torch.full((x.shape[0],), int(k), dtype=torch.long)
        cond = None
        if f is not None and self.arch["cond_dim"]:
            c = np.asarray(f, dtype=np.float32)
            cond = torch.from_numpy(np.broadcast_to(c, (x.shape[0], c.shape[-1])).copy())
        m = None if mask is None else torch.from_numpy(np.atleast_2d(np.asarray(mask, dtype=bool)))
        with torch.no_grad():
            out = self.eps(x, kk, cond, m).numpy().astype(float)
        return out[0] if single else out

    def zero_(self) -> "Denoiser":
        with torch.no_grad():
            for p in self.net.parameters():
                p.zero_()
        return self


# -- training --------------------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    steps: int = 2000
    batch_size: int = 32
    lr: float = 2e-4
    min_lr: float = 2e-7
    hidden: int = 256
    emb: int = 64
    seed: int = 0
    probe_size: int = 64
    log_every: int = 50
    # sampling clips the implied clean sample to margin * max |z| per channel seen in training; 0 disables
    clip_margin: float = 1.1
    input_skip: bool = True


@dataclass
class TrainResult:
    denoiser: Denoiser
    losses: list
    probe_losses: list

    @property
    def initial_probe(self) -> float:
        return self.probe_losses[0][1]

    @property
    def final_probe(self) -> float:
        return self.probe_losses[-1][1]


def _stack_dataset(dataset: Sequence[Scene]):
    if not dataset:
        raise ValueError("training dataset is empty")
    T, M = dataset[0].T, dataset[0].M
    for sc in dataset:
        if sc.T != T or sc.M != M:
            raise ValueError("all training scenes must share T and M")
    states = np.stack([sc.states for sc in dataset]).astype(float)
    # heading is unwrapped in time so the network sees continuous angles
    states[..., THETA] = np.unwrap(states[..., THETA], axis=1)
    ids = np.stack([sc.agent_ids for sc in dataset])
    valid = np.stack([sc.valid for sc in dataset])
    return states, ids, valid


def _keyed_noise(rng: np.random.Generator, ids: np.ndarray, T: int) -> np.ndarray:
    """Noise ``[B, T, M, 4]`` whose rows follow agent ids rather than slot order."""
    B, M = ids.shape
    width = int(ids.max()) + 1
    block = rng.standard_normal((B, width, T, 4))
    picked = np.take_along_axis(block, ids[:, :, None, None], axis=1)
    return picked.transpose(0, 2, 1, 3)


def train_denoiser(dataset: Sequence[Scene], cond: Optional[Sequence] = None,
                   cfg: TrainConfig = TrainConfig(), schedule: Optional[VarianceSchedule] = None,
                   callback: Optional[Callable[[int, float], None]] = None) -> TrainResult:
    """Fit the noise-prediction network on ``dataset`` with Adam and cosine lr decay.

    ``probe_losses`` tracks the noise MSE on a fixed probe batch (fixed scenes,
    steps and noise) so that progress is comparable across the run.
    """
    schedule = schedule or default_schedule()
    states, ids, valid = _stack_dataset(dataset)
    N, T, M, _ = states.shape
    normalizer = Normalizer.fit(states)
    z = normalizer.encode(states)
    cond_arr = None
    if cond is not None:
        cond_arr = np.stack([np.asarray(c, dtype=np.float32) for c in cond])
        if len(cond_arr) != N:
            raise ValueError("one condition feature per scene required")
    den = Denoiser.create(T, normalizer, schedule, cfg.hidden, cfg.emb,
                          0 if cond_arr is None else cond_arr.shape[1], cfg.seed, cfg.input_skip)
    opt = torch.optim.Adam(den.net.parameters(), lr=cfg.lr)
    sched_lr = torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=max(cfg.steps, 1), eta_min=cfg.min_lr)
    rng = np.random.default_rng(cfg.seed)
    alpha_bars = schedule.alpha_bars

    def batch_tensors(idx, ks, noise):
        ab = alpha_bars[ks - 1][:, None, None, None]
        x = np.sqrt(ab) * z[idx] + np.sqrt(1 - ab) * noise
        c = None if cond_arr is None else torch.from_numpy(cond_arr[idx])
        return (torch.from_numpy(x.astype(np.float32)), torch.from_numpy(ks),
                torch.from_numpy(noise.astype(np.float32)), c, torch.from_numpy(valid[idx]))

    def masked_mse(pred, target, mask):
        err = (pred - target) ** 2 * mask[:, None, :, None].float()
        return err.sum() / (mask.float().sum() * T * 4)

    probe_rng = np.random.default_rng([cfg.seed, 1])
    p_idx = probe_rng.integers(0, N, cfg.probe_size)
    p_k = probe_rng.integers(1, schedule.K + 1, cfg.probe_size)
    p_batch = batch_tensors(p_idx, p_k, _keyed_noise(probe_rng, ids[p_idx], T))

    def probe_loss():
        x, kk, eps, c, m = p_batch
        with torch.no_grad():
            return float(masked_mse(den.eps(x, kk, c, m), eps, m))

    losses, probes = [], [(0, probe_loss())]
    last_good = {k: v.clone() for k, v in den.net.state_dict().items()}
    for step in range(1, cfg.steps + 1):
        idx = rng.integers(0, N, cfg.batch_size)
        ks = rng.integers(1, schedule.K + 1, cfg.batch_size)
        x, kk, eps, c, m = batch_tensors(idx, ks, _keyed_noise(rng, ids[idx], T))
        loss = masked_mse(den.eps(x, kk, c, m), eps, m)
        value = float(loss.detach())
        if not math.isfinite(value):
            den.net.load_state_dict(last_good)
            raise TrainingDivergedError(
                f"loss became {value} at step {step} (lr={sched_lr.get_last_lr()[0]:.3g}); "
                f"parameters restored to step {step - 1}")
        opt.zero_grad()
        loss.backward()
        opt.step()
        sched_lr.step()
        losses.append(value)
        if step % cfg.log_every == 0 or step == cfg.steps:
            last_good = {k: v.clone() for k, v in den.net.state_dict().items()}
            probes.append((step, probe_loss()))
            log.debug("step %d loss %.4f probe %.4f", step, value, probes[-1][1])
        if callback is not None:
            callback(step, value)
    den.meta["dt"] = dataset[0].dt
    # one bound per channel: unwrapped headings reach far larger z than positions do
    bound = cfg.clip_margin * np.abs(z).reshape(-1, 4).max(axis=0)
    den.meta["clip_x0"] = bound.tolist() if cfg.clip_margin else None
    return TrainResult(den, losses, probes)


# -- sampling ---------------------------------------------------------------------

def _posterior_mean(tau_k, k: int, eps, sched: VarianceSchedule, clip=None) -> np.ndarray:
    """Mean of ``p(tau^{k-1} | tau^k)`` from the predicted noise.

    Written through the implied clean sample so that ``clip`` (scalar or per channel) can bound it;
    with ``clip=None`` this equals ``(tau_k - beta_k / sqrt(1 - abar_k) eps) / sqrt(alpha_k)``.
    """
    beta = sched.beta(k)
    ab = sched.alpha_bar(k)
    ab_prev = sched.alpha_bar(k - 1) if k > 1 else 1.0
    x0 = (tau_k - math.sqrt(1.0 - ab) * eps) / math.sqrt(ab)
    if clip is not None:
        x0 = np.clip(x0, -clip, clip)
    c0 = math.sqrt(ab_prev) * beta / (1.0 - ab)
    ck = math.sqrt(1.0 - beta) * (1.0 - ab_prev) / (1.0 - ab)
    return c0 * x0 + ck * tau_k


def _check_step(k: int, sched: VarianceSchedule):
    if not 1 <= k <= sched.K:
        raise ValueError(f"diffusion step {k} outside [1, {sched.K}]")


def _finish_step(mu, k: int, sched: VarianceSchedule, rng, noise):
    if k == 1:
        return mu
    if noise is None:
        noise = rng.standard_normal(mu.shape)
    return mu + math.sqrt(sched.beta(k)) * noise


def reverse_step(tau_k, k: int, f, den: Denoiser, sched: VarianceSchedule,
                 rng: Optional[np.random.Generator] = None, noise=None) -> np.ndarray:
    """One ancestral step ``tau^k -> tau^{k-1}`` in normalized space.

    ``noise`` overrides the draw from ``rng``; the final step (k=1) adds none.
    """
    _check_step(k, sched)
    tau_k = np.asarray(tau_k, dtype=float)
    mu = _posterior_mean(tau_k, k, den.predict(tau_k, k, f), sched, den.clip)
    return _finish_step(mu, k, sched, rng, noise)


@dataclass(frozen=True)
class GuideContext:
    """Everything the guides need besides the trajectory itself."""

    cfg: GuideConfig
    grid: Optional[MapGrid]
    dims: np.ndarray
    valid: np.ndarray


def guide_shift(mu, k: int, den: Denoiser, sched: VarianceSchedule, ctx: GuideContext):
    """Mean shift in normalized space, or ``None`` when guidance is off or unusable."""
    if ctx.cfg.is_zero:
        return None
    phys = den.normalizer.decode(mu)
    try:
        _, grad = evaluate_guides(phys, ctx.dims, ctx.valid, ctx.grid, ctx.cfg, grad=True,
                                  skip_unweighted=True)
    except ValueError:
        grad = None
    if grad is None or not np.all(np.isfinite(grad)):
        warnings.warn(f"non-finite guide gradient at k={k}; step left unguided", RuntimeWarning)
        return None
    alpha = ctx.cfg.step_scale * sched.beta(k)
    direction = -1.0 if ctx.cfg.descend else 1.0
    # the step is taken in physical units and mapped back to normalized space;
    # differentiating in normalized space would scale it by std^2 (~2000x for positions)
    return direction * alpha * grad / den.normalizer.std


def guided_reverse_step(tau_k, k: int, f, den: Denoiser, ctx: GuideContext, sched: VarianceSchedule,
                        rng: Optional[np.random.Generator] = None, noise=None) -> np.ndarray:
    """Reverse step whose mean is moved along the guide gradient before sampling."""
    _check_step(k, sched)
    tau_k = np.asarray(tau_k, dtype=float)
    mu = _posterior_mean(tau_k, k, den.predict(tau_k, k, f), sched, den.clip)
    shift = guide_shift(mu, k, den, sched, ctx)
    if shift is not None:
        mu = mu + shift
    return _finish_step(mu, k, sched, rng, noise)


def _slot_noise(rng: np.random.Generator, keys: np.ndarray, T: int) -> np.ndarray:
    block = rng.standard_normal((int(keys.max()) + 1, T, 4))
    return block[keys].transpose(1, 0, 2)


def generate_scene(g: Optional[MapGrid], M: int, T: int, dims, guide_cfg: GuideConfig, den: Denoiser,
                   sched: Optional[VarianceSchedule] = None, seed: int = 0, cond=None,
                   agent_keys=None, dt: Optional[float] = None) -> Scene:
    """Run the full guided reverse chain from Gaussian noise and return a physical scene.

    Noise is drawn per agent key, so permuting ``dims`` together with
    ``agent_keys`` permutes the output agents the same way.
    """
    sched = sched or den.schedule
    if T != den.T:
        raise ValueError(f"denoiser was built for T={den.T}, asked for T={T}")
    dims = np.asarray(dims, dtype=float).reshape(M, 2)
    keys = np.arange(M) if agent_keys is None else np.asarray(agent_keys, dtype=int)
    if cond is None and g is not None and den.arch["cond_dim"]:
        cond = encode_condition(g, map_center(g), h=den.arch["cond_dim"] // condition_dim(1))
    ctx = GuideContext(guide_cfg, g, dims, np.ones(M, dtype=bool))
    rng = np.random.default_rng(seed)
    tau = _slot_noise(rng, keys, T)
    for k in range(sched.K, 0, -1):
        noise = _slot_noise(rng, keys, T) if k > 1 else None
        tau = guided_reverse_step(tau, k, cond, den, ctx, sched, noise=noise)
    states = den.normalizer.decode(tau)
    states[..., V] = np.maximum(states[..., V], 0.0)
    return Scene(states, dims, None, dt if dt is not None else den.meta.get("dt", DEFAULT_DT),
                 g.map_id if g is not None else "", keys, seed,
                 {"guide_config": guide_cfg.to_dict()})


def map_center(g: MapGrid):
    rows, cols = g.extent
    return (g.origin[0] + cols * g.resolution / 2, g.origin[1] + rows * g.resolution / 2)



# -- checkpoints --------------------------------------------------------------

def save_checkpoint(den: Denoiser, path) -> Path:
    """Write ``MAGIC | u32 header length | JSON header | float32 LE parameters``."""
    path = Path(path)
    state = den.net.state_dict()
    params = [{"name": k, "shape": list(v.shape)} for k, v in state.items()]
    header = {
        "schema_version": SCHEMA_VERSION,
        "arch": den.arch,
        "normalizer": {"mean": den.normalizer.mean.tolist(), "std": den.normalizer.std.tolist()},
        "schedule": {"betas": den.schedule.betas.tolist()},
        "params": params,
        "meta": den.meta,
    }
    blob = json.dumps(header, sort_keys=True).encode()
    flat = np.concatenate([v.detach().numpy().astype("<f4").ravel() for v in state.values()])
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        fh.write(flat.tobytes())
    return path


def load_checkpoint(path) -> Denoiser:
    raw = Path(path).read_bytes()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a denoiser checkpoint")
    (n,) = struct.unpack("<I", raw[4:8])
    header = json.loads(raw[8:8 + n])
    if header["schema_version"].split(".")[0] != SCHEMA_VERSION.split(".")[0]:
        raise ValueError(f"{path}: unsupported checkpoint schema {header['schema_version']}")
    flat = np.frombuffer(raw[8 + n:], dtype="<f4")
    norm = Normalizer(np.array(header["normalizer"]["mean"]), np.array(header["normalizer"]["std"]))
    den = Denoiser(EpsNet(**header["arch"]), header["arch"], norm,
                   VarianceSchedule(header["schedule"]["betas"]), header.get("meta", {}))
    state, offset = {}, 0
    for p in header["params"]:
        size = int(np.prod(p["shape"])) if p["shape"] else 1
        state[p["name"]] = torch.from_numpy(flat[offset:offset + size].reshape(p["shape"]).copy())
        offset += size
    if offset != flat.size:
        raise ValueError(f"{path}: parameter blob size mismatch")
    den.net.load_state_dict(state)
    return den
