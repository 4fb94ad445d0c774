"""Classifier-free guided DDPM over motion-parameter sequences.

The forward process follows the cosine noise schedule; the reverse process is
a small 1-D U-Net over the prediction horizon with two channels (yaw rate,
longitudinal acceleration), a sinusoidal diffusion-step embedding and a
learned condition embedding. Condition token 0 is the unconditional branch;
tokens 1..Q are codebook indices. Sampling mixes conditional and
unconditional noise estimates with guidance scale w and clamps the final
denormalized sequence to the physical limits.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .arrayio import read_array, write_array
from .errors import InputError, TrainingError
from .kinematics import MotionParamSeq, PhysicalLimits, clamp_params

DEFAULT_T = 100
DEFAULT_S = 0.008
# Floor on the per-step alpha used in the reverse update. The exact cosine
# table reaches alpha_bar[T] = 0, which would make the 1/sqrt(alpha) rescale
# at t = T singular.
ALPHA_FLOOR = 1e-3


@dataclass(frozen=True)
class NoiseSchedule:
    T: int
    s: float
    alpha_bar: np.ndarray  # length T+1, exact cosine table, [0]=1, [T]=0
    alpha: np.ndarray  # length T+1, ratio table floored at ALPHA_FLOOR
    sigma2: np.ndarray  # length T+1, reverse-process variance


def build_schedule(T: int, s: float = DEFAULT_S) -> NoiseSchedule:
    if T < 1 or s <= 0:
        raise InputError(f"need T >= 1 and s > 0, got T={T}, s={s}")
    t = np.arange(T + 1)
    f = np.cos(((t / T + s) / (1 + s)) * (np.pi / 2)) ** 2
    alpha_bar = f / f[0]
    alpha_bar[0] = 1.0
    alpha_bar[T] = 0.0  # cos(pi/2)^2, snapped past float rounding
    alpha = np.ones(T + 1)
    alpha[1:] = np.clip(alpha_bar[1:] / alpha_bar[:-1], ALPHA_FLOOR, 1.0)
    sigma2 = np.zeros(T + 1)
    denom = 1.0 - alpha_bar[1:]
    safe = np.where(denom > 0, denom, 1.0)
    sigma2[1:] = np.where(denom > 0, (1.0 - alpha[1:]) * (1.0 - alpha_bar[:-1]) / safe, 0.0)
    sigma2[1] = 0.0  # no noise at the final reverse step
    return NoiseSchedule(T=T, s=s, alpha_bar=alpha_bar, alpha=alpha, sigma2=sigma2)


def _check_t(t: int, sched: NoiseSchedule) -> None:
    if not 1 <= t <= sched.T:
        raise InputError(f"step t={t} outside [1, {sched.T}]")


def forward_noise(x0: np.ndarray, t: int, eps: np.ndarray, sched: NoiseSchedule) -> np.ndarray:
    """x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps."""
    _check_t(t, sched)
    ab = sched.alpha_bar[t]
    return np.sqrt(ab) * np.asarray(x0, dtype=float) + np.sqrt(1.0 - ab) * np.asarray(eps, dtype=float)


def guided_noise(eps_cond: np.ndarray, eps_uncond: np.ndarray, w: float) -> np.ndarray:
    """Classifier-free mixture (1 + w) eps_c - w eps_u."""
    eps_cond = np.asarray(eps_cond, dtype=float)
    eps_uncond = np.asarray(eps_uncond, dtype=float)
    if eps_cond.shape != eps_uncond.shape:
        raise InputError("conditional/unconditional estimates differ in shape")
    return (1.0 + w) * eps_cond - w * eps_uncond


def denoise_step(x_t: np.ndarray, eps_hat: np.ndarray, t: int, sched: NoiseSchedule,
                 eps: np.ndarray | float = 0.0) -> np.ndarray:
    """One reverse update from x_t to x_{t-1} with injected noise eps."""
    _check_t(t, sched)
    ab = sched.alpha_bar[t]
    alpha = sched.alpha[t]
    coef = 0.0 if ab >= 1.0 else (1.0 - alpha) / math.sqrt(1.0 - ab)
    mean = (np.asarray(x_t, dtype=float) - coef * np.asarray(eps_hat, dtype=float)) / math.sqrt(alpha)
    sigma = 0.0 if t == 1 else math.sqrt(sched.sigma2[t])
    return mean + sigma * np.asarray(eps, dtype=float)


# ---------------------------------------------------------------------------
# Denoiser network


class _StepEmbedding(nn.Module):
    def __init__(self, dim):
        super().__init__()
        self.dim = dim

    def forward(self, t):
        half = self.dim // 2
        freqs = torch.exp(
            -math.log(10000.0) * torch.arange(half, dtype=torch.float64) / half
        )
        args = t[:, None].double() * freqs[None]
        return torch.cat([torch.sin(args), torch.cos(args)], dim=-1)


class _ResBlock(nn.Module):
    def __init__(self, in_ch, out_ch, emb_dim):
        super().__init__()
        self.conv1 = nn.Conv1d(in_ch, out_ch, 3, padding=1)
        self.conv2 = nn.Conv1d(out_ch, out_ch, 3, padding=1)
        self.emb = nn.Linear(emb_dim, out_ch)
        self.skip = nn.Conv1d(in_ch, out_ch, 1) if in_ch != out_ch else nn.Identity()
        self.act = nn.SiLU()

    def forward(self, x, emb):
        h = self.act(self.conv1(x))
        h = h + self.emb(emb)[:, :, None]
        h = self.act(self.conv2(h))
        return h + self.skip(x)


class DenoiserNet(nn.Module):
    """1-D U-Net over the prediction horizon; 2 channels in and out."""

    def __init__(self, n_conditions, seq_len, base=32):
        super().__init__()
        emb_dim = base * 4
        self.seq_len = seq_len
        self.n_conditions = n_conditions  # vocabulary Q + 1; 0 = unconditional
        self.step_embed = _StepEmbedding(base)
        self.embed_mlp = nn.Sequential(
            nn.Linear(base, emb_dim), nn.SiLU(), nn.Linear(emb_dim, emb_dim)
        )
        self.cond_embed = nn.Embedding(n_conditions, emb_dim)
        self.inp = nn.Conv1d(2, base, 3, padding=1)
        self.down1 = _ResBlock(base, base, emb_dim)
        self.pool1 = nn.Conv1d(base, base, 3, stride=2, padding=1)
        self.down2 = _ResBlock(base, base * 2, emb_dim)
        self.pool2 = nn.Conv1d(base * 2, base * 2, 3, stride=2, padding=1)
        self.mid = _ResBlock(base * 2, base * 2, emb_dim)
        self.up2 = _ResBlock(base * 4, base, emb_dim)
        self.up1 = _ResBlock(base * 2, base, emb_dim)
        self.out = nn.Conv1d(base, 2, 3, padding=1)

    def forward(self, x, cond, t):
        emb = self.embed_mlp(self.step_embed(t)) + self.cond_embed(cond)
        h1 = self.down1(self.inp(x), emb)
        h2 = self.down2(self.pool1(h1), emb)
        h3 = self.mid(self.pool2(h2), emb)
        u2 = nn.functional.interpolate(h3, size=h2.shape[-1], mode="linear",
                                       align_corners=False)
        u2 = self.up2(torch.cat([u2, h2], dim=1), emb)
        u1 = nn.functional.interpolate(u2, size=h1.shape[-1], mode="linear",
                                       align_corners=False)
        u1 = self.up1(torch.cat([u1, h1], dim=1), emb)
        return self.out(u1)


@dataclass
class DiffusionHyperParams:
    batch_size: int = 64
    learning_rate: float = 1.0e-4
    epochs: int = 50
    p_uncond: float = 0.1
    predict_x0: bool = False  # comparison mode; default is noise prediction
    base_channels: int = 32


@dataclass
class Denoiser:
    """Trained denoiser plus the channel statistics it was trained with."""

    net: DenoiserNet
    norm_mean: np.ndarray  # per channel (yaw rate, accel)
    norm_std: np.ndarray
    predict_x0: bool
    p_uncond: float
    seq_len: int
    n_conditions: int
    # per-channel range of the normalized training sequences; the sampler
    # clips the running clean-sequence estimate to it (static thresholding)
    x0_min: np.ndarray = None
    x0_max: np.ndarray = None

    def normalize(self, x0: np.ndarray) -> np.ndarray:
        return (np.asarray(x0, dtype=float) - self.norm_mean[:, None]) / self.norm_std[:, None]

    def denormalize(self, x0: np.ndarray) -> np.ndarray:
        return np.asarray(x0, dtype=float) * self.norm_std[:, None] + self.norm_mean[:, None]


@dataclass(frozen=True)
class GuidanceRequest:
    condition: int  # 1-based codebook index
    guidance_scale: float
    num_samples: int
    seed: int

    def __post_init__(self):
        if self.num_samples < 1:
            raise InputError("num_samples must be >= 1")
        if self.condition < 1:
            raise InputError("condition must be a 1-based codebook index")


def train_diffusion(params_dataset, sched: NoiseSchedule, hp: DiffusionHyperParams,
                    seed: int, n_conditions: int | None = None) -> tuple:
    """Train the denoiser on (MotionParamSeq, condition) pairs.

    n_conditions sizes the condition vocabulary (codebook size + 1 for the
    unconditional token); by default it is inferred from the data, which
    leaves conditions that happen to be absent from the training set outside
    the vocabulary. Returns (Denoiser, per-epoch loss log). Deterministic for
    a given seed.
    """
    if not params_dataset:
        raise TrainingError("empty parameter dataset")
    if any(q < 1 for _, q in params_dataset):
        raise InputError("condition tokens must be >= 1 (0 is reserved)")
    n_threads = torch.get_num_threads()
    torch.set_num_threads(1)
    try:
        return _train_diffusion(params_dataset, sched, hp, seed, n_conditions)
    finally:
        torch.set_num_threads(n_threads)


def _train_diffusion(params_dataset, sched, hp, seed, n_conditions=None):
    torch.manual_seed(seed)
    x0 = np.stack([p.as_array() for p, _ in params_dataset])
    conds = np.array([q for _, q in params_dataset], dtype=np.int64)
    if n_conditions is None:
        n_conditions = int(conds.max()) + 1
    elif n_conditions <= int(conds.max()):
        raise InputError("n_conditions smaller than a training condition token")
    seq_len = x0.shape[2]

    mean = x0.mean(axis=(0, 2))
    std = x0.std(axis=(0, 2))
    std[std < 1e-9] = 1.0
    xn = torch.as_tensor((x0 - mean[None, :, None]) / std[None, :, None])
    cond_t = torch.as_tensor(conds)

    net = DenoiserNet(n_conditions, seq_len, base=hp.base_channels).double()
    opt = torch.optim.Adam(net.parameters(), lr=hp.learning_rate)
    gen = torch.Generator().manual_seed(seed)
    ab = torch.as_tensor(sched.alpha_bar)

    n = xn.shape[0]
    log = []
    net.train()
    for epoch in range(hp.epochs):
        order = torch.randperm(n, generator=gen)
        epoch_loss = 0.0
        for b in range(0, n, hp.batch_size):
            idx = order[b:b + hp.batch_size]
            xb = xn[idx]
            cb = cond_t[idx].clone()
            drop = torch.rand(len(idx), generator=gen) < hp.p_uncond
            cb[drop] = 0
            t = torch.randint(1, sched.T + 1, (len(idx),), generator=gen)
            eps = torch.randn(xb.shape, generator=gen, dtype=torch.float64)
            abt = ab[t][:, None, None]
            xt = torch.sqrt(abt) * xb + torch.sqrt(1.0 - abt) * eps
            pred = net(xt, cb, t.double())
            target = xb if hp.predict_x0 else eps
            loss = ((pred - target) ** 2).mean()
            if not torch.isfinite(loss):
                raise TrainingError(f"non-finite loss at epoch {epoch}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            epoch_loss += loss.item() * len(idx)
        log.append(epoch_loss / n)
    net.eval()
    xn_np = xn.numpy()
    model = Denoiser(net=net, norm_mean=mean, norm_std=std,
                     predict_x0=hp.predict_x0, p_uncond=hp.p_uncond,
                     seq_len=seq_len, n_conditions=n_conditions,
                     x0_min=xn_np.min(axis=(0, 2)), x0_max=xn_np.max(axis=(0, 2)))
    return model, log


def _eps_estimate(model: Denoiser, sched: NoiseSchedule, x: np.ndarray,
                  cond: np.ndarray, t: int) -> np.ndarray:
    xt = torch.as_tensor(x)
    ct = torch.as_tensor(cond)
    tt = torch.full((x.shape[0],), float(t), dtype=torch.float64)
    with torch.no_grad():
        out = model.net(xt, ct, tt).numpy()
    if not model.predict_x0:
        return out
    ab = sched.alpha_bar[t]
    if ab >= 1.0:
        return np.zeros_like(out)
    return (x - math.sqrt(ab) * out) / math.sqrt(1.0 - ab)


def sample(model: Denoiser, sched: NoiseSchedule, req: GuidanceRequest,
           limits: PhysicalLimits) -> list:
    """Draw K guided motion-parameter sequences, clamped to physical limits."""
    if req.condition >= model.n_conditions:
        raise InputError(
            f"condition {req.condition} outside vocabulary of {model.n_conditions - 1}"
        )
    k = req.num_samples
    rng = np.random.default_rng(np.random.SeedSequence([req.seed, req.condition]))
    x = rng.standard_normal((k, 2, model.seq_len))
    cond = np.full(k, req.condition, dtype=np.int64)
    uncond = np.zeros(k, dtype=np.int64)
    for t in range(sched.T, 0, -1):
        eps_c = _eps_estimate(model, sched, x, cond, t)
        eps_u = _eps_estimate(model, sched, x, uncond, t)
        eps_hat = guided_noise(eps_c, eps_u, req.guidance_scale)
        ab = sched.alpha_bar[t]
        if model.x0_min is not None and 0.0 < ab < 1.0:
            # clip the implied clean sequence to the training range; keeps
            # strongly guided estimates from extrapolating off the data
            x0_hat = (x - math.sqrt(1.0 - ab) * eps_hat) / math.sqrt(ab)
            x0_hat = np.clip(x0_hat, model.x0_min[None, :, None],
                             model.x0_max[None, :, None])
            eps_hat = (x - math.sqrt(ab) * x0_hat) / math.sqrt(1.0 - ab)
        noise = rng.standard_normal(x.shape) if t > 1 else 0.0
        x = denoise_step(x, eps_hat, t, sched, noise)
    out = []
    for i in range(k):
        seq = MotionParamSeq.from_array(model.denormalize(x[i]))
        out.append(clamp_params(seq, limits))
    return out


# ---------------------------------------------------------------------------
# Checkpointing


def save_denoiser(model: Denoiser, sched: NoiseSchedule, seed: int, loss_log,
                  directory) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    state = model.net.state_dict()
    names = sorted(state.keys())
    with open(directory / "params.bin", "wb") as fh:
        for name in names:
            write_array(fh, state[name].detach().numpy())
    manifest = {
        "kind": "denoiser",
        "T": sched.T,
        "s": sched.s,
        "p_uncond": model.p_uncond,
        "predict_x0": model.predict_x0,
        "n_conditions": model.n_conditions,
        "seq_len": model.seq_len,
        "base_channels": int(model.net.inp.weight.shape[0]),
        "norm_mean": [float(v) for v in model.norm_mean],
        "norm_std": [float(v) for v in model.norm_std],
        "x0_min": None if model.x0_min is None else [float(v) for v in model.x0_min],
        "x0_max": None if model.x0_max is None else [float(v) for v in model.x0_max],
        "seed": seed,
        "param_names": names,
        "loss_log": [float(v) for v in loss_log],
    }
    with open(directory / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)


def load_denoiser(directory) -> tuple:
    """Returns (Denoiser, NoiseSchedule)."""
    directory = Path(directory)
    with open(directory / "manifest.json") as fh:
        manifest = json.load(fh)
    net = DenoiserNet(manifest["n_conditions"], manifest["seq_len"],
                      base=manifest["base_channels"]).double()
    state = {}
    with open(directory / "params.bin", "rb") as fh:
        for name in manifest["param_names"]:
            state[name] = torch.as_tensor(read_array(fh))
    ref = net.state_dict()
    net.load_state_dict({k: v.reshape(ref[k].shape) for k, v in state.items()})
    net.eval()
    model = Denoiser(
        net=net,
        norm_mean=np.array(manifest["norm_mean"]),
        norm_std=np.array(manifest["norm_std"]),
        predict_x0=manifest["predict_x0"],
        p_uncond=manifest["p_uncond"],
        seq_len=manifest["seq_len"],
        n_conditions=manifest["n_conditions"],
        x0_min=None if manifest["x0_min"] is None else np.array(manifest["x0_min"]),
        x0_max=None if manifest["x0_max"] is None else np.array(manifest["x0_max"]),
    )
    return model, build_schedule(manifest["T"], manifest["s"])
