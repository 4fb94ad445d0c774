"""Scenario-context discretization with a vector-quantized autoencoder.

An encoder compresses an observed scenario into a single latent vector, which
is snapped to the nearest entry of a learned codebook; a mirrored decoder
reconstructs the scenario and a linear classifier predicts the maneuver class
from the selected codebook entry. Training combines the reconstruction /
codebook / commitment terms with a cross-entropy term weighted by lambda, and
uses the straight-through estimator to pass decoder gradients across the
quantization step.

Codebook indices are 1-based throughout: they double as the diffusion model's
condition tokens, where 0 is reserved for the unconditional branch.
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
from .errors import ConfigError, InputError, TrainingError

DEFAULT_Q = 60
DEFAULT_RQ = 64


@dataclass(frozen=True)
class Codebook:
    entries: np.ndarray  # [Q x R_q]

    def __post_init__(self):
        object.__setattr__(self, "entries", np.asarray(self.entries, dtype=float))
        if self.entries.ndim != 2 or self.entries.shape[0] < 1:
            raise ConfigError("codebook must be a non-empty [Q x R_q] array")
        if not np.all(np.isfinite(self.entries)):
            raise ConfigError("codebook entries must be finite")

    @property
    def size(self) -> int:
        return self.entries.shape[0]

    @property
    def dim(self) -> int:
        return self.entries.shape[1]


@dataclass(frozen=True)
class QuantizationResult:
    z_hat: np.ndarray
    z_q: np.ndarray
    index: int  # 1-based codebook index, usable directly as condition token


def quantize(z_hat: np.ndarray, codebook: Codebook) -> QuantizationResult:
    """Nearest codebook entry under squared Euclidean distance.

    Ties break toward the lowest index.
    """
    z_hat = np.asarray(z_hat, dtype=float)
    if z_hat.shape != (codebook.dim,):
        raise InputError(
            f"latent has shape {z_hat.shape}, codebook dimension is {codebook.dim}"
        )
    dist = np.sum((codebook.entries - z_hat) ** 2, axis=1)
    idx = int(np.argmin(dist))
    return QuantizationResult(z_hat=z_hat, z_q=codebook.entries[idx].copy(), index=idx + 1)


@dataclass
class VqVaeHyperParams:
    batch_size: int = 64
    learning_rate: float = 4.5e-6
    lam: float = 1.0
    epochs: int = 1200
    codebook_size: int = DEFAULT_Q
    latent_dim: int = DEFAULT_RQ


def _conv_out(length: int) -> int:
    # kernel 3, stride 2, padding 1
    return (length - 1) // 2 + 1


class _Encoder(nn.Module):
    def __init__(self, in_channels, t_obs, latent_dim, hidden=64):
        super().__init__()
        l1 = _conv_out(t_obs)
        l2 = _conv_out(l1)
        self.net = nn.Sequential(
            nn.Conv1d(in_channels, hidden, 3, padding=1),
            nn.ReLU(),
            nn.Conv1d(hidden, hidden, 3, stride=2, padding=1),
            nn.ReLU(),
            nn.Conv1d(hidden, hidden, 3, stride=2, padding=1),
            nn.ReLU(),
            nn.Flatten(),
            nn.Linear(hidden * l2, latent_dim),
        )

    def forward(self, x):
        return self.net(x)


class _Decoder(nn.Module):
    def __init__(self, out_channels, t_obs, latent_dim, hidden=64):
        super().__init__()
        l1 = _conv_out(t_obs)
        l2 = _conv_out(l1)
        self.hidden = hidden
        self.l2 = l2
        self.fc = nn.Linear(latent_dim, hidden * l2)
        self.net = nn.Sequential(
            nn.ReLU(),
            nn.ConvTranspose1d(hidden, hidden, 3, stride=2, padding=1,
                               output_padding=l1 - (2 * l2 - 1)),
            nn.ReLU(),
            nn.ConvTranspose1d(hidden, hidden, 3, stride=2, padding=1,
                               output_padding=t_obs - (2 * l1 - 1)),
            nn.ReLU(),
            nn.Conv1d(hidden, out_channels, 3, padding=1),
        )

    def forward(self, z):
        h = self.fc(z).view(-1, self.hidden, self.l2)
        return self.net(h)


class VqVaeModel(nn.Module):
    """Encoder, decoder, codebook and maneuver classifier in one module."""

    def __init__(self, input_shape, codebook_size=DEFAULT_Q, latent_dim=DEFAULT_RQ,
                 n_classes=3):
        super().__init__()
        n_vehicles, n_features, t_obs = input_shape
        self.input_shape = tuple(input_shape)
        self.encoder = _Encoder(n_vehicles * n_features, t_obs, latent_dim)
        self.decoder = _Decoder(n_vehicles * n_features, t_obs, latent_dim)
        self.embedding = nn.Embedding(codebook_size, latent_dim)
        self.classifier = nn.Linear(latent_dim, n_classes)
        # per-feature normalization of observations, set during training
        self.register_buffer("obs_mean", torch.zeros(n_features, 1))
        self.register_buffer("obs_std", torch.ones(n_features, 1))

    @property
    def codebook(self) -> Codebook:
        return Codebook(self.embedding.weight.detach().numpy().astype(float))

    def _check_obs(self, observation: np.ndarray) -> np.ndarray:
        observation = np.asarray(observation, dtype=float)
        squeeze = observation.ndim == 3
        if squeeze:
            observation = observation[None]
        if observation.shape[1:] != self.input_shape:
            raise InputError(
                f"expected observation shape {self.input_shape}, got {observation.shape[1:]}"
            )
        return observation, squeeze

    def _normalize(self, obs: torch.Tensor) -> torch.Tensor:
        return (obs - self.obs_mean) / self.obs_std

    def _flatten(self, obs: torch.Tensor) -> torch.Tensor:
        b, n, f, t = obs.shape
        return obs.reshape(b, n * f, t)


def encode(model: VqVaeModel, observation: np.ndarray) -> np.ndarray:
    """Deterministic latent embedding of one observation (or a batch)."""
    obs, squeeze = model._check_obs(observation)
    model.eval()
    with torch.no_grad():
        x = model._normalize(torch.as_tensor(obs, dtype=torch.float64))
        z = model.encoder(model._flatten(x))
    z = z.numpy()
    return z[0] if squeeze else z


def decode(model: VqVaeModel, z_q: np.ndarray) -> np.ndarray:
    """Reconstruct an observation from a (quantized) latent vector."""
    z_q = np.asarray(z_q, dtype=float)
    squeeze = z_q.ndim == 1
    if squeeze:
        z_q = z_q[None]
    latent_dim = model.embedding.weight.shape[1]
    if z_q.shape[1] != latent_dim:
        raise InputError(f"latent length {z_q.shape[1]} != {latent_dim}")
    model.eval()
    with torch.no_grad():
        out = model.decoder(torch.as_tensor(z_q, dtype=torch.float64))
        n, f, t = model.input_shape
        out = out.reshape(-1, n, f, t)
        out = out * model.obs_std + model.obs_mean
    out = out.numpy()
    return out[0] if squeeze else out


def classify(model: VqVaeModel, z_q: np.ndarray) -> np.ndarray:
    """Maneuver class probabilities for a latent vector."""
    z_q = np.asarray(z_q, dtype=float)
    model.eval()
    with torch.no_grad():
        logits = model.classifier(torch.as_tensor(z_q, dtype=torch.float64))
        probs = torch.softmax(logits, dim=-1)
    return probs.numpy()


def vq_loss(observation, reconstruction, z_hat, z_q) -> torch.Tensor:
    """Reconstruction + codebook + commitment terms (Eqs. with stop-gradients).

    All terms are full squared norms per sample; batched inputs are averaged
    over the batch. The codebook term receives gradients only through z_q, the
    commitment term only through z_hat.
    """
    obs = torch.as_tensor(observation, dtype=torch.float64) \
        if not torch.is_tensor(observation) else observation
    rec = torch.as_tensor(reconstruction, dtype=torch.float64) \
        if not torch.is_tensor(reconstruction) else reconstruction
    zh = torch.as_tensor(z_hat, dtype=torch.float64) if not torch.is_tensor(z_hat) else z_hat
    zq = torch.as_tensor(z_q, dtype=torch.float64) if not torch.is_tensor(z_q) else z_q
    batched = zh.ndim == 2
    dims_obs = tuple(range(1, obs.ndim)) if batched else None
    recon = ((obs - rec) ** 2).sum(dim=dims_obs) if batched else ((obs - rec) ** 2).sum()
    dim_z = 1 if batched else None
    codebook_term = ((zh.detach() - zq) ** 2).sum(dim=dim_z) if batched \
        else ((zh.detach() - zq) ** 2).sum()
    commit_term = ((zq.detach() - zh) ** 2).sum(dim=dim_z) if batched \
        else ((zq.detach() - zh) ** 2).sum()
    total = recon + codebook_term + commit_term
    return total.mean() if batched else total


def total_loss(vq: float, ce: float, lam: float) -> float:
    if lam < 0:
        raise InputError("lambda must be nonnegative")
    return vq + lam * ce


def train_vqvae(split, hp: VqVaeHyperParams, seed: int):
    """Train on split.train; returns (model, per-epoch loss log).

    Deterministic for a given seed (single-threaded torch).
    """
    if not split.train:
        raise TrainingError("empty training set")
    n_threads = torch.get_num_threads()
    torch.set_num_threads(1)
    try:
        return _train_vqvae(split, hp, seed)
    finally:
        torch.set_num_threads(n_threads)


def _train_vqvae(split, hp, seed):
    torch.manual_seed(seed)
    obs = np.stack([s.observation for s in split.train])
    labels = torch.as_tensor(
        np.array([s.maneuver_class for s in split.train]), dtype=torch.long
    )
    model = VqVaeModel(obs.shape[1:], codebook_size=hp.codebook_size,
                       latent_dim=hp.latent_dim).double()

    # feature-wise normalization over vehicles/time of the training set
    mean = obs.mean(axis=(0, 1, 3))[:, None]
    std = obs.std(axis=(0, 1, 3))[:, None]
    std[std < 1e-9] = 1.0
    model.obs_mean.copy_(torch.as_tensor(mean, dtype=torch.float64))
    model.obs_std.copy_(torch.as_tensor(std, dtype=torch.float64))

    x = model._flatten(model._normalize(torch.as_tensor(obs, dtype=torch.float64)))

    # data-dependent codebook init: spread entries over initial encodings
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        z0 = model.encoder(x)
        pick = torch.randint(0, z0.shape[0], (hp.codebook_size,), generator=gen)
        model.embedding.weight.copy_(
            z0[pick] + 0.01 * torch.randn(model.embedding.weight.shape,
                                          generator=gen, dtype=torch.float64)
        )

    opt = torch.optim.Adam(model.parameters(), lr=hp.learning_rate)
    ce_loss = nn.CrossEntropyLoss()
    n = x.shape[0]
    log = []
    model.train()
    for epoch in range(hp.epochs):
        order = torch.randperm(n, generator=gen)
        epoch_total = 0.0
        for b in range(0, n, hp.batch_size):
            idx = order[b:b + hp.batch_size]
            xb, yb = x[idx], labels[idx]
            z_hat = model.encoder(xb)
            with torch.no_grad():
                dist = torch.cdist(z_hat, model.embedding.weight) ** 2
                q_idx = torch.argmin(dist, dim=1)
            z_q = model.embedding(q_idx)
            z_st = z_hat + (z_q - z_hat).detach()  # straight-through
            rec = model._flatten(model.decoder(z_st).reshape(-1, *model.input_shape))
            loss_vq = vq_loss(xb, rec, z_hat, z_q)
            # classifier input equals z_q in value; the straight-through sum
            # lets the class signal shape both the codebook and the encoder
            z_cl = z_hat - z_hat.detach() + z_q
            loss_cl = ce_loss(model.classifier(z_cl), yb)
            loss = loss_vq + hp.lam * loss_cl
            if not torch.isfinite(loss):
                raise TrainingError(f"non-finite loss at epoch {epoch}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            epoch_total += loss.item() * len(idx)
        log.append(epoch_total / n)
    model.eval()
    return model, log


def assign_all(model: VqVaeModel, samples) -> list:
    """Codebook assignment (sample_index, q, z_hat) for every sample."""
    if not samples:
        return []
    z = encode(model, np.stack([s.observation for s in samples]))
    codebook = model.codebook
    out = []
    for i, z_hat in enumerate(z):
        res = quantize(z_hat, codebook)
        out.append((i, res.index, z_hat))
    return out


# ---------------------------------------------------------------------------
# Checkpointing


def save_vqvae(model: VqVaeModel, hp: VqVaeHyperParams, seed: int, loss_log,
               directory) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    state = model.state_dict()
    names = sorted(state.keys())
    with open(directory / "params.bin", "wb") as fh:
        for name in names:
            write_array(fh, state[name].detach().numpy())
    manifest = {
        "kind": "vqvae",
        "input_shape": list(model.input_shape),
        "codebook_size": int(model.embedding.weight.shape[0]),
        "latent_dim": int(model.embedding.weight.shape[1]),
        "lambda": hp.lam,
        "seed": seed,
        "epochs": hp.epochs,
        "param_names": names,
        "loss_log": [float(v) for v in loss_log],
    }
    with open(directory / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)


def load_vqvae(directory) -> VqVaeModel:
    directory = Path(directory)
    with open(directory / "manifest.json") as fh:
        manifest = json.load(fh)
    model = VqVaeModel(tuple(manifest["input_shape"]),
                       codebook_size=manifest["codebook_size"],
                       latent_dim=manifest["latent_dim"]).double()
    state = {}
    with open(directory / "params.bin", "rb") as fh:
        for name in manifest["param_names"]:
            state[name] = torch.as_tensor(read_array(fh))
    ref = model.state_dict()
    model.load_state_dict({k: v.reshape(ref[k].shape) for k, v in state.items()})
    model.eval()
    return model
