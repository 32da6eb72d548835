"""Sequence VAE mapping (T, D) pose windows to (n, d) latent tokens and back."""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np
import torch
from torch import nn

from headmotion.checkpoint import load_checkpoint
from headmotion.core import NormStats, PoseSequence, derive_seed, fit_length, portable_rng
from headmotion.nn import Block, timestep_embedding
from headmotion.training import fit, restore

LOGVAR_MIN, LOGVAR_MAX = -10.0, 10.0


@dataclass
class VaeConfig:
    D: int = 8
    T: int = 64
    n_latent: int = 4
    latent_dim: int = 16
    width: int = 64
    layers: int = 3
    heads: int = 4
    huber_delta: float = 1.0
    kl_weight: float = 1e-3
    lr: float = 2e-3
    lr_schedule: str = "cosine"
    warmup: int = 100
    batch_size: int = 32
    steps: int = 2000
    grad_clip: float = 1.0
    ckpt_every: int = 500
    seed: int = 0

    def validate(self) -> None:
        for f in fields(self):
            v = getattr(self, f.name)
            if f.name == "lr_schedule":
                if v not in ("constant", "cosine"):
                    raise ValueError(f"vae.lr_schedule must be 'constant' or 'cosine', got {v!r}")
            elif f.name in ("kl_weight", "lr", "steps", "ckpt_every", "grad_clip", "seed", "warmup"):
                if v < 0:
                    raise ValueError(f"vae.{f.name} must be >= 0, got {v}")
            elif v <= 0:
                raise ValueError(f"vae.{f.name} must be positive, got {v}")
        if self.n_latent * self.latent_dim >= self.T * self.D:
            raise ValueError("latent n*d must be smaller than T*D")
        if self.width % self.heads:
            raise ValueError("vae.width must be divisible by vae.heads")

    @classmethod
    def from_dict(cls, d: dict) -> "VaeConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown vae config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class LatentDistribution:
    mu: torch.Tensor
    logvar: torch.Tensor


def _position_table(T: int, width: int) -> torch.Tensor:
    # sinusoidal start for learned positions; random-small starts leave the decoder blind to time
    return timestep_embedding(torch.arange(T), width).to(torch.float32)


class PoseVAE(nn.Module):
    """Transformer encoder with learned latent queries; decoder with T learned position queries."""

    def __init__(self, cfg: VaeConfig):
        super().__init__()
        self.cfg = cfg
        w = cfg.width
        self.in_proj = nn.Linear(cfg.D, w)
        self.enc_pos = nn.Parameter(_position_table(cfg.T, w))
        self.latent_queries = nn.Parameter(0.02 * torch.randn(cfg.n_latent, w))
        self.encoder = nn.ModuleList([Block(w, cfg.heads) for _ in range(cfg.layers)])
        self.enc_norm = nn.LayerNorm(w)
        self.head = nn.Linear(w, 2 * cfg.latent_dim)
        nn.init.zeros_(self.head.weight)
        nn.init.zeros_(self.head.bias)

        self.latent_proj = nn.Linear(cfg.latent_dim, w)
        self.latent_pos = nn.Parameter(0.02 * torch.randn(cfg.n_latent, w))
        self.pos_queries = nn.Parameter(_position_table(cfg.T, w))
        self.decoder = nn.ModuleList([Block(w, cfg.heads, cross=True) for _ in range(cfg.layers)])
        self.dec_norm = nn.LayerNorm(w)
        self.out_proj = nn.Linear(w, cfg.D)

    def encode(self, x: torch.Tensor) -> LatentDistribution:
        """x: (B, T, D) normalized poses -> posterior over (B, n, d)."""
        if x.shape[-2:] != (self.cfg.T, self.cfg.D):
            raise ValueError(f"expected (..., {self.cfg.T}, {self.cfg.D}) input, got {tuple(x.shape)}")
        B = x.shape[0]
        h = self.in_proj(x) + self.enc_pos
        q = self.latent_queries.expand(B, -1, -1)
        h = torch.cat([q, h], dim=1)
        for blk in self.encoder:
            h = blk(h)
        out = self.head(self.enc_norm(h[:, : self.cfg.n_latent]))
        mu, logvar = out.chunk(2, dim=-1)
        return LatentDistribution(mu, logvar.clamp(LOGVAR_MIN, LOGVAR_MAX))

    def decode(self, z: torch.Tensor) -> torch.Tensor:
        """z: (B, n, d) -> (B, T, D) normalized poses."""
        if z.shape[-2:] != (self.cfg.n_latent, self.cfg.latent_dim):
            raise ValueError(
                f"expected (..., {self.cfg.n_latent}, {self.cfg.latent_dim}) latent, got {tuple(z.shape)}"
            )
        mem = self.latent_proj(z) + self.latent_pos
        h = self.pos_queries.expand(z.shape[0], -1, -1)
        for blk in self.decoder:
            h = blk(h, mem)
        return self.out_proj(self.dec_norm(h))

    def forward(self, x: torch.Tensor, noise: torch.Tensor | None = None):
        dist = self.encode(x)
        z = dist.mu if noise is None else reparameterize(dist, noise)
        return self.decode(z), dist


def reparameterize(dist: LatentDistribution, noise: torch.Tensor) -> torch.Tensor:
    if noise.shape != dist.mu.shape:
        raise ValueError(f"noise shape {tuple(noise.shape)} != latent shape {tuple(dist.mu.shape)}")
    return dist.mu + torch.exp(0.5 * dist.logvar) * noise


def huber_loss(a: torch.Tensor, b: torch.Tensor, delta: float = 1.0) -> torch.Tensor:
    """Elementwise-mean Huber loss with threshold ``delta``."""
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")
    if delta <= 0:
        raise ValueError("delta must be positive")
    e = (a - b).abs()
    return torch.where(e <= delta, 0.5 * e * e, delta * (e - 0.5 * delta)).mean()


def kl_to_standard_normal(dist: LatentDistribution) -> torch.Tensor:
    """KL(q || N(0, I)) per latent element, averaged over the batch."""
    mu, lv = dist.mu, dist.logvar
    per = 0.5 * (torch.exp(lv) + mu * mu - 1.0 - lv)
    return per.sum(dim=(-1, -2)).mean() / (mu.shape[-1] * mu.shape[-2])


def vae_loss(seq: torch.Tensor, recon: torch.Tensor, dist: LatentDistribution, beta: float, delta: float = 1.0):
    """Returns (total, huber reconstruction, KL)."""
    rec = huber_loss(seq, recon, delta)
    kl = kl_to_standard_normal(dist)
    return rec + beta * kl, rec, kl


def _as_batch(seqs, T: int, rng=None) -> torch.Tensor:
    arrs = [fit_length(s.values if isinstance(s, PoseSequence) else np.asarray(s), T, rng) for s in seqs]
    return torch.from_numpy(np.stack(arrs)).to(torch.float32)


def vae_encode(model: PoseVAE, seq: PoseSequence | np.ndarray) -> LatentDistribution:
    """Posterior for one normalized sequence (centre-cropped or edge-padded to T)."""
    with torch.no_grad():
        d = model.encode(_as_batch([seq], model.cfg.T).to(_dtype(model)))
    return LatentDistribution(d.mu[0], d.logvar[0])


def vae_decode(model: PoseVAE, z: torch.Tensor, fps: int = 25) -> PoseSequence:
    with torch.no_grad():
        out = model.decode(torch.as_tensor(z).to(_dtype(model))[None])[0]
    return PoseSequence(out.double().numpy(), fps=fps)


def encode_means(model: PoseVAE, seqs, batch: int = 256) -> torch.Tensor:
    """Posterior means of many normalized sequences, shape (N, n, d)."""
    outs = []
    with torch.no_grad():
        for i in range(0, len(seqs), batch):
            x = _as_batch(seqs[i : i + batch], model.cfg.T).to(_dtype(model))
            outs.append(model.encode(x).mu)
    return torch.cat(outs)


def _dtype(model: nn.Module) -> torch.dtype:
    return next(model.parameters()).dtype


def build_vae(cfg: VaeConfig) -> PoseVAE:
    cfg.validate()
    with torch.random.fork_rng():
        torch.manual_seed(derive_seed(cfg.seed, 0xAE))
        return PoseVAE(cfg)


def train_vae(
    dataset,
    cfg: VaeConfig,
    ckpt_dir: str | Path | None = None,
    resume: bool = False,
    stats: NormStats | None = None,
    model: PoseVAE | None = None,
) -> tuple[PoseVAE, list[float]]:
    """Train on normalized sequences (PoseSequence or (T', D) arrays).

    Batches, crop offsets and reparameterization noise are drawn from
    generators keyed by (seed, step).
    """
    if not dataset:
        raise ValueError("empty training set")
    cfg.validate()
    model = model if model is not None else build_vae(cfg)
    data = [s.values if isinstance(s, PoseSequence) else np.asarray(s, dtype=np.float64) for s in dataset]
    if any(a.shape[1] != cfg.D for a in data):
        raise ValueError(f"training sequences must have D={cfg.D}")

    def loss_at(step: int) -> torch.Tensor:
        rng = portable_rng(cfg.seed, step)
        idx = rng.integers(0, len(data), size=cfg.batch_size)
        x = _as_batch([data[i] for i in idx], cfg.T, rng).to(_dtype(model))
        g = torch.Generator().manual_seed(derive_seed(cfg.seed, step, 1))
        dist = model.encode(x)
        noise = torch.randn(dist.mu.shape, generator=g, dtype=torch.float64).to(dist.mu.dtype)
        recon = model.decode(reparameterize(dist, noise))
        return vae_loss(x, recon, dist, cfg.kl_weight, cfg.huber_delta)[0]

    meta = {"kind": "vae", "config": asdict(cfg)}
    if stats is not None:
        meta["norm_stats"] = stats.to_dict()
    history = fit(
        model,
        loss_at,
        steps=cfg.steps,
        lr=cfg.lr,
        meta=meta,
        ckpt_dir=ckpt_dir,
        ckpt_every=cfg.ckpt_every,
        grad_clip=cfg.grad_clip,
        lr_schedule=cfg.lr_schedule,
        warmup=cfg.warmup,
        resume=resume,
    )
    return model, history


def load_vae(directory: str | Path) -> tuple[PoseVAE, NormStats | None, dict]:
    tensors, manifest = load_checkpoint(directory)
    if manifest.get("kind") != "vae":
        raise ValueError(f"{directory} is not a VAE checkpoint")
    model = PoseVAE(VaeConfig.from_dict(manifest["config"]))
    restore(model, None, tensors, 0)
    model.eval()
    stats = NormStats.from_dict(manifest["norm_stats"]) if "norm_stats" in manifest else None
    return model, stats, manifest


def reconstruction_error(model: PoseVAE, seqs, delta: float = 1.0) -> float:
    """Huber(x, decode(encode-mean(x))) over a set of normalized sequences."""
    x = _as_batch(seqs, model.cfg.T).to(_dtype(model))
    with torch.no_grad():
        recon = model.decode(model.encode(x).mu)
    return float(huber_loss(x, recon, delta))
