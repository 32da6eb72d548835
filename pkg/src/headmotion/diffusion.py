"""Conditional latent diffusion over VAE motion latents, with classifier-free guidance."""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Callable

import numpy as np
import torch
from torch import nn

from headmotion.checkpoint import load_checkpoint
from headmotion.core import ConditionBundle, NormStats, PoseSequence, denormalize, derive_seed, portable_rng
from headmotion.nn import Block, timestep_embedding
from headmotion.training import fit, restore
from headmotion.vae import PoseVAE, encode_means

# (z_t, t, text, audio_tokens, null_mask) -> eps_hat
EpsFn = Callable[[torch.Tensor, torch.Tensor, torch.Tensor, torch.Tensor, torch.Tensor], torch.Tensor]

REFERENCE_STEPS = 1000


@dataclass
class DiffusionSchedule:
    """Index 0 holds the t=0 convention (beta 0, alpha_bar 1); steps are 1..T."""

    betas: np.ndarray

    def __post_init__(self) -> None:
        b = np.asarray(self.betas, dtype=np.float64)
        self.betas = np.concatenate([[0.0], b])
        self.alphas = 1.0 - self.betas
        self.alpha_bars = np.cumprod(self.alphas)

    @property
    def T(self) -> int:
        return len(self.betas) - 1


def make_schedule(T_diff: int, beta_min: float = 1e-4, beta_max: float = 0.02) -> DiffusionSchedule:
    """Linear beta schedule from ``beta_min`` (t=1) to ``beta_max`` (t=T_diff)."""
    if T_diff < 1:
        raise ValueError("T_diff must be >= 1")
    if not 0 < beta_min < beta_max < 1:
        raise ValueError(f"need 0 < beta_min < beta_max < 1, got {beta_min}, {beta_max}")
    if T_diff == 1:
        return DiffusionSchedule(np.array([beta_min]))
    return DiffusionSchedule(np.linspace(beta_min, beta_max, T_diff))


def scaled_beta_range(T_diff: int) -> tuple[float, float]:
    """1e-4..0.02 rescaled so a T_diff-step chain adds the noise of a 1000-step one."""
    scale = REFERENCE_STEPS / T_diff
    return 1e-4 * scale, min(0.02 * scale, 0.999)


def diffuse_with_alpha_bar(z0, alpha_bar, eps):
    return np.sqrt(alpha_bar) * z0 + np.sqrt(1.0 - alpha_bar) * eps


def forward_diffuse(z0: torch.Tensor, t, eps: torch.Tensor, schedule: DiffusionSchedule) -> torch.Tensor:
    """z_t = sqrt(abar_t) z0 + sqrt(1 - abar_t) eps; ``t`` is an int or a (B,) tensor."""
    if z0.shape != eps.shape:
        raise ValueError("z0 and eps shapes differ")
    tt = torch.as_tensor(t)
    if (tt < 1).any() or (tt > schedule.T).any():
        raise ValueError(f"t must lie in [1, {schedule.T}]")
    ab = torch.as_tensor(schedule.alpha_bars, dtype=torch.float64)[tt].to(z0.dtype)
    ab = ab.reshape(ab.shape + (1,) * (z0.dim() - ab.dim()))
    return ab.sqrt() * z0 + (1.0 - ab).sqrt() * eps


def cfg_combine(eps_cond, eps_uncond, s: float):
    if eps_cond.shape != eps_uncond.shape:
        raise ValueError("conditional and unconditional predictions differ in shape")
    return s * eps_cond + (1 - s) * eps_uncond


@dataclass
class DenoiserConfig:
    n_latent: int = 4
    latent_dim: int = 16
    d_model: int = 64
    layers: int = 4
    heads: int = 4
    time_dim: int = 64
    text_dim: int = 512
    audio_dim: int = 768
    audio_tokens: int = 8
    p_uncond: float = 0.1
    T_diff: int = 100
    beta_min: float | None = None
    beta_max: float | None = None
    use_sampled_z: bool = False
    audio_noise_aug: float = 0.1
    lr: float = 5e-4
    batch_size: int = 64
    steps: int = 5000
    grad_clip: float = 1.0
    ckpt_every: int = 1000
    seed: int = 0

    def validate(self) -> None:
        for name in ("n_latent", "latent_dim", "d_model", "layers", "heads", "time_dim", "text_dim",
                     "audio_dim", "audio_tokens", "T_diff", "batch_size"):
            if getattr(self, name) <= 0:
                raise ValueError(f"pld.{name} must be positive")
        if self.layers % 2:
            raise ValueError("pld.layers must be even (layers are paired by long skips)")
        if self.d_model % self.heads:
            raise ValueError("pld.d_model must be divisible by pld.heads")
        if not 0 <= self.p_uncond <= 1:
            raise ValueError("pld.p_uncond must lie in [0, 1]")
        for name in ("lr", "steps", "ckpt_every", "grad_clip", "seed", "audio_noise_aug"):
            if getattr(self, name) < 0:
                raise ValueError(f"pld.{name} must be >= 0")
        self.schedule()

    def schedule(self) -> DiffusionSchedule:
        lo, hi = scaled_beta_range(self.T_diff)
        return make_schedule(
            self.T_diff,
            lo if self.beta_min is None else self.beta_min,
            hi if self.beta_max is None else self.beta_max,
        )

    @classmethod
    def from_dict(cls, d: dict) -> "DenoiserConfig":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown pld config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class SamplerConfig:
    guidance: float = 7.5
    kind: str = "ancestral"
    steps: int | None = None
    seed: int = 0

    def validate(self, T_diff: int | None = None) -> None:
        if self.guidance < 0:
            raise ValueError("guidance scale must be >= 0")
        if self.kind not in ("ancestral", "deterministic"):
            raise ValueError(f"unknown sampler kind {self.kind!r}")
        if self.steps is not None and (self.steps < 1 or (T_diff is not None and self.steps > T_diff)):
            raise ValueError(f"sampler steps must lie in [1, {T_diff}]")


class Denoiser(nn.Module):
    """Token transformer predicting eps from [time | text | audio x k | latent x n].

    Layer i's output is concatenated into layer L-1-i (long skips).
    """

    def __init__(self, cfg: DenoiserConfig):
        super().__init__()
        self.cfg = cfg
        w = cfg.d_model
        self.latent_in = nn.Linear(cfg.latent_dim, w)
        self.time_mlp = nn.Sequential(nn.Linear(cfg.time_dim, w), nn.SiLU(), nn.Linear(w, w))
        self.text_proj = nn.Linear(cfg.text_dim, w)
        self.audio_proj = nn.Linear(cfg.audio_dim, w)
        self.null_token = nn.Parameter(0.02 * torch.randn(w))
        n_tok = 2 + cfg.audio_tokens + cfg.n_latent
        self.pos = nn.Parameter(0.02 * torch.randn(n_tok, w))
        self.blocks = nn.ModuleList([Block(w, cfg.heads) for _ in range(cfg.layers)])
        self.skip_proj = nn.ModuleList([nn.Linear(2 * w, w) for _ in range(cfg.layers // 2)])
        self.out_norm = nn.LayerNorm(w)
        self.out = nn.Linear(w, cfg.latent_dim)
        self.register_buffer("latent_mean", torch.zeros(cfg.n_latent, cfg.latent_dim))
        self.register_buffer("latent_scale", torch.ones(()))

    def condition_tokens(self, text: torch.Tensor, audio: torch.Tensor, null: torch.Tensor) -> torch.Tensor:
        cond = torch.cat([self.text_proj(text)[:, None], self.audio_proj(audio)], dim=1)
        return torch.where(null[:, None, None], self.null_token.expand_as(cond), cond)

    def forward(self, z_t, t, text, audio, null) -> torch.Tensor:
        B = z_t.shape[0]
        temb = self.time_mlp(timestep_embedding(t, self.cfg.time_dim).to(z_t.dtype))
        h = torch.cat([temb[:, None], self.condition_tokens(text, audio, null), self.latent_in(z_t)], dim=1)
        h = h + self.pos
        half = self.cfg.layers // 2
        skips = []
        for blk in self.blocks[:half]:
            h = blk(h)
            skips.append(h)
        for proj, blk in zip(self.skip_proj, self.blocks[half:]):
            h = blk(proj(torch.cat([h, skips.pop()], dim=-1)))
        return self.out(self.out_norm(h[:, -self.cfg.n_latent :])).reshape(B, self.cfg.n_latent, -1)


def resample_audio(audio: np.ndarray, k: int) -> np.ndarray:
    """Linearly interpolate a (T_a, E) feature track to k evenly spaced tokens."""
    audio = np.asarray(audio, dtype=np.float64)
    if audio.shape[0] == 1:
        return np.repeat(audio, k, axis=0)
    dst = np.linspace(0, audio.shape[0] - 1, k)
    lo = np.floor(dst).astype(int).clip(0, audio.shape[0] - 2)
    frac = (dst - lo)[:, None]
    return (1 - frac) * audio[lo] + frac * audio[lo + 1]


def condition_arrays(conds: list[ConditionBundle], cfg: DenoiserConfig):
    """Stack bundles into (text (B, E_t), audio tokens (B, k, E_a), null mask (B,)) tensors."""
    B = len(conds)
    text = np.zeros((B, cfg.text_dim), dtype=np.float32)
    audio = np.zeros((B, cfg.audio_tokens, cfg.audio_dim), dtype=np.float32)
    null = np.zeros(B, dtype=bool)
    for i, c in enumerate(conds):
        if c.is_null:
            null[i] = True
            continue
        if c.text_embedding.shape[0] != cfg.text_dim:
            raise ValueError(f"text embedding has dim {c.text_embedding.shape[0]}, model expects {cfg.text_dim}")
        if c.audio_features.shape[1] != cfg.audio_dim:
            raise ValueError(f"audio features have dim {c.audio_features.shape[1]}, model expects {cfg.audio_dim}")
        text[i] = c.text_embedding
        audio[i] = resample_audio(c.audio_features, cfg.audio_tokens)
    return torch.from_numpy(text), torch.from_numpy(audio), torch.from_numpy(null)


def denoiser_forward(model: Denoiser, z_t: torch.Tensor, t: int, c: ConditionBundle) -> torch.Tensor:
    """eps prediction for a single (n, d) latent."""
    text, audio, null = condition_arrays([c], model.cfg)
    dt = next(model.parameters()).dtype
    with torch.no_grad():
        out = model(z_t[None].to(dt), torch.tensor([t]), text.to(dt), audio.to(dt), null)
    return out[0]


def pld_loss_latent(
    eps_fn: EpsFn,
    z0: torch.Tensor,
    text: torch.Tensor,
    audio: torch.Tensor,
    null: torch.Tensor,
    schedule: DiffusionSchedule,
    g: torch.Generator,
    p_uncond: float,
) -> torch.Tensor:
    """Mean squared eps error with t ~ U{1..T}, eps ~ N(0, I) and condition dropout."""
    B = z0.shape[0]
    t = torch.randint(1, schedule.T + 1, (B,), generator=g)
    eps = torch.randn(z0.shape, generator=g, dtype=torch.float64).to(z0.dtype)
    drop = torch.rand(B, generator=g, dtype=torch.float64) < p_uncond
    z_t = forward_diffuse(z0, t, eps, schedule)
    pred = eps_fn(z_t, t, text, audio, null | drop)
    return ((eps - pred) ** 2).mean()


def pld_loss(model: Denoiser, vae: PoseVAE, batch, schedule: DiffusionSchedule, g: torch.Generator) -> torch.Tensor:
    """Loss on a batch of (normalized PoseSequence, ConditionBundle) pairs; the VAE stays frozen."""
    if not batch:
        raise ValueError("empty batch")
    dt = next(model.parameters()).dtype
    mu = encode_means(vae, [p for p, _ in batch]).to(dt)
    z0 = (mu - model.latent_mean) / model.latent_scale
    text, audio, null = condition_arrays([c for _, c in batch], model.cfg)
    return pld_loss_latent(model, z0, text.to(dt), audio.to(dt), null, schedule, g, model.cfg.p_uncond)


def _timesteps(T: int, steps: int | None) -> list[int]:
    if steps is None or steps >= T:
        return list(range(T, 0, -1))
    ts = np.unique(np.round(np.linspace(1, T, steps)).astype(int))
    return [int(t) for t in ts[::-1]]


def sample_with(
    eps_fn: EpsFn,
    schedule: DiffusionSchedule,
    cond: tuple[torch.Tensor, torch.Tensor, torch.Tensor],
    cfg: SamplerConfig,
    generators: list[torch.Generator],
    shape: tuple[int, int],
    z_init: torch.Tensor | None = None,
    skip_redundant: bool = True,
    dtype: torch.dtype = torch.float32,
) -> torch.Tensor:
    """Batched guided ancestral (or noise-free) sampling; one generator per batch item.

    With ``skip_redundant`` the unconditional pass is skipped at s=1 and the
    conditional pass at s=0.
    """
    cfg.validate(schedule.T)
    text, audio, null = cond
    B = text.shape[0]
    s = cfg.guidance

    def draw() -> torch.Tensor:
        return torch.stack([torch.randn(shape, generator=g, dtype=torch.float64) for g in generators]).to(dtype)

    z = draw() if z_init is None else z_init.to(dtype)
    ts = _timesteps(schedule.T, cfg.steps)
    all_null = torch.ones(B, dtype=torch.bool)
    for k, t in enumerate(ts):
        t_prev = ts[k + 1] if k + 1 < len(ts) else 0
        ab_t, ab_prev = schedule.alpha_bars[t], schedule.alpha_bars[t_prev]
        alpha = ab_t / ab_prev
        beta = 1.0 - alpha
        tb = torch.full((B,), t, dtype=torch.long)
        with torch.no_grad():
            if skip_redundant and s == 1:
                eps = eps_fn(z, tb, text, audio, null)
            elif skip_redundant and s == 0:
                eps = eps_fn(z, tb, text, audio, all_null)
            else:
                e_c = eps_fn(z, tb, text, audio, null)
                e_u = eps_fn(z, tb, text, audio, all_null)
                eps = cfg_combine(e_c, e_u, s)
        z = (z - (beta / np.sqrt(1.0 - ab_t)) * eps) / np.sqrt(alpha)
        if cfg.kind == "ancestral" and t_prev > 0:
            z = z + np.sqrt(beta) * draw()
        if not torch.isfinite(z).all():
            raise FloatingPointError(f"sampler state became non-finite at step t={t}")
    return z


def sample(
    model: Denoiser,
    schedule: DiffusionSchedule,
    c: ConditionBundle,
    cfg: SamplerConfig,
    skip_redundant: bool = True,
) -> torch.Tensor:
    """One (n, d) latent in the model's standardized latent space."""
    dt = next(model.parameters()).dtype
    text, audio, null = condition_arrays([c], model.cfg)
    g = torch.Generator().manual_seed(cfg.seed)
    z = sample_with(
        model, schedule, (text.to(dt), audio.to(dt), null), cfg, [g],
        (model.cfg.n_latent, model.cfg.latent_dim), skip_redundant=skip_redundant, dtype=dt,
    )
    return z[0]


def build_denoiser(cfg: DenoiserConfig) -> Denoiser:
    cfg.validate()
    with torch.random.fork_rng():
        torch.manual_seed(derive_seed(cfg.seed, 0xD1F))
        return Denoiser(cfg)


def train_pld(
    vae: PoseVAE,
    dataset,
    cfg: DenoiserConfig,
    ckpt_dir: str | Path | None = None,
    resume: bool = False,
    model: Denoiser | None = None,
) -> tuple[Denoiser, list[float]]:
    """Train the denoiser on frozen-VAE latents of (normalized pose, condition) pairs."""
    if not dataset:
        raise ValueError("empty training set")
    cfg.validate()
    if (cfg.n_latent, cfg.latent_dim) != (vae.cfg.n_latent, vae.cfg.latent_dim):
        raise ValueError("denoiser latent shape does not match the VAE")
    schedule = cfg.schedule()
    model = model if model is not None else build_denoiser(cfg)
    vae.eval()
    poses = [p for p, _ in dataset]
    mu = encode_means(vae, poses)
    with torch.no_grad():
        x = torch.from_numpy(np.stack([p.values if isinstance(p, PoseSequence) else p for p in poses]))
        logvar = vae.encode(x.to(torch.float32)).logvar if cfg.use_sampled_z else None
    if not resume:
        model.latent_mean.copy_(mu.mean(dim=0))
        model.latent_scale.copy_((mu - mu.mean(dim=0)).std(unbiased=False).clamp_min(1e-6))
    text, audio, null = condition_arrays([c for _, c in dataset], cfg)

    def loss_at(step: int) -> torch.Tensor:
        idx = torch.from_numpy(portable_rng(cfg.seed, step).integers(0, len(dataset), size=cfg.batch_size))
        g = torch.Generator().manual_seed(derive_seed(cfg.seed, step, 2))
        z0 = mu[idx]
        if cfg.use_sampled_z:
            z0 = z0 + torch.exp(0.5 * logvar[idx]) * torch.randn(z0.shape, generator=g)
        z0 = (z0 - model.latent_mean) / model.latent_scale
        a = audio[idx]
        if cfg.audio_noise_aug > 0:
            # fresh per-step noise hides the fixed noise pattern each training clip carries
            a = a + cfg.audio_noise_aug * torch.randn(a.shape, generator=g)
        return pld_loss_latent(model, z0, text[idx], a, null[idx], schedule, g, cfg.p_uncond)

    history = fit(
        model,
        loss_at,
        steps=cfg.steps,
        lr=cfg.lr,
        meta={"kind": "pld", "config": asdict(cfg)},
        ckpt_dir=ckpt_dir,
        ckpt_every=cfg.ckpt_every,
        grad_clip=cfg.grad_clip,
        resume=resume,
    )
    return model, history


def load_pld(directory: str | Path) -> tuple[Denoiser, dict]:
    tensors, manifest = load_checkpoint(directory)
    if manifest.get("kind") != "pld":
        raise ValueError(f"{directory} is not a diffusion checkpoint")
    model = Denoiser(DenoiserConfig.from_dict(manifest["config"]))
    restore(model, None, tensors, 0)
    model.eval()
    return model, manifest


def generate_latents(
    model: Denoiser,
    schedule: DiffusionSchedule,
    conds: list[ConditionBundle],
    cfg: SamplerConfig,
    skip_redundant: bool = True,
) -> torch.Tensor:
    """Sample one latent per condition with seeds derived from ``cfg.seed``; raw VAE latent scale."""
    dt = next(model.parameters()).dtype
    text, audio, null = condition_arrays(conds, model.cfg)
    gens = [torch.Generator().manual_seed(derive_seed(cfg.seed, i)) for i in range(len(conds))]
    z = sample_with(
        model, schedule, (text.to(dt), audio.to(dt), null), cfg, gens,
        (model.cfg.n_latent, model.cfg.latent_dim), skip_redundant=skip_redundant, dtype=dt,
    )
    return z * model.latent_scale + model.latent_mean


def generate_poses(
    vae: PoseVAE,
    model: Denoiser,
    schedule: DiffusionSchedule,
    c: ConditionBundle | list[ConditionBundle],
    count: int,
    cfg: SamplerConfig,
    stats: NormStats | None,
    fps: int = 25,
) -> list[PoseSequence]:
    """Decode ``count`` guided samples per condition and map them back to pose units."""
    if count < 1:
        raise ValueError("count must be >= 1")
    conds = [c] if isinstance(c, ConditionBundle) else list(c)
    expanded = [cc for cc in conds for _ in range(count)]
    z = generate_latents(model, schedule, expanded, cfg)
    with torch.no_grad():
        out = vae.decode(z.to(next(vae.parameters()).dtype)).double().numpy()
    seqs = [PoseSequence(o, fps=fps) for o in out]
    return [denormalize(s, stats) for s in seqs] if stats is not None else seqs
