"""Small epsilon-prediction video denoiser with an inspectable cross-attention layer.

Frames are denoised independently apart from a temporal-mean feature shared
at the probe resolution. The single cross-attention layer sits at the probe
resolution ``H / 2**num_down``; its softmax over tokens is what guidance reads.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, asdict
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .scheduler import LatentState, NoiseSchedule
from .text import TokenSequence, embed_tokens

log = logging.getLogger(__name__)

__all__ = [
    "DenoiserConfig",
    "ToyVideoDenoiser",
    "AttentionRecord",
    "denoise",
    "AnalyticGaussianDenoiser",
    "analytic_gaussian_denoiser",
    "train_toy_denoiser",
    "eps_mse",
    "save_checkpoint",
    "load_checkpoint",
    "TrainingDivergedError",
    "NonFiniteError",
]


class NonFiniteError(FloatingPointError):
    pass


class TrainingDivergedError(FloatingPointError):
    pass


@dataclass(frozen=True)
class DenoiserConfig:
    channels: int = 3
    width: int = 16
    embed_dim: int = 32
    attn_dim: int = 32
    time_dim: int = 64
    num_down: int = 2
    vocab_size: int = 64

    @property
    def probe_factor(self) -> int:
        return 2 ** self.num_down


@dataclass
class AttentionRecord:
    """Cross-attention maps ``(F, L, H', W')`` computed at timestep ``t``."""

    maps: torch.Tensor
    t: int

    @property
    def num_frames(self) -> int:
        return self.maps.shape[0]

    @property
    def resolution(self) -> tuple:
        return tuple(self.maps.shape[-2:])

    def token_map(self, j: int) -> torch.Tensor:
        return self.maps[:, j]


def timestep_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64) / half)
    args = t.to(torch.float64)[:, None] * freqs[None]
    return torch.cat([torch.cos(args), torch.sin(args)], dim=-1)


def _groups(c: int) -> int:
    for g in (8, 4, 2, 1):
        if c % g == 0:
            return g
    return 1


class ResBlock(nn.Module):
    def __init__(self, cin: int, cout: int, tdim: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(_groups(cin), cin)
        self.conv1 = nn.Conv2d(cin, cout, 3, padding=1)
        self.temb = nn.Linear(tdim, cout)
        self.norm2 = nn.GroupNorm(_groups(cout), cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.skip = nn.Conv2d(cin, cout, 1) if cin != cout else nn.Identity()

    def forward(self, x, temb):
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.temb(temb)[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return h + self.skip(x)


class CrossAttention(nn.Module):
    """Softmax(Q K^T / sqrt(d)) over tokens, per frame and location."""

    def __init__(self, channels: int, embed_dim: int, attn_dim: int):
        super().__init__()
        self.norm = nn.GroupNorm(_groups(channels), channels)
        self.to_q = nn.Conv2d(channels, attn_dim, 1, bias=False)   # W_Q
        self.to_k = nn.Linear(embed_dim, attn_dim, bias=False)     # W_K
        self.to_v = nn.Linear(embed_dim, attn_dim)
        self.to_out = nn.Conv2d(attn_dim, channels, 1)
        self.scale = 1.0 / math.sqrt(attn_dim)

    def forward(self, h, emb, key_mask, frames: int):
        # h: (B*F, c, H, W); emb: (B, L, E); key_mask: (B, L) True for real tokens
        bf, _, hh, ww = h.shape
        b = bf // frames
        q = self.to_q(self.norm(h)).reshape(b, frames, -1, hh, ww)
        k = self.to_k(emb)
        v = self.to_v(emb)
        scores = torch.einsum("bfdhw,bld->bflhw", q, k) * self.scale
        if key_mask is not None:
            scores = scores.masked_fill(~key_mask[:, None, :, None, None], float("-inf"))
        attn = scores.softmax(dim=2)
        out = torch.einsum("bflhw,bld->bfdhw", attn, v).reshape(bf, -1, hh, ww)
        return h + self.to_out(out), attn


class ToyVideoDenoiser(nn.Module):
    def __init__(self, config: DenoiserConfig = DenoiserConfig()):
        super().__init__()
        self.config = config
        c, w, td = config.channels, config.width, config.time_dim
        self.time_mlp = nn.Sequential(nn.Linear(td, td), nn.SiLU(), nn.Linear(td, td))
        self.inp = nn.Conv2d(c, w, 3, padding=1)
        self.enc = nn.ModuleList([ResBlock(w, w, td)])
        self.down = nn.ModuleList()
        ch = [w]
        cur = w
        for _ in range(config.num_down):
            self.down.append(nn.Conv2d(cur, cur * 2, 3, stride=2, padding=1))
            cur *= 2
            self.enc.append(ResBlock(cur, cur, td))
            ch.append(cur)
        self.temporal = nn.Conv2d(cur, cur, 1)
        self.attn = CrossAttention(cur, config.embed_dim, config.attn_dim)
        self.mid = ResBlock(cur, cur, td)
        self.up = nn.ModuleList()
        self.dec = nn.ModuleList()
        for skip_ch in reversed(ch[:-1]):
            self.up.append(nn.Conv2d(cur, skip_ch, 3, padding=1))
            self.dec.append(ResBlock(2 * skip_ch, skip_ch, td))
            cur = skip_ch
        self.out_norm = nn.GroupNorm(_groups(cur), cur)
        self.out = nn.Conv2d(cur, c, 3, padding=1)

    def forward(self, x, t, emb, key_mask=None):
        """x: (B, F, C, H, W); t: (B,) ints; emb: (B, L, E).

        Returns eps of x's shape and attention (B, F, L, H', W').
        """
        b, f, c, h, w = x.shape
        temb = self.time_mlp(timestep_embedding(t, self.config.time_dim).to(x.dtype))
        temb = temb.repeat_interleave(f, dim=0)
        hcur = self.enc[0](self.inp(x.reshape(b * f, c, h, w)), temb)
        skips = [hcur]
        for down, enc in zip(self.down, self.enc[1:]):
            hcur = enc(down(hcur), temb)
            skips.append(hcur)
        skips.pop()
        _, cc, hh, ww = hcur.shape
        tmean = hcur.reshape(b, f, cc, hh, ww).mean(dim=1)
        hcur = hcur + self.temporal(tmean).repeat_interleave(f, dim=0)
        hcur, attn = self.attn(hcur, emb, key_mask, f)
        hcur = self.mid(hcur, temb)
        for up, dec in zip(self.up, self.dec):
            hcur = up(F.interpolate(hcur, scale_factor=2, mode="nearest"))
            hcur = dec(torch.cat([hcur, skips.pop()], dim=1), temb)
        eps = self.out(F.silu(self.out_norm(hcur)))
        return eps.reshape(b, f, c, h, w), attn

    def embed(self, seq: TokenSequence) -> torch.Tensor:
        dtype = next(self.parameters()).dtype
        return embed_tokens(seq, self.config.embed_dim, self.config.vocab_size, dtype=dtype)


def _sample_of(x):
    return x.sample if isinstance(x, LatentState) else x


def denoise(x, t: int, emb: torch.Tensor, w) -> tuple:
    """Predict noise for a ``(F, C, H, W)`` sample and return its attention record.

    ``w`` is a :class:`ToyVideoDenoiser` or any callable with the same
    ``(x, t, emb) -> (eps, AttentionRecord)`` contract, such as the analytic
    Gaussian oracle.
    """
    xs = _sample_of(x)
    if not isinstance(w, ToyVideoDenoiser):
        return w(xs, t, emb)
    cfg = w.config
    if xs.ndim != 4 or xs.shape[1] != cfg.channels:
        raise ValueError(f"expected (F, {cfg.channels}, H, W) sample, got {tuple(xs.shape)}")
    pf = cfg.probe_factor
    if xs.shape[2] % pf or xs.shape[3] % pf:
        raise ValueError(f"spatial size {tuple(xs.shape[2:])} not divisible by probe factor {pf}")
    if emb.ndim != 2 or emb.shape[1] != cfg.embed_dim:
        raise ValueError(f"embedding must be (L, {cfg.embed_dim}), got {tuple(emb.shape)}")
    tt = torch.tensor([int(t)])
    eps, attn = w(xs[None], tt, emb[None])
    eps, attn = eps[0], attn[0]
    if not (torch.isfinite(eps).all() and torch.isfinite(attn).all()):
        raise NonFiniteError(f"non-finite activations at timestep {t}")
    return eps, AttentionRecord(attn, int(t))


class AnalyticGaussianDenoiser:
    """Exact ``E[eps | x_t]`` for data distributed as ``N(mean, diag(var))``."""

    def __init__(self, mean, var, schedule: NoiseSchedule):
        self.mean = torch.as_tensor(mean, dtype=torch.float64)
        self.var = torch.as_tensor(var, dtype=torch.float64)
        if torch.any(self.var <= 0):
            raise ValueError("variances must be positive")
        self.schedule = schedule

    def eps(self, x, t: int):
        a = self.schedule.abar(t)
        x = torch.as_tensor(x, dtype=torch.float64)
        return math.sqrt(1.0 - a) * (x - math.sqrt(a) * self.mean) / (a * self.var + 1.0 - a)

    def __call__(self, x, t: int, emb=None):
        eps = self.eps(_sample_of(x), t)
        L = 1 if emb is None else emb.shape[0]
        maps = torch.full((1, L, 1, 1), 1.0 / L, dtype=torch.float64)
        return eps, AttentionRecord(maps, int(t))


def analytic_gaussian_denoiser(mean, var, schedule: NoiseSchedule) -> AnalyticGaussianDenoiser:
    return AnalyticGaussianDenoiser(mean, var, schedule)


# --------------------------------------------------------------------------- training

def _batch_embeddings(model: ToyVideoDenoiser, seqs: Sequence[TokenSequence]):
    L = max(len(s) for s in seqs)
    emb = torch.zeros(len(seqs), L, model.config.embed_dim)
    mask = torch.zeros(len(seqs), L, dtype=torch.bool)
    for i, s in enumerate(seqs):
        emb[i, :len(s)] = model.embed(s)
        mask[i, :len(s)] = True
    return emb, mask


def _noisy_batch(videos, abar, rng: np.random.Generator, T: int, stratified: bool = True):
    b = videos.shape[0]
    if stratified:
        # one t per stratum of [1, T]; lowers loss variance between steps
        edges = np.linspace(1, T + 1, b + 1)
        t = np.floor(edges[:-1] + rng.random(b) * np.diff(edges)).astype(np.int64)
        t = np.clip(t, 1, T)
    else:
        t = rng.integers(1, T + 1, size=b)
    eps = torch.from_numpy(rng.standard_normal(videos.shape).astype(np.float32))
    a = torch.from_numpy(abar[t].astype(np.float32))[:, None, None, None, None]
    return a.sqrt() * videos + (1 - a).sqrt() * eps, torch.from_numpy(t), eps


def to_model_space(v):
    return 2.0 * v - 1.0


def from_model_space(x):
    return (x + 1.0) / 2.0


def train_toy_denoiser(dataset, schedule: NoiseSchedule, epochs: int, seed: int,
                       config: Optional[DenoiserConfig] = None, batch_size: int = 4,
                       lr: float = 2e-3, clip_frames: Optional[int] = None,
                       weighting: str = "uniform", max_weight: float = 20.0) -> ToyVideoDenoiser:
    """Fit the toy denoiser with the plain epsilon-MSE objective.

    ``dataset`` is a sequence of ``(video, TokenSequence)`` pairs with videos
    ``(F, C, H, W)`` in [0, 1]. Per-epoch mean losses are stored on the returned
    model as ``loss_history``. Deterministic for a given seed on one thread.
    """
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    shapes = {tuple(v.shape) for v, _ in dataset}
    if len(shapes) != 1:
        raise ValueError(f"videos must share one shape, got {sorted(shapes)}")
    config = config or DenoiserConfig()
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        model = ToyVideoDenoiser(config)
    if weighting not in ("uniform", "snr"):
        raise ValueError(f"unknown weighting {weighting!r}")
    model.loss_history = []
    if epochs <= 0:
        return model

    videos = torch.stack([to_model_space(torch.as_tensor(v, dtype=torch.float32)) for v, _ in dataset])
    seqs = [s for _, s in dataset]
    rng = np.random.default_rng(seed)
    opt = torch.optim.Adam(model.parameters(), lr=lr)
    n = len(dataset)
    steps_per_epoch = max(1, math.ceil(n / batch_size))
    total = steps_per_epoch * epochs
    sched = torch.optim.lr_scheduler.LambdaLR(
        opt, lambda s: min(1.0, (s + 1) / 50) * 0.5 * (1 + math.cos(math.pi * s / total)))
    model.train()
    for epoch in range(epochs):
        order = rng.permutation(n)
        losses = []
        for s in range(steps_per_epoch):
            idx = order[s * batch_size:(s + 1) * batch_size]
            if len(idx) == 0:
                continue
            batch = videos[idx]
            if clip_frames is not None and clip_frames < batch.shape[1]:
                start = int(rng.integers(0, batch.shape[1] - clip_frames + 1))
                batch = batch[:, start:start + clip_frames]
            xt, t, eps = _noisy_batch(batch, schedule.alphas_bar, rng, schedule.T)
            emb, mask = _batch_embeddings(model, [seqs[i] for i in idx])
            pred, _ = model(xt, t, emb, mask)
            per = (pred - eps).pow(2).mean(dim=(1, 2, 3, 4))
            if weighting == "snr":
                # (1 + 1/SNR) weights x0 error like v-prediction; capped for stability
                a = torch.from_numpy(schedule.alphas_bar[t.numpy()]).to(per.dtype)
                per = per * torch.clamp(1.0 + (1.0 - a) / a, max=max_weight)
            loss = per.mean()
            if not torch.isfinite(loss):
                raise TrainingDivergedError(
                    f"non-finite loss at epoch {epoch} step {s} (t={t.tolist()}, lr={sched.get_last_lr()})")
            opt.zero_grad()
            loss.backward()
            nn.utils.clip_grad_norm_(model.parameters(), 1.0)
            opt.step()
            sched.step()
            losses.append(loss.item())
        model.loss_history.append(float(np.mean(losses)))
        log.info("epoch %d loss %.5f", epoch, model.loss_history[-1])
    model.eval()
    return model


@torch.no_grad()
def eps_mse(model: ToyVideoDenoiser, dataset, schedule: NoiseSchedule, seed: int = 0,
            repeats: int = 4) -> float:
    """Mean epsilon-MSE on ``dataset`` with timesteps spread over the schedule."""
    rng = np.random.default_rng(seed)
    videos = torch.stack([to_model_space(torch.as_tensor(v, dtype=torch.float32)) for v, _ in dataset])
    seqs = [s for _, s in dataset]
    total, count = 0.0, 0
    for _ in range(repeats):
        for i in range(len(dataset)):
            xt, t, eps = _noisy_batch(videos[i:i + 1], schedule.alphas_bar, rng, schedule.T,
                                      stratified=False)
            emb, mask = _batch_embeddings(model, [seqs[i]])
            pred, _ = model(xt, t, emb, mask)
            total += F.mse_loss(pred, eps).item()
            count += 1
    return total / count


# --------------------------------------------------------------------------- checkpoints

def save_checkpoint(model: ToyVideoDenoiser, directory) -> None:
    """Write ``weights.bin`` (little-endian float32) and ``manifest.json``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    tensors, offset, chunks = {}, 0, []
    for name, p in model.state_dict().items():
        arr = p.detach().cpu().numpy().astype("<f4")
        tensors[name] = {"shape": list(arr.shape), "offset": offset}
        chunks.append(arr.tobytes(order="C"))
        offset += arr.nbytes
    (directory / "weights.bin").write_bytes(b"".join(chunks))
    manifest = {"dtype": "float32", "byteorder": "little", "model": asdict(model.config),
                "tensors": tensors}
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=1))


def load_checkpoint(directory) -> ToyVideoDenoiser:
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    raw = (directory / "weights.bin").read_bytes()
    model = ToyVideoDenoiser(DenoiserConfig(**manifest["model"]))
    state = {}
    for name, meta in manifest["tensors"].items():
        count = int(np.prod(meta["shape"], dtype=np.int64))
        arr = np.frombuffer(raw, dtype="<f4", count=count, offset=meta["offset"])
        state[name] = torch.from_numpy(arr.reshape(meta["shape"]).copy())
    model.load_state_dict(state)
    model.eval()
    return model
