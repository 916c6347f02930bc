"""Torch model wrapper: noise predictor, latent decoder, image encoder.

Checkpoints are self-describing torch files holding a config dict and a
state dict. ``make_tiny_checkpoint`` writes a small randomly initialized
model of the same architecture family, which is enough to exercise the
whole serving path end to end on CPU.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

CHECKPOINT_FORMAT = "pfbridge-tiny-v1"


@dataclass(frozen=True)
class ModelConfig:
    channels: int = 4
    native_h: int = 16
    native_w: int = 16
    hidden: int = 32
    cond_dim: int = 16
    decode_factor: int = 8


def timestep_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    """Sinusoidal embedding of integer timesteps, shape (b, dim)."""
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0)
                      * torch.arange(half, dtype=torch.float32) / half)
    angles = t.float()[:, None] * freqs[None, :]
    return torch.cat([torch.sin(angles), torch.cos(angles)], dim=1)


class EpsNet(nn.Module):
    """Conv noise predictor conditioned on timestep and prompt embedding."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.conv_in = nn.Conv2d(cfg.channels, cfg.hidden, 3, padding=1)
        self.conv_mid = nn.Conv2d(cfg.hidden, cfg.hidden, 3, padding=1)
        self.conv_out = nn.Conv2d(cfg.hidden, cfg.channels, 3, padding=1)
        self.time_proj = nn.Linear(cfg.cond_dim, cfg.hidden)
        self.cond_proj = nn.Linear(cfg.cond_dim, cfg.hidden)
        self.cond_dim = cfg.cond_dim

    def forward(self, x: torch.Tensor, t: torch.Tensor,
                cond: torch.Tensor) -> torch.Tensor:
        emb = timestep_embedding(t, self.cond_dim)
        h = self.conv_in(x)
        h = h + self.time_proj(emb)[:, :, None, None]
        h = h + self.cond_proj(cond)[:, :, None, None]
        h = F.silu(self.conv_mid(F.silu(h)))
        return self.conv_out(h)


class Decoder(nn.Module):
    """Latent to RGB at a fixed spatial factor via pixel shuffle."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        f = cfg.decode_factor
        self.net = nn.Sequential(
            nn.Conv2d(cfg.channels, cfg.hidden, 3, padding=1),
            nn.SiLU(),
            nn.Conv2d(cfg.hidden, 3 * f * f, 1),
            nn.PixelShuffle(f),
        )

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.net(z))


class Encoder(nn.Module):
    """RGB back to the latent grid (lossy, shape-exact)."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        f = cfg.decode_factor
        self.net = nn.Sequential(
            nn.PixelUnshuffle(f),
            nn.Conv2d(3 * f * f, cfg.hidden, 1),
            nn.SiLU(),
            nn.Conv2d(cfg.hidden, cfg.channels, 3, padding=1),
        )

    def forward(self, image: torch.Tensor) -> torch.Tensor:
        return self.net(image)


class BridgeModel:
    """Eval-mode bundle of the three networks plus conditioning embeddings.

    Prompt embeddings derive deterministically from the text hash, so the
    same registered text always conditions identically.
    """

    def __init__(self, cfg: ModelConfig, eps_net: EpsNet, decoder: Decoder,
                 encoder: Encoder, device: str = "cpu"):
        self.cfg = cfg
        self.device = torch.device(device)
        self.eps_net = eps_net.to(self.device).eval()
        self.decoder = decoder.to(self.device).eval()
        self.encoder = encoder.to(self.device).eval()
        self._embeddings: dict[str, torch.Tensor] = {}

    def conditioning_embedding(self, text: str) -> torch.Tensor:
        cached = self._embeddings.get(text)
        if cached is None:
            digest = hashlib.sha256(text.encode("utf-8")).digest()
            gen = np.random.Generator(np.random.PCG64(
                int.from_bytes(digest[:8], "little")))
            vec = gen.standard_normal(self.cfg.cond_dim).astype(np.float32)
            cached = torch.from_numpy(vec).to(self.device)
            self._embeddings[text] = cached
        return cached

    @torch.no_grad()
    def denoise(self, batch: np.ndarray, t: int,
                texts: list[str]) -> np.ndarray:
        """One epsilon per (patch, conditioning), patch-major, as float32."""
        x = torch.from_numpy(np.ascontiguousarray(batch)).to(self.device)
        b = x.shape[0]
        k = len(texts)
        rows = x.repeat_interleave(k, dim=0)
        cond = torch.stack([self.conditioning_embedding(text)
                            for text in texts])
        cond = cond.repeat(b, 1)
        times = torch.full((b * k,), int(t), dtype=torch.long,
                           device=self.device)
        eps = self.eps_net(rows, times, cond)
        return eps.cpu().numpy().astype(np.float32)

    @torch.no_grad()
    def decode(self, z: np.ndarray) -> np.ndarray:
        x = torch.from_numpy(np.ascontiguousarray(z))[None].to(self.device)
        rgb = self.decoder(x)[0]
        return np.clip(np.rint(rgb.cpu().numpy() * 255.0), 0,
                       255).astype(np.uint8)

    @torch.no_grad()
    def encode(self, image: np.ndarray) -> np.ndarray:
        x = torch.from_numpy(image.astype(np.float32) / 255.0)[None]
        z = self.encoder(x.to(self.device))[0]
        return z.cpu().numpy().astype(np.float32)


def save_checkpoint(path, cfg: ModelConfig, eps_net: EpsNet, decoder: Decoder,
                    encoder: Encoder) -> None:
    torch.save({
        "format": CHECKPOINT_FORMAT,
        "config": cfg.__dict__,
        "eps_net": eps_net.state_dict(),
        "decoder": decoder.state_dict(),
        "encoder": encoder.state_dict(),
    }, path)


def load_checkpoint(path, device: str = "cpu") -> BridgeModel:
    blob = torch.load(path, map_location="cpu", weights_only=True)
    if blob.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path} is not a {CHECKPOINT_FORMAT} checkpoint")
    cfg = ModelConfig(**blob["config"])
    eps_net = EpsNet(cfg)
    eps_net.load_state_dict(blob["eps_net"])
    decoder = Decoder(cfg)
    decoder.load_state_dict(blob["decoder"])
    encoder = Encoder(cfg)
    encoder.load_state_dict(blob["encoder"])
    return BridgeModel(cfg, eps_net, decoder, encoder, device=device)


def make_tiny_checkpoint(path, channels: int = 4, native_h: int = 16,
                         native_w: int = 16, seed: int = 0) -> ModelConfig:
    """Write a small random-weight checkpoint for end-to-end serving tests."""
    cfg = ModelConfig(channels=channels, native_h=native_h, native_w=native_w)
    torch.manual_seed(seed)
    eps_net = EpsNet(cfg)
    decoder = Decoder(cfg)
    encoder = Encoder(cfg)
    # keep predictions mild so long guided denoising chains stay tame
    with torch.no_grad():
        eps_net.conv_out.weight.mul_(0.1)
        eps_net.conv_out.bias.zero_()
    save_checkpoint(path, cfg, eps_net, decoder, encoder)
    return cfg
