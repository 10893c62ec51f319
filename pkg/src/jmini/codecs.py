"""Decoupled visual encoders.

Understanding path: a patch-embedding transformer producing a grid of
semantic features.  Generation path: a VQ tokenizer (strided conv encoder,
codebook, transposed-conv decoder) mapping images to grids of discrete ids.

Images cross this module as ``(H, W, 3)`` numpy arrays or ``(B, 3, H, W)``
tensors with values in ``[0, 1]``.
"""

from __future__ import annotations

import math

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from jmini.config import CodecConfig
from jmini.layers import Adaptor, Block, RMSNorm  # noqa: F401  (adaptors live with the codecs they serve)


class FreezingViolation(RuntimeError):
    """A frozen component was asked to train."""


def to_batch(img, side: int | None = None) -> torch.Tensor:
    """``(H, W, 3)`` array or ``(B, H, W, 3)`` array or ``(B, 3, H, W)`` tensor -> ``(B, 3, H, W)``."""
    if isinstance(img, torch.Tensor) and img.ndim == 4 and img.shape[1] == 3:
        t = img
    else:
        a = torch.as_tensor(np.asarray(img, np.float32))
        if a.ndim == 3:
            a = a[None]
        if a.ndim != 4 or a.shape[-1] != 3:
            raise ValueError(f"expected (H, W, 3) image(s), got shape {tuple(a.shape)}")
        t = a.permute(0, 3, 1, 2)
    if side is not None and tuple(t.shape[-2:]) != (side, side):
        raise ValueError(f"expected {side}x{side} image, got {tuple(t.shape[-2:])}")
    return t


def to_image(t: torch.Tensor) -> np.ndarray:
    """``(3, H, W)`` tensor -> ``(H, W, 3)`` float32 array."""
    return t.detach().permute(1, 2, 0).to(torch.float32).numpy()


def flatten(grid):
    """Row-major flatten of a ``(gh, gw, C)`` grid into ``(gh * gw, C)``."""
    gh, gw = grid.shape[:2]
    return grid.reshape(gh * gw, *grid.shape[2:])


def unflatten(seq, grid_h: int, grid_w: int):
    if len(seq) != grid_h * grid_w:
        raise ValueError(f"{len(seq)} items cannot fill a {grid_h}x{grid_w} grid")
    return seq.reshape(grid_h, grid_w, *seq.shape[1:])


class UndEncoder(nn.Module):
    """Small semantic encoder: patch embedding, learned positions, bidirectional blocks."""

    def __init__(self, cfg: CodecConfig):
        super().__init__()
        self.cfg = cfg
        fd = cfg.und_feat_dim
        self.patch = nn.Conv2d(3, fd, cfg.patch_size, stride=cfg.patch_size)
        self.pos = nn.Parameter(torch.randn(cfg.und_tokens, fd) * 0.02)
        self.blocks = nn.ModuleList(Block(fd, cfg.und_heads, 2 * fd) for _ in range(cfg.und_layers))
        self.norm = RMSNorm(fd)

    def patch_embed(self, x: torch.Tensor) -> torch.Tensor:
        """``(B, 3, S, S)`` -> ``(B, g, g, F)`` patch features before positional terms."""
        return self.patch(x).permute(0, 2, 3, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """``(B, 3, S, S)`` -> flattened ``(B, g*g, F)`` features."""
        s = self.cfg.image_side
        if tuple(x.shape[-2:]) != (s, s):
            raise ValueError(f"understanding encoder expects {s}x{s} images, got {tuple(x.shape[-2:])}")
        h = self.patch_embed(x).flatten(1, 2) + self.pos
        for blk in self.blocks:
            h = blk(h)
        return self.norm(h)

    def encode_grid(self, img) -> torch.Tensor:
        """Single image -> ``(g, g, F)`` FeatureGrid."""
        g = self.cfg.und_grid
        return unflatten(self(to_batch(img, self.cfg.image_side).to(self.pos.dtype))[0], g, g)


class VQCodebook(nn.Module):
    """``K x D`` table of code vectors plus per-code hit counters."""

    def __init__(self, size: int, dim: int):
        super().__init__()
        if size <= 0:
            raise ValueError("codebook must have at least one code")
        self.codes = nn.Parameter(torch.randn(size, dim) / math.sqrt(dim))
        self.register_buffer("usage", torch.zeros(size, dtype=torch.int64), persistent=False)

    @property
    def size(self) -> int:
        return self.codes.shape[0]

    @property
    def dim(self) -> int:
        return self.codes.shape[1]

    def utilization(self) -> float:
        return float((self.usage > 0).float().mean())

    def reset_usage(self):
        self.usage.zero_()


def nearest_codes(latents: torch.Tensor, codes: torch.Tensor, chunk: int = 4096) -> torch.Tensor:
    """Index of the nearest code (squared Euclidean) per latent row; ties go to the lowest index."""
    out = []
    for start in range(0, latents.shape[0], chunk):
        z = latents[start:start + chunk]
        d = (z[:, None, :] - codes[None, :, :]).pow(2).sum(-1)
        # argmin returns the first minimal index
        out.append(d.argmin(dim=1))
    if not out:
        return torch.zeros(0, dtype=torch.int64)
    return torch.cat(out)


def quantize(latents: torch.Tensor, cb: VQCodebook, count: bool = True):
    """Map ``(..., D)`` latents to ``(ids, quantized)`` with ``quantized = codes[ids]``."""
    if cb.size == 0:
        raise ValueError("empty codebook")
    if latents.shape[-1] != cb.dim:
        raise ValueError(f"latent width {latents.shape[-1]} != code dim {cb.dim}")
    flat = latents.reshape(-1, cb.dim)
    with torch.no_grad():
        ids = nearest_codes(flat, cb.codes)
        if count:
            cb.usage += torch.bincount(ids, minlength=cb.size).to(cb.usage.device)
    ids = ids.reshape(latents.shape[:-1])
    return ids, F.embedding(ids, cb.codes)


class VQTokenizer(nn.Module):
    """Strided conv encoder + codebook + transposed-conv decoder."""

    def __init__(self, cfg: CodecConfig, codebook_size: int):
        super().__init__()
        self.cfg = cfg
        h, d = cfg.vq_hidden, cfg.code_dim
        n_down = int(math.log2(cfg.downsample_factor))
        widths = [3] + [max(h // 2 ** (n_down - 1 - i), 4) for i in range(n_down)]
        enc = []
        for a, b in zip(widths[:-1], widths[1:]):
            enc += [nn.Conv2d(a, b, 4, stride=2, padding=1), nn.SiLU()]
        enc += [nn.Conv2d(widths[-1], h, 3, padding=1), nn.SiLU(), nn.Conv2d(h, d, 1)]
        self.encoder = nn.Sequential(*enc)
        dec = [nn.Conv2d(d, h, 1), nn.SiLU(), nn.Conv2d(h, widths[-1], 3, padding=1), nn.SiLU()]
        rev = widths[::-1]
        for i, (a, b) in enumerate(zip(rev[:-1], rev[1:])):
            dec.append(nn.ConvTranspose2d(a, b, 4, stride=2, padding=1))
            if i < len(rev) - 2:
                dec.append(nn.SiLU())
        self.decoder = nn.Sequential(*dec)
        self.codebook = VQCodebook(codebook_size, d)
        self.frozen = False

    def encode(self, x: torch.Tensor) -> torch.Tensor:
        """``(B, 3, S, S)`` -> ``(B, S/f, S/f, D)`` latents."""
        s = self.cfg.image_side
        if tuple(x.shape[-2:]) != (s, s):
            raise ValueError(f"tokenizer expects {s}x{s} images, got {tuple(x.shape[-2:])}")
        return self.encoder(x).permute(0, 2, 3, 1)

    def decode_latents(self, zq: torch.Tensor) -> torch.Tensor:
        """``(B, g, g, D)`` -> ``(B, 3, S, S)`` unclamped reconstruction."""
        return self.decoder(zq.permute(0, 3, 1, 2))

    @torch.no_grad()
    def tokenize(self, x: torch.Tensor, count: bool = False) -> torch.Tensor:
        """``(B, 3, S, S)`` -> ``(B, g*g)`` raster-order image ids."""
        ids, _ = quantize(self.encode(x), self.codebook, count=count)
        return ids.flatten(1)

    @torch.no_grad()
    def decode_ids(self, ids) -> torch.Tensor:
        """``(B, g*g)`` ids -> ``(B, 3, S, S)`` images clamped to ``[0, 1]``."""
        ids = torch.as_tensor(ids, dtype=torch.int64)
        if ids.ndim == 1:
            ids = ids[None]
        g = self.cfg.gen_grid
        if ids.shape[1] != g * g:
            raise ValueError(f"expected {g * g} ids per image, got {ids.shape[1]}")
        if ids.numel() and (ids.min() < 0 or ids.max() >= self.codebook.size):
            raise ValueError("image id out of codebook range")
        zq = F.embedding(ids, self.codebook.codes).view(ids.shape[0], g, g, -1)
        return self.decode_latents(zq).clamp(0, 1)


def vq_losses(tok: VQTokenizer, x: torch.Tensor, target: torch.Tensor | None = None) -> dict:
    """VQ-VAE objective with a straight-through estimator; returns named loss tensors.

    ``target`` (default ``x``) is the reconstruction target, so a noisy input
    can be trained to decode to its clean render.
    """
    z = tok.encode(x)
    _, e = quantize(z, tok.codebook)
    z_st = z + (e - z).detach()
    recon = tok.decode_latents(z_st)
    losses = {
        "reconstruction": F.mse_loss(recon, x if target is None else target),
        "codebook": F.mse_loss(e, z.detach()),
        "commitment": F.mse_loss(z, e.detach()),
    }
    losses["total"] = losses["reconstruction"] + losses["codebook"] + tok.cfg.beta * losses["commitment"]
    return losses


def vq_train_step(tok: VQTokenizer, x: torch.Tensor, optimizer) -> dict:
    """One gradient step on the tokenizer.  Only legal before Stage I."""
    if tok.frozen:
        raise FreezingViolation("the generation tokenizer is frozen after pretraining")
    tok.train()
    optimizer.zero_grad(set_to_none=True)
    losses = vq_losses(tok, x)
    losses["total"].backward()
    optimizer.step()
    return {k: float(v.detach()) for k, v in losses.items()}


@torch.no_grad()
def restart_dead_codes(cb: VQCodebook, latents: torch.Tensor, gen: torch.Generator) -> int:
    """Re-seed never-hit codes with randomly chosen encoder outputs; returns how many moved."""
    dead = torch.nonzero(cb.usage == 0).flatten()
    if len(dead) == 0:
        return 0
    flat = latents.reshape(-1, cb.dim)
    pick = torch.randint(0, flat.shape[0], (len(dead),), generator=gen)
    cb.codes[dead] = flat[pick].to(cb.codes.dtype)
    return len(dead)
