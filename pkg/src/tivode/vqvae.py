"""Convolutional VQ-VAE with an EMA (online k-means) codebook."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import DimensionError
from .nn import Conv2d, GroupNorm, Module
from .tensor import Parameter, Tensor


@dataclass(frozen=True)
class VqConfig:
    codebook_size: int = 64
    code_dim: int = 32
    widths: tuple = (32, 64)
    groups: int = 8
    beta: float = 0.25
    decay: float = 0.99
    eps_count: float = 1e-5
    dead_threshold: float = 1e-3
    dead_patience: int = 50
    ema: bool = True

    @property
    def downsample(self) -> int:
        return 2 ** len(self.widths)


class Encoder(Module):
    """Stride-2 conv blocks with GroupNorm + SiLU, then a 1x1 projection."""

    def __init__(self, cfg: VqConfig, rng: np.random.Generator):
        super().__init__()
        self.n = cfg.downsample
        c_in = 1
        self.blocks = []
        for i, w in enumerate(cfg.widths):
            conv = Conv2d(c_in, w, 4, rng, stride=2, pad=1)
            norm = GroupNorm(cfg.groups, w)
            setattr(self, f"conv{i}", conv)
            setattr(self, f"norm{i}", norm)
            self.blocks.append((conv, norm))
            c_in = w
        self.proj = Conv2d(c_in, cfg.code_dim, 1, rng)

    def forward(self, x):
        x = T.as_tensor(x)
        if x.ndim != 4 or x.shape[1] != 1:
            raise DimensionError(f"encoder expects B x 1 x H x W images, got {x.shape}")
        H, W = x.shape[2:]
        if H % self.n or W % self.n:
            raise DimensionError(f"image size {H}x{W} not divisible by downsampling ratio {self.n}")
        h = x
        for conv, norm in self.blocks:
            h = T.silu(norm(conv(h)))
        return self.proj(h)


class Decoder(Module):
    """Mirror of the encoder: conv, then (upsample x2, conv) per level, sigmoid."""

    def __init__(self, cfg: VqConfig, rng: np.random.Generator):
        super().__init__()
        self.code_dim = cfg.code_dim
        widths = list(reversed(cfg.widths))
        self.inp = Conv2d(cfg.code_dim, widths[0], 3, rng, pad=1)
        self.inp_norm = GroupNorm(cfg.groups, widths[0])
        self.ups = []
        for i, w in enumerate(widths[1:] + [None]):
            c_in = widths[i]
            if w is None:
                conv = Conv2d(c_in, 1, 3, rng, pad=1)
                norm = None
            else:
                conv = Conv2d(c_in, w, 3, rng, pad=1)
                norm = GroupNorm(cfg.groups, w)
                setattr(self, f"norm{i}", norm)
            setattr(self, f"conv{i}", conv)
            self.ups.append((conv, norm))

    def forward(self, z):
        z = T.as_tensor(z)
        if z.ndim != 4 or z.shape[1] != self.code_dim:
            raise DimensionError(f"decoder expects B x {self.code_dim} x h x w latents, got {z.shape}")
        h = T.silu(self.inp_norm(self.inp(z)))
        for conv, norm in self.ups:
            h = conv(T.upsample_nearest(h, 2))
            if norm is not None:
                h = T.silu(norm(h))
        return T.sigmoid(h)


class Codebook(Module):
    """K code vectors of dimension N plus exponential-moving-average statistics."""

    def __init__(self, cfg: VqConfig, rng: np.random.Generator):
        super().__init__()
        if cfg.codebook_size < 2:
            raise ValueError("codebook needs at least two vectors")
        self.decay = cfg.decay
        self.eps_count = cfg.eps_count
        self.dead_threshold = cfg.dead_threshold
        self.dead_patience = cfg.dead_patience
        vecs = rng.normal(0.0, 1.0, size=(cfg.codebook_size, cfg.code_dim))
        self.vectors = Parameter(vecs)
        self.vectors.requires_grad = not cfg.ema
        self.register_buffer("ema_counts", np.ones(cfg.codebook_size))
        self.register_buffer("ema_sums", vecs.copy())
        self.register_buffer("dead_steps", np.zeros(cfg.codebook_size))

    @property
    def K(self) -> int:
        return self.vectors.shape[0]

    @property
    def N(self) -> int:
        return self.vectors.shape[1]

    def set_vectors(self, vecs: np.ndarray) -> None:
        vecs = np.array(vecs, dtype=np.float64)
        self.vectors.data = vecs
        self.ema_counts = np.ones(len(vecs))
        self.ema_sums = vecs.copy()
        self.dead_steps = np.zeros(len(vecs))

    def init_from_sites(self, sites: np.ndarray, rng: np.random.Generator) -> None:
        """Seed the codebook with distinct random encoder outputs."""
        pick = rng.choice(len(sites), size=self.K, replace=len(sites) < self.K)
        self.set_vectors(sites[pick] + rng.normal(0.0, 1e-3, size=(self.K, self.N)))


def nearest_codes(sites: np.ndarray, vectors: np.ndarray, chunk: int = 4096) -> np.ndarray:
    """argmin_k ||site - e_k||_2 per row, lowest index on ties.

    Distances come from the expanded form (one matrix product); rows whose two
    best candidates are within rounding distance of each other are re-ranked
    with directly computed squared differences, so ties resolve exactly.
    """
    sites = np.asarray(sites, dtype=np.float64)
    vectors = np.asarray(vectors, dtype=np.float64)
    out = np.empty(len(sites), dtype=np.int64)
    if len(sites) == 0:
        return out
    e2 = (vectors * vectors).sum(axis=1)
    for start in range(0, len(sites), chunk):
        s = sites[start:start + chunk]
        d = e2[None, :] - 2.0 * (s @ vectors.T)
        best = np.argmin(d, axis=1)
        dmin = d[np.arange(len(s)), best]
        scale = (s * s).sum(axis=1) + e2.max()
        near = (d <= dmin[:, None] + 1e-9 * (1.0 + scale[:, None])).sum(axis=1) > 1
        if near.any():
            rows = np.flatnonzero(near)
            exact = ((s[rows, None, :] - vectors[None, :, :]) ** 2).sum(axis=-1)
            best[rows] = np.argmin(exact, axis=1)
        out[start:start + chunk] = best
    return out


def to_sites(z: np.ndarray) -> np.ndarray:
    """(B, N, h, w) grid -> (B*h*w, N) rows, row-major over (b, i, j)."""
    B, N = z.shape[:2]
    return z.transpose(0, 2, 3, 1).reshape(-1, N)


def from_sites(sites: np.ndarray, shape: tuple) -> np.ndarray:
    B, N, h, w = shape
    return sites.reshape(B, h, w, N).transpose(0, 3, 1, 2)


def quantize(z_e, codebook: Codebook):
    """Snap every latent site to its nearest code vector.

    Returns ``(z_q, indices)``. ``z_q`` carries the code values forward and the
    gradient straight through to ``z_e`` (identity Jacobian).
    """
    z_e = T.as_tensor(z_e)
    if z_e.ndim != 4 or z_e.shape[1] != codebook.N:
        raise DimensionError(f"latent channels {z_e.shape} do not match code dim {codebook.N}")
    idx = nearest_codes(to_sites(z_e.data), codebook.vectors.data)
    B, _, h, w = z_e.shape
    indices = idx.reshape(B, h, w)
    values = from_sites(codebook.vectors.data[idx], z_e.shape)
    return T.straight_through(z_e, values), indices


def selected_codes(codebook: Codebook, indices: np.ndarray) -> Tensor:
    """Code vectors for ``indices`` as a (B, N, h, w) tensor (tracks codebook grads)."""
    e = T.embedding(codebook.vectors, indices)  # (B, h, w, N)
    return T.transpose(e, (0, 3, 1, 2))


@dataclass
class VqLosses:
    total: Tensor
    recon: Tensor
    align: Tensor
    commit: Tensor


def vq_loss(x, x_hat, z_e, e, beta: float, ema: bool = True) -> VqLosses:
    """Reconstruction MSE, codebook alignment and β-weighted commitment.

    ``e`` holds the selected code vectors (same shape as ``z_e``). All terms
    are means over elements. The alignment term only enters the total when
    the codebook is trained by gradient (``ema=False``).
    """
    x, x_hat, z_e, e = (T.as_tensor(v) for v in (x, x_hat, z_e, e))
    if x.shape != x_hat.shape or z_e.shape != e.shape:
        raise DimensionError("vq_loss shape mismatch")
    recon = T.mse(x, x_hat)
    align = T.mse(T.stop_gradient(z_e), e)
    commit = T.mse(z_e, T.stop_gradient(e)) * beta
    total = recon + commit
    if not ema:
        total = total + align
    return VqLosses(total, recon, align, commit)


def ema_update(codebook: Codebook, sites: np.ndarray, indices: np.ndarray,
               rng: np.random.Generator | None = None) -> Codebook:
    """One EM step: running cluster counts/sums, then re-estimate the means.

    ``sites`` is (M, N) encoder outputs and ``indices`` their (M,) assignments.
    Codes whose running count stays below the dead threshold for
    ``dead_patience`` consecutive updates are re-seeded to a random site.
    """
    sites = np.asarray(sites, dtype=np.float64).reshape(-1, codebook.N)
    indices = np.asarray(indices).reshape(-1)
    d = codebook.decay
    K = codebook.K
    counts = np.bincount(indices, minlength=K).astype(np.float64)
    sums = np.zeros((K, codebook.N))
    np.add.at(sums, indices, sites)
    codebook.ema_counts = d * codebook.ema_counts + (1.0 - d) * counts
    codebook.ema_sums = d * codebook.ema_sums + (1.0 - d) * sums
    vecs = codebook.ema_sums / np.maximum(codebook.ema_counts, codebook.eps_count)[:, None]

    low = codebook.ema_counts < codebook.dead_threshold
    codebook.dead_steps = np.where(low, codebook.dead_steps + 1, 0.0)
    dead = np.flatnonzero(codebook.dead_steps >= codebook.dead_patience)
    if len(dead) and rng is not None and len(sites):
        pick = rng.integers(0, len(sites), size=len(dead))
        vecs[dead] = sites[pick]
        codebook.ema_counts[dead] = 1.0
        codebook.ema_sums[dead] = vecs[dead]
        codebook.dead_steps[dead] = 0.0
    codebook.vectors.data = vecs
    return codebook


def usage_entropy(indices: np.ndarray, K: int) -> float:
    """Shannon entropy (nats) of the code histogram."""
    p = np.bincount(np.asarray(indices).reshape(-1), minlength=K).astype(np.float64)
    p = p[p > 0] / p.sum()
    return float(-(p * np.log(p)).sum())


@dataclass
class VqOutput:
    z_e: Tensor
    z_q: Tensor
    indices: np.ndarray
    x_hat: Tensor
    losses: VqLosses


class VQVAE(Module):
    def __init__(self, cfg: VqConfig = VqConfig(), seed: int = 0):
        super().__init__()
        self.cfg = cfg
        rng = np.random.default_rng([seed, 1])
        self.encoder = Encoder(cfg, rng)
        self.decoder = Decoder(cfg, rng)
        self.codebook = Codebook(cfg, rng)

    def encode(self, x) -> Tensor:
        return self.encoder(x)

    def decode(self, z_q) -> Tensor:
        return self.decoder(z_q)

    def quantize(self, z_e):
        return quantize(z_e, self.codebook)

    def forward(self, x) -> VqOutput:
        z_e = self.encode(x)
        z_q, indices = self.quantize(z_e)
        x_hat = self.decode(z_q)
        e = selected_codes(self.codebook, indices)
        losses = vq_loss(x, x_hat, z_e, e, self.cfg.beta, self.cfg.ema)
        return VqOutput(z_e, z_q, indices, x_hat, losses)

    def reconstruct(self, x) -> np.ndarray:
        with T.no_grad():
            return self.forward(x).x_hat.data
