"""End-to-end text+image to video model and its step-wise ablation baselines.

Pipeline: encode the first frame, fuse it with the caption into ξ0, append
zero augmentation channels, integrate the learned dynamics to every requested
time, drop the augmentation channels, quantize against the codebook and
decode. All frames come from a single solve.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import tensor as T
from .errors import ContractError, DimensionError, UnsupportedGridError
from .fusion import Fusion, FusionConfig, Vocabulary
from .nn import Conv2d, GroupNorm, Linear, Module
from .odesolve import SolverConfig, TimeGrid, augment, solve_at
from .shapes import CAPTION_WORDS
from .tensor import Tensor
from .vqvae import VqConfig, VQVAE, quantize

BASELINES = ("node", "trans_all", "trans_next")


@dataclass(frozen=True)
class ModelConfig:
    image_size: int = 32
    augment_channels: int = 4
    ode_hidden: int = 32
    ode_groups: int = 8
    ode_out_gain: float = 0.1
    # f_θ output multiplier. Over a training interval dt the ODE moves the state
    # by ~speed*dt*net(ξ), so speed = 1/dt gives the same per-frame displacement
    # (and the same Adam step in displacement terms) as a step-wise map.
    ode_speed: float = 7.0
    baseline: str = "node"
    vq: VqConfig = field(default_factory=VqConfig)
    fusion: FusionConfig = field(default_factory=FusionConfig)
    solver: SolverConfig = field(default_factory=SolverConfig)

    def __post_init__(self):
        if self.baseline not in BASELINES:
            raise ContractError(f"unknown baseline {self.baseline!r}; choose from {BASELINES}")
        if self.image_size % self.vq.downsample:
            raise DimensionError("image size not divisible by the encoder downsampling ratio")
        if self.augment_channels < 0:
            raise ContractError("augment_channels must be >= 0")
        if not self.ode_speed > 0:
            raise ContractError("ode_speed must be positive")

    @property
    def grid(self) -> tuple:
        n = self.image_size // self.vq.downsample
        return (n, n)

    @property
    def state_channels(self) -> int:
        return self.vq.code_dim + self.augment_channels

    def to_dict(self) -> dict:
        return asdict(self)

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, default=str)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


class ConvField(Module):
    """Three 3x3 convolutions with GroupNorm + SiLU between them.

    With ``time_channel`` the field is time-dependent: t is appended as a
    constant input plane, and features (t, sin πt, cos πt) are mapped to a
    per-channel shift added after each GroupNorm. The shift matters because the
    norm's mean subtraction mostly cancels what the plane contributes.
    """

    def __init__(self, channels: int, hidden: int, groups: int, rng, time_channel: bool = True,
                 out_gain: float = 0.1, speed: float = 1.0):
        super().__init__()
        self.channels = channels
        self.speed = speed
        self.time_channel = time_channel
        c_in = channels + (1 if time_channel else 0)
        self.conv1 = Conv2d(c_in, hidden, 3, rng, pad=1)
        self.norm1 = GroupNorm(groups, hidden)
        self.conv2 = Conv2d(hidden, hidden, 3, rng, pad=1)
        self.norm2 = GroupNorm(groups, hidden)
        self.conv3 = Conv2d(hidden, channels, 3, rng, pad=1, gain=out_gain)
        if time_channel:
            self.time1 = Linear(3, hidden, rng, bias=False)
            self.time2 = Linear(3, hidden, rng, bias=False)

    def _shift(self, layer, t):
        phi = np.array([[t, np.sin(np.pi * t), np.cos(np.pi * t)]])
        return T.reshape(layer(phi), (1, -1, 1, 1))

    def forward(self, xi, t: float | None = None):
        xi = T.as_tensor(xi)
        if xi.ndim != 4 or xi.shape[1] != self.channels:
            raise DimensionError(f"state {xi.shape} does not have {self.channels} channels")
        x = xi
        if self.time_channel:
            B, _, h, w = xi.shape
            x = T.concat([xi, np.full((B, 1, h, w), float(t))], axis=1)
        if self.time_channel:
            t = float(t)
            x = T.silu(self.norm1(self.conv1(x)) + self._shift(self.time1, t))
            x = T.silu(self.norm2(self.conv2(x)) + self._shift(self.time2, t))
        else:
            x = T.silu(self.norm1(self.conv1(x)))
            x = T.silu(self.norm2(self.conv2(x)))
        out = self.conv3(x)
        return out * self.speed if self.speed != 1.0 else out


def default_vocab() -> Vocabulary:
    return Vocabulary(CAPTION_WORDS)


class VideoModel(Module):
    """Shared VQ-VAE + fusion front end; subclasses define the latent path."""

    def __init__(self, cfg: ModelConfig, vocab: Vocabulary | None = None, seed: int = 0):
        super().__init__()
        self.cfg = cfg
        self.vocab = vocab or default_vocab()
        self.vqvae = VQVAE(cfg.vq, seed)
        self.fusion = Fusion(self.vocab, cfg.vq.code_dim, cfg.grid, cfg.fusion, seed)

    # pipeline pieces -------------------------------------------------------
    def encode(self, x) -> Tensor:
        return self.vqvae.encode(x)

    def tokenize(self, captions) -> np.ndarray:
        if isinstance(captions, str):
            captions = [captions]
        return self.fusion.tokenize(captions)

    def initial_state(self, x0, ids) -> Tensor:
        """ξ0: fused first-frame latent with zero augmentation channels."""
        z0 = self.encode(x0)
        return augment(self.fusion(z0, ids), self.cfg.augment_channels)

    def project(self, xi) -> Tensor:
        """Drop augmentation channels."""
        return T.as_tensor(xi)[:, :self.cfg.vq.code_dim]

    def decode_latents(self, latent) -> Tensor:
        z_q, _ = quantize(latent, self.vqvae.codebook)
        return self.vqvae.decode(z_q)

    def latent_states(self, x0, ids, grid: TimeGrid, teacher=None) -> list:
        raise NotImplementedError

    def generate(self, x0, captions, grid) -> np.ndarray:
        """Frames at every time of ``grid``: (T, H, W), or (B, T, H, W) for batches."""
        grid = grid if isinstance(grid, TimeGrid) else TimeGrid(grid)
        x0 = np.asarray(x0, dtype=np.float64)
        single = x0.ndim == 2
        if x0.ndim == 2:
            x0 = x0[None, None]
        elif x0.ndim == 3:
            x0 = x0[:, None]
        ids = self.tokenize(captions)
        if len(ids) != len(x0):
            raise DimensionError(f"{len(x0)} images but {len(ids)} captions")
        with T.no_grad():
            states = self.latent_states(x0, ids, grid)
            B = x0.shape[0]
            stacked = T.concat([self.project(s) for s in states], axis=0)
            frames = self.decode_latents(stacked).data  # (T*B, 1, H, W), time-major
        H, W = frames.shape[2:]
        frames = frames.reshape(len(states), B, H, W).transpose(1, 0, 2, 3)
        return frames[0] if single else frames


class TivOdeModel(VideoModel):
    """Augmented latent ODE driven by a time-conditioned conv field."""

    def __init__(self, cfg: ModelConfig = ModelConfig(), vocab: Vocabulary | None = None, seed: int = 0):
        if cfg.baseline != "node":
            cfg = replace(cfg, baseline="node")
        super().__init__(cfg, vocab, seed)
        rng = np.random.default_rng([seed, 3])
        self.dynamics = ConvField(cfg.state_channels, cfg.ode_hidden, cfg.ode_groups, rng,
                                  time_channel=True, out_gain=cfg.ode_out_gain, speed=cfg.ode_speed)

    def f_theta(self, xi, t: float) -> Tensor:
        """dξ/dt at (ξ, t)."""
        return self.dynamics(xi, t)

    def solve(self, xi0, grid, solver: SolverConfig | None = None):
        return solve_at(self.f_theta, xi0, grid, solver or self.cfg.solver)

    def latent_states(self, x0, ids, grid, teacher=None) -> list:
        xi0 = self.initial_state(x0, ids)
        return self.solve(xi0, grid).states


class StepModel(VideoModel):
    """Discrete transition ξ_{k+1} = ξ_k + g(ξ_k) replacing the ODE (ablation).

    ``trans_all`` trains by rolling out from ξ0 only. ``trans_next`` trains
    teacher-forced: each ground-truth frame, fused with the caption, is mapped
    to the next one. Both roll out iteratively at test time and only support
    the uniform training grid.
    """

    def __init__(self, cfg: ModelConfig, vocab: Vocabulary | None = None, seed: int = 0,
                 frame_step: float = 1.0 / 7.0):
        if cfg.baseline not in ("trans_all", "trans_next"):
            raise ContractError("StepModel needs baseline trans_all or trans_next")
        super().__init__(cfg, vocab, seed)
        rng = np.random.default_rng([seed, 3])
        self.frame_step = frame_step
        self.transition = ConvField(cfg.state_channels, cfg.ode_hidden, cfg.ode_groups, rng,
                                    time_channel=False, out_gain=cfg.ode_out_gain)

    @property
    def mode(self) -> str:
        return self.cfg.baseline

    def step(self, xi) -> Tensor:
        return xi + self.transition(xi)

    def rollout(self, xi0, n: int) -> list:
        """``n`` latents [ξ0, ξ1, ...] by repeated application of the map."""
        states = [xi0]
        for _ in range(n - 1):
            states.append(self.step(states[-1]))
        return states

    def check_grid(self, grid: TimeGrid) -> int:
        times = np.asarray(grid.times)
        k = times / self.frame_step
        if times[0] != 0.0 or not np.allclose(k, np.arange(len(times)), atol=1e-6):
            raise UnsupportedGridError(
                f"step-wise model only supports the uniform grid with spacing {self.frame_step:.6g} from 0")
        return len(times)

    def latent_states(self, x0, ids, grid, teacher=None) -> list:
        n = self.check_grid(grid if isinstance(grid, TimeGrid) else TimeGrid(grid))
        xi0 = self.initial_state(x0, ids)
        if teacher is None:
            return self.rollout(xi0, n)
        # teacher forcing: teacher[k] is the fused, augmented latent of frame k
        return [xi0] + [self.step(teacher[k]) for k in range(n - 1)]


def build_model(cfg: ModelConfig, vocab: Vocabulary | None = None, seed: int = 0,
                frame_step: float = 1.0 / 7.0) -> VideoModel:
    if cfg.baseline == "node":
        return TivOdeModel(cfg, vocab, seed)
    return StepModel(cfg, vocab, seed, frame_step)
