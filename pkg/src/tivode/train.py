"""Training loops: VQ-VAE pretraining and full-model training with resume."""
from __future__ import annotations

import json
import logging
import math
import time
import zlib
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from . import checkpoint
from . import tensor as T
from .errors import ContractError, FormatError, TrainingError
from .fusion import FusionConfig, Vocabulary
from .model import BASELINES, ModelConfig, StepModel, VideoModel, build_model
from .nn import Adam
from .odesolve import SolverConfig, TimeGrid, augment
from .shapes import VideoSample
from .vqvae import VQVAE, VqConfig, ema_update, quantize, selected_codes, to_sites, usage_entropy

log = logging.getLogger(__name__)

LOSS_SPACES = ("pixel", "pixel+latent")


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    clip_norm: float = 1.0
    epochs: int = 40
    steps: int = 0  # when > 0, overrides epochs
    batch_size: int = 4
    beta: float = 0.25
    loss_space: str = "pixel"
    latent_weight: float = 1.0
    baseline: str = "node"
    seed: int = 0
    freeze_encoder: bool = False
    freeze_decoder: bool = False
    freeze_codebook: bool = False

    def __post_init__(self):
        if self.lr <= 0 or self.epochs <= 0 or self.batch_size <= 0 or self.steps < 0:
            raise ContractError("learning rate, epochs and batch size must be positive")
        if self.loss_space not in LOSS_SPACES:
            raise ContractError(f"loss_space must be one of {LOSS_SPACES}")
        if self.baseline not in BASELINES:
            raise ContractError(f"baseline must be one of {BASELINES}")

    @property
    def frozen_vq(self) -> bool:
        return self.freeze_encoder and self.freeze_decoder and self.freeze_codebook


@dataclass(frozen=True)
class PretrainConfig:
    lr: float = 1e-3
    epochs: int = 20
    batch_size: int = 32
    clip_norm: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.lr <= 0 or self.epochs <= 0 or self.batch_size <= 0:
            raise ContractError("learning rate, epochs and batch size must be positive")


# ---------------------------------------------------------------- config (de)serialization


def model_config_from_dict(d: dict) -> ModelConfig:
    d = dict(d)
    vq = dict(d.pop("vq"))
    vq["widths"] = tuple(vq["widths"])
    return ModelConfig(vq=VqConfig(**vq), fusion=FusionConfig(**d.pop("fusion")),
                       solver=SolverConfig(**d.pop("solver")), **d)


def save_model(path, model: VideoModel, extra: dict | None = None, meta: dict | None = None) -> str:
    tensors = {f"model.{k}": v for k, v in model.state_dict().items()}
    for k, v in (extra or {}).items():
        tensors[k] = v
    info = {
        "kind": "tivode-model",
        "format_version": checkpoint.FORMAT_VERSION,
        "config_hash": model.cfg.digest(),
        "vocab_hash": model.vocab.digest(),
        "config": json.dumps(model.cfg.to_dict(), sort_keys=True),
        "vocab": " ".join(model.vocab.tokens),
    }
    if isinstance(model, StepModel):
        info["frame_step"] = repr(model.frame_step)
    info.update(meta or {})
    return checkpoint.save(path, tensors, info)


def load_model(path):
    """Rebuild a model from a checkpoint; returns (model, tensors, meta)."""
    tensors, meta = checkpoint.load(path)
    if meta.get("kind") != "tivode-model":
        raise FormatError(f"{path} is not a model checkpoint")
    cfg = model_config_from_dict(json.loads(meta["config"]))
    vocab = Vocabulary(meta["vocab"].split())
    if vocab.digest() != meta.get("vocab_hash"):
        raise FormatError("vocabulary hash mismatch")
    frame_step = float(meta.get("frame_step", 1.0 / 7.0))
    model = build_model(cfg, vocab, frame_step=frame_step)
    state = {k[len("model."):]: v for k, v in tensors.items() if k.startswith("model.")}
    model.load_state_dict(state)
    return model, tensors, meta


# ---------------------------------------------------------------- losses


@dataclass
class LossTerms:
    total: T.Tensor
    recon: float
    commit: float
    latent: float
    target_sites: np.ndarray
    target_indices: np.ndarray


def _time_major(frames: np.ndarray) -> np.ndarray:
    """(B, T, H, W) -> (T*B, 1, H, W), time-major like the stacked solver states."""
    B, Tn, H, W = frames.shape
    return frames.transpose(1, 0, 2, 3).reshape(Tn * B, 1, H, W)


def video_loss(model: VideoModel, frames: np.ndarray, ids: np.ndarray, grid: TimeGrid,
               cfg: TrainConfig) -> LossTerms:
    """Pixel MSE over every frame + β·commitment on every solved latent
    (+ latent MSE to the encoder targets for ``pixel+latent``)."""
    B, Tn = frames.shape[:2]
    x = _time_major(frames)
    with T.no_grad():
        z_t = model.encode(x)  # (T*B, N, h, w) targets
    x0 = frames[:, 0][:, None]
    teacher = None
    if isinstance(model, StepModel) and model.mode == "trans_next":
        teacher = [augment(model.fusion(z_t[k * B:(k + 1) * B], ids), model.cfg.augment_channels)
                   for k in range(Tn - 1)]
    states = model.latent_states(x0, ids, grid, teacher=teacher)
    latent = model.project(T.concat(states, axis=0))
    z_q, idx = quantize(latent, model.vqvae.codebook)
    x_hat = model.vqvae.decode(z_q)
    recon = T.mse(x_hat, x)
    e = selected_codes(model.vqvae.codebook, idx)
    commit = T.mse(latent, T.stop_gradient(e)) * cfg.beta
    total = recon + commit
    lat = 0.0
    if cfg.loss_space == "pixel+latent":
        lat_t = T.mse(latent, T.stop_gradient(z_t)) * cfg.latent_weight
        total = total + lat_t
        lat = lat_t.item()
    sites = to_sites(z_t.data)
    tidx = quantize(z_t, model.vqvae.codebook)[1].reshape(-1)
    return LossTerms(total, recon.item(), commit.item(), lat, sites, tidx)


# ---------------------------------------------------------------- trainers


class _Resumable:
    """Epoch/step bookkeeping, plain-text loss log, per-epoch checkpoints."""

    log_header = ""

    def __init__(self, out_dir=None):
        self.out_dir = Path(out_dir) if out_dir else None
        self.epoch = 0
        self.step = 0
        self.history = []  # one row of floats per step
        if self.out_dir:
            self.out_dir.mkdir(parents=True, exist_ok=True)

    @property
    def ckpt_path(self):
        return self.out_dir / "checkpoint.tvc" if self.out_dir else None

    @property
    def log_path(self):
        return self.out_dir / "loss.log" if self.out_dir else None

    def _append_log(self, row):
        if self.log_path is None:
            return
        new = not self.log_path.exists()
        with open(self.log_path, "a") as fh:
            if new:
                fh.write(self.log_header + "\n")
            fh.write(f"{int(row[0])}\t" + "\t".join(f"{v:.10g}" for v in row[1:]) + "\n")

    def _rewrite_log(self):
        if self.log_path is None:
            return
        with open(self.log_path, "w") as fh:
            fh.write(self.log_header + "\n")
        rows, self.history = self.history, []
        for r in rows:
            self.history.append(r)
            self._append_log(r)

    def _rng(self, *key) -> np.random.Generator:
        words = [zlib.crc32(k.encode()) if isinstance(k, str) else int(k) for k in key]
        return np.random.default_rng([self.seed, *words])


class VqPretrainer(_Resumable):
    """Pretrain a VQ-VAE on individual frames."""

    log_header = "step\tepoch\ttotal\trecon\talign\tcommit\tentropy"

    def __init__(self, vq: VQVAE, images: np.ndarray, cfg: PretrainConfig = PretrainConfig(), out_dir=None):
        super().__init__(out_dir)
        self.vq = vq
        self.images = np.asarray(images, dtype=np.float64).reshape(-1, 1, *np.shape(images)[-2:])
        self.cfg = cfg
        self.seed = cfg.seed
        self.opt = Adam(vq.trainable_parameters(), lr=cfg.lr, clip_norm=cfg.clip_norm)
        self.initialized = False

    @property
    def steps_per_epoch(self) -> int:
        return max(1, len(self.images) // self.cfg.batch_size)

    def train_step(self, batch: np.ndarray) -> list:
        if not self.initialized:
            with T.no_grad():
                sites = to_sites(self.vq.encode(batch).data)
            self.vq.codebook.init_from_sites(sites, self._rng("init"))
            self.initialized = True
        out = self.vq(batch)
        loss = out.losses.total
        if not math.isfinite(loss.item()):
            raise TrainingError("non-finite VQ loss", seed=self.seed, step=self.step)
        self.opt.zero_grad()
        loss.backward()
        self.opt.step()
        if self.vq.cfg.ema:
            ema_update(self.vq.codebook, to_sites(out.z_e.data), out.indices, self._rng("ema", self.step))
        ent = usage_entropy(out.indices, self.vq.codebook.K)
        self.step += 1
        row = [self.step, self.epoch, loss.item(), out.losses.recon.item(), out.losses.align.item(),
               out.losses.commit.item(), ent]
        self.history.append(row)
        self._append_log(row)
        return row

    def run_epoch(self) -> float:
        order = self._rng("epoch", self.epoch).permutation(len(self.images))
        bs = self.cfg.batch_size
        recon = []
        for b in range(self.steps_per_epoch):
            batch = self.images[order[b * bs:(b + 1) * bs]]
            recon.append(self.train_step(batch)[3])
        self.epoch += 1
        if self.out_dir:
            self.save(self.ckpt_path)
        return float(np.mean(recon))

    def fit(self, epochs: int | None = None) -> list:
        epochs = self.cfg.epochs if epochs is None else epochs
        means = []
        while self.epoch < epochs:
            t0 = time.perf_counter()
            means.append(self.run_epoch())
            log.info("vq epoch %d recon %.5f (%.1fs)", self.epoch, means[-1], time.perf_counter() - t0)
        return means

    def eval_mse(self, images: np.ndarray | None = None, batch: int = 256) -> float:
        imgs = self.images if images is None else np.asarray(images).reshape(-1, 1, *np.shape(images)[-2:])
        errs = []
        for s in range(0, len(imgs), batch):
            x = imgs[s:s + batch]
            errs.append(np.mean((self.vq.reconstruct(x) - x) ** 2) * len(x))
        return float(np.sum(errs) / len(imgs))

    def state(self) -> dict:
        out = {f"vq.{k}": v for k, v in self.vq.state_dict().items()}
        out.update({f"opt.{k}": v for k, v in self.opt.state_dict().items()})
        out["trainer.counters"] = np.array([self.epoch, self.step, float(self.initialized)], dtype=np.float64)
        out["trainer.history"] = np.array(self.history, dtype=np.float64).reshape(len(self.history), 7)
        return out

    def save(self, path) -> str:
        meta = {"kind": "tivode-vq-pretrain", "config": json.dumps(asdict(self.vq.cfg), sort_keys=True),
                "train_config": json.dumps(asdict(self.cfg), sort_keys=True)}
        return checkpoint.save(path, self.state(), meta)

    def load(self, path) -> None:
        tensors, _ = checkpoint.load(path)
        self.vq.load_state_dict({k[3:]: v for k, v in tensors.items() if k.startswith("vq.")})
        self.opt.load_state_dict({k[4:]: v for k, v in tensors.items() if k.startswith("opt.")})
        epoch, step, init = tensors["trainer.counters"]
        self.epoch, self.step, self.initialized = int(epoch), int(step), bool(init)
        self.history = [list(r) for r in tensors["trainer.history"]]
        self._rewrite_log()


class Trainer(_Resumable):
    """Full-model training on videos (ODE model or a step-wise baseline)."""

    log_header = "step\tepoch\ttotal\trecon\tcommit\tlatent"

    def __init__(self, model: VideoModel, samples: Sequence[VideoSample], cfg: TrainConfig, out_dir=None):
        super().__init__(out_dir)
        if not samples:
            raise ContractError("no training samples")
        self.model = model
        self.samples = list(samples)
        self.cfg = cfg
        self.seed = cfg.seed
        grid = self.samples[0].times
        if any(s.times.times != grid.times for s in self.samples):
            raise ContractError("training samples must share one time grid")
        self.grid = grid
        vq = model.vqvae
        vq.encoder.set_trainable(not cfg.freeze_encoder)
        vq.decoder.set_trainable(not cfg.freeze_decoder)
        vq.codebook.vectors.requires_grad = (not cfg.freeze_codebook) and not vq.cfg.ema
        self.opt = Adam(model.trainable_parameters(), lr=cfg.lr, betas=(cfg.beta1, cfg.beta2),
                        clip_norm=cfg.clip_norm)

    @property
    def steps_per_epoch(self) -> int:
        return max(1, len(self.samples) // self.cfg.batch_size)

    @property
    def total_steps(self) -> int:
        return self.cfg.steps if self.cfg.steps > 0 else self.cfg.epochs * self.steps_per_epoch

    def train_step(self, batch: Sequence[VideoSample]) -> list:
        frames = np.stack([s.frames for s in batch])
        ids = self.model.tokenize([s.caption for s in batch])
        terms = video_loss(self.model, frames, ids, self.grid, self.cfg)
        value = terms.total.item()
        if not math.isfinite(value):
            raise TrainingError("non-finite training loss", seed=self.seed, step=self.step)
        self.opt.zero_grad()
        terms.total.backward()
        self.opt.step()
        cb = self.model.vqvae.codebook
        if self.model.vqvae.cfg.ema and not self.cfg.freeze_codebook:
            ema_update(cb, terms.target_sites, terms.target_indices, self._rng("ema", self.step))
        self.step += 1
        row = [self.step, self.epoch, value, terms.recon, terms.commit, terms.latent]
        self.history.append(row)
        self._append_log(row)
        return row

    def run_epoch(self) -> float:
        order = self._rng("epoch", self.epoch).permutation(len(self.samples))
        bs = self.cfg.batch_size
        losses = []
        for b in range(self.steps_per_epoch):
            if self.step >= self.total_steps:
                break
            batch = [self.samples[i] for i in order[b * bs:(b + 1) * bs]]
            losses.append(self.train_step(batch)[2])
        self.epoch += 1
        if self.out_dir:
            self.save(self.ckpt_path)
        return float(np.mean(losses)) if losses else math.nan

    def fit(self, max_epochs: int | None = None) -> list:
        """Train until the step budget (or ``max_epochs`` total epochs) is reached."""
        means = []
        while self.step < self.total_steps and (max_epochs is None or self.epoch < max_epochs):
            t0 = time.perf_counter()
            means.append(self.run_epoch())
            log.info("epoch %d step %d loss %.5f (%.1fs)", self.epoch, self.step, means[-1],
                     time.perf_counter() - t0)
        return means

    def losses(self) -> np.ndarray:
        return np.array([r[2] for r in self.history])

    def state(self) -> dict:
        out = {f"opt.{k}": v for k, v in self.opt.state_dict().items()}
        out["trainer.counters"] = np.array([self.epoch, self.step], dtype=np.float64)
        out["trainer.history"] = np.array(self.history, dtype=np.float64).reshape(len(self.history), 6)
        return out

    def save(self, path) -> str:
        meta = {"train_config": json.dumps(asdict(self.cfg), sort_keys=True)}
        return save_model(path, self.model, self.state(), meta)

    def load(self, path) -> None:
        tensors, meta = checkpoint.load(path)
        if meta.get("config_hash") != self.model.cfg.digest():
            raise FormatError("checkpoint was written for a different model configuration")
        self.model.load_state_dict({k[6:]: v for k, v in tensors.items() if k.startswith("model.")})
        self.opt.load_state_dict({k[4:]: v for k, v in tensors.items() if k.startswith("opt.")})
        epoch, step = tensors["trainer.counters"]
        self.epoch, self.step = int(epoch), int(step)
        self.history = [list(r) for r in tensors["trainer.history"]]
        self._rewrite_log()


def train_config_from_dict(d: dict) -> TrainConfig:
    names = {f.name for f in fields(TrainConfig)}
    return TrainConfig(**{k: v for k, v in d.items() if k in names})
