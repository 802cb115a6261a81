"""Flat ``key = value`` run configuration with dotted keys.

Every tunable of the dataset, model, solver and training loops lives in one
document, e.g.::

    seed = 3
    solver.method = dopri5
    solver.rtol = 1e-4
    train.steps = 2000
    freeze.encoder = true

Unknown keys are rejected. ``RunConfig.to_text`` emits the fully resolved
document (every key, sorted) so a run can archive exactly what it used.
"""
from __future__ import annotations

import dataclasses
from pathlib import Path

from .errors import InputError
from .fusion import FusionConfig
from .model import ModelConfig
from .odesolve import SolverConfig
from .train import PretrainConfig, TrainConfig
from .vqvae import VqConfig

_MODEL_KEYS = ("augment_channels", "ode_hidden", "ode_groups", "ode_out_gain", "ode_speed", "baseline")
_TRAIN_SKIP = ("seed", "baseline", "freeze_encoder", "freeze_decoder", "freeze_codebook")


def _section(prefix: str, cls, skip=(), only=None) -> dict:
    out = {}
    for f in dataclasses.fields(cls):
        if f.name in skip or (only is not None and f.name not in only):
            continue
        default = f.default if f.default is not dataclasses.MISSING else f.default_factory()
        out[f"{prefix}.{f.name}"] = default
    return out


def default_values() -> dict:
    d = {"seed": 0, "data.samples": 200, "data.shapes": 1, "data.frames": 8, "data.size": 32,
         "data.eval_samples": 50, "paths.vqvae": ""}
    d.update(_section("model", ModelConfig, only=_MODEL_KEYS))
    d.update(_section("vq", VqConfig))
    d.update(_section("fusion", FusionConfig))
    d.update(_section("solver", SolverConfig))
    d.update(_section("train", TrainConfig, skip=_TRAIN_SKIP))
    d.update(_section("pretrain", PretrainConfig, skip=("seed",)))
    d.update({"freeze.encoder": False, "freeze.decoder": False, "freeze.codebook": False})
    return d


def _coerce(key: str, text: str, default):
    text = text.strip()
    try:
        if isinstance(default, bool):
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, tuple):
            return tuple(int(p) for p in text.split(",") if p.strip())
    except ValueError:
        raise InputError(f"config key {key}: cannot parse {text!r} as {type(default).__name__}") from None
    return text


def _format(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ",".join(str(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


class RunConfig:
    def __init__(self, overrides: dict | None = None):
        self.values = default_values()
        for k, v in (overrides or {}).items():
            self.set(k, v)
        self.validate()

    def set(self, key: str, value) -> None:
        if key not in self.values:
            raise InputError(f"unknown config key {key!r}")
        default = self.values[key]
        self.values[key] = _coerce(key, value, default) if isinstance(value, str) else value

    def __getitem__(self, key):
        return self.values[key]

    def __eq__(self, other):
        return isinstance(other, RunConfig) and self.values == other.values

    @classmethod
    def parse(cls, text: str) -> "RunConfig":
        pairs = {}
        for n, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise InputError(f"config line {n}: expected key = value, got {raw!r}")
            key, _, value = line.partition("=")
            pairs[key.strip()] = value.strip()
        return cls(pairs)

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise FileNotFoundError(f"cannot read config {path}: {exc}") from exc
        return cls.parse(text)

    def to_text(self) -> str:
        return "".join(f"{k} = {_format(self.values[k])}\n" for k in sorted(self.values))

    def archive(self, out_dir) -> Path:
        path = Path(out_dir) / "resolved_config.txt"
        path.write_text(self.to_text())
        return path

    def _pick(self, prefix: str) -> dict:
        n = len(prefix) + 1
        return {k[n:]: v for k, v in self.values.items() if k.startswith(prefix + ".")}

    # typed views
    def solver_config(self) -> SolverConfig:
        return SolverConfig(**self._pick("solver"))

    def vq_config(self) -> VqConfig:
        return VqConfig(**self._pick("vq"))

    def model_config(self, image_size: int | None = None, baseline: str | None = None) -> ModelConfig:
        kw = self._pick("model")
        if baseline is not None:
            kw["baseline"] = baseline
        return ModelConfig(image_size=image_size or self["data.size"], vq=self.vq_config(),
                           fusion=FusionConfig(**self._pick("fusion")), solver=self.solver_config(), **kw)

    def train_config(self, baseline: str | None = None) -> TrainConfig:
        return TrainConfig(seed=self["seed"], baseline=baseline or self["model.baseline"],
                           freeze_encoder=self["freeze.encoder"], freeze_decoder=self["freeze.decoder"],
                           freeze_codebook=self["freeze.codebook"], **self._pick("train"))

    def pretrain_config(self) -> PretrainConfig:
        return PretrainConfig(seed=self["seed"], **self._pick("pretrain"))

    def validate(self) -> None:
        from .errors import ContractError
        try:
            self.model_config()
            self.train_config()
            self.pretrain_config()
        except (ContractError, TypeError) as exc:
            raise InputError(f"invalid config: {exc}") from exc
        if not 1 <= self["data.shapes"] <= 3:
            raise InputError("data.shapes must be in 1..3")
