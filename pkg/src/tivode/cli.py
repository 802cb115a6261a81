"""``tivode`` command line: data generation, training, generation, evaluation, ablation.

Exit codes: 0 ok, 2 bad arguments, 3 I/O or file format, 4 non-finite
training loss, 5 solver failure.
"""
from __future__ import annotations

import argparse
import contextlib
import json
import logging
import os
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import checkpoint, pgm
from .config import RunConfig
from .errors import (ContractError, DimensionError, FormatError, InputError, SolverError, TrainingError,
                     UnsupportedGridError)
from .metrics import MetricReport
from .model import build_model
from .odesolve import TimeGrid
from .shapes import PATTERNS, make_dataset, parse_caption, read_dataset, write_dataset
from .train import Trainer, VqPretrainer, load_model
from .vqvae import VQVAE

log = logging.getLogger("tivode")

EXIT_OK, EXIT_ARGS, EXIT_IO, EXIT_NUMERIC, EXIT_SOLVER = 0, 2, 3, 4, 5
ABLATION_ROWS = (("TiV-TransAll", "trans_all"), ("TiV-TransNext", "trans_next"), ("TiV-ODE", "node"))


class ArgError(Exception):
    pass


@contextlib.contextmanager
def thread_limit():
    """Cap BLAS threads from TIVODE_THREADS (default 1)."""
    try:
        n = int(os.environ.get("TIVODE_THREADS", "1"))
    except ValueError:
        raise ArgError("TIVODE_THREADS must be an integer") from None
    if n < 1:
        raise ArgError("TIVODE_THREADS must be >= 1")
    from threadpoolctl import threadpool_limits
    with threadpool_limits(limits=n):
        yield


def _config(path) -> RunConfig:
    if path is None:
        return RunConfig()
    try:
        return RunConfig.load(path)
    except FileNotFoundError as exc:
        raise OSError(str(exc)) from exc


def _out_dir(path) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _kv(d: dict) -> str:
    return "".join(f"{k}={v}\n" for k, v in d.items())


# ---------------------------------------------------------------- commands


def cmd_gen_data(args) -> int:
    if not 1 <= args.shapes <= 3:
        raise ArgError(f"--shapes must be between 1 and 3, got {args.shapes}")
    if args.samples < 1 or args.frames < 2 or args.size < 8 or args.size % 4:
        raise ArgError("need --samples >= 1, --frames >= 2 and --size a multiple of 4, at least 8")
    samples = make_dataset(args.samples, args.shapes, args.frames, args.size, args.seed, args.split)
    manifest = write_dataset(args.out, samples)
    sys.stdout.write(_kv(manifest))
    return EXIT_OK


def _images(samples) -> np.ndarray:
    return np.concatenate([s.frames for s in samples], axis=0)


def cmd_pretrain(args) -> int:
    cfg = _config(args.config)
    samples = read_dataset(args.data)
    out = _out_dir(args.out)
    cfg.archive(out)
    vq = VQVAE(cfg.vq_config(), seed=cfg["seed"])
    trainer = VqPretrainer(vq, _images(samples), cfg.pretrain_config(), out_dir=out)
    if trainer.ckpt_path.exists():
        trainer.load(trainer.ckpt_path)
        log.info("resumed at epoch %d", trainer.epoch)
    trainer.fit()
    digest = trainer.save(out / "vqvae.tvc")
    sys.stdout.write(_kv({"epochs": trainer.epoch, "recon_mse": f"{trainer.eval_mse():.6g}",
                          "checkpoint": out / "vqvae.tvc", "sha256": digest}))
    return EXIT_OK


def load_pretrained_vq(model, path) -> None:
    tensors, meta = checkpoint.load(path)
    if meta.get("kind") != "tivode-vq-pretrain":
        raise FormatError(f"{path} is not a VQ-VAE pretraining checkpoint")
    if json.loads(meta["config"]) != json.loads(json.dumps(asdict(model.cfg.vq))):
        raise FormatError("pretrained VQ-VAE configuration differs from the model's")
    model.vqvae.load_state_dict({k[3:]: v for k, v in tensors.items() if k.startswith("vq.")})


def _train_one(cfg: RunConfig, samples, out: Path, baseline: str | None = None):
    T_frames, size = samples[0].frames.shape[:2]
    mcfg = cfg.model_config(image_size=size, baseline=baseline)
    model = build_model(mcfg, seed=cfg["seed"], frame_step=1.0 / (T_frames - 1))
    if cfg["paths.vqvae"]:
        load_pretrained_vq(model, cfg["paths.vqvae"])
    trainer = Trainer(model, samples, cfg.train_config(baseline=mcfg.baseline), out_dir=out)
    if trainer.ckpt_path.exists():
        trainer.load(trainer.ckpt_path)
        log.info("resumed at epoch %d step %d", trainer.epoch, trainer.step)
    trainer.fit()
    digest = trainer.save(out / "model.tvc")
    return model, trainer, digest


def cmd_train(args) -> int:
    cfg = _config(args.config)
    if args.vqvae:
        cfg.set("paths.vqvae", args.vqvae)
    samples = read_dataset(args.data)
    out = _out_dir(args.out)
    cfg.archive(out)
    _, trainer, digest = _train_one(cfg, samples, out)
    losses = trainer.losses()
    sys.stdout.write(_kv({"steps": trainer.step, "epochs": trainer.epoch,
                          "final_loss": f"{losses[-1]:.6g}" if len(losses) else "nan",
                          "checkpoint": out / "model.tvc", "sha256": digest}))
    return EXIT_OK


def cmd_generate(args) -> int:
    try:
        grid = TimeGrid.parse(args.times)
    except (InputError, ContractError) as exc:
        raise ArgError(f"bad --times: {exc}") from exc
    model, _, meta = load_model(args.ckpt)
    image = pgm.read(args.image)
    frames = model.generate(image, [args.caption], grid)
    out = _out_dir(args.out_dir)
    names = []
    for t, fr in zip(grid.times, frames):
        name = f"frame_{t:.4f}.pgm"
        pgm.write(out / name, fr)
        names.append(name)
    manifest = {"checkpoint_sha256": checkpoint.file_digest(args.ckpt), "config_hash": meta.get("config_hash"),
                "caption": args.caption, "times": ",".join(repr(t) for t in grid.times),
                "frames": ",".join(names), "solver": model.cfg.solver.method}
    (out / "run.txt").write_text(_kv(manifest))
    sys.stdout.write(_kv(manifest))
    return EXIT_OK


def evaluate_model(model, samples, batch: int = 10) -> MetricReport:
    """Generate every sample from (frame 0, caption) at its own times; score vs ground truth."""
    report = MetricReport()
    for s in range(0, len(samples), batch):
        chunk = samples[s:s + batch]
        grid = chunk[0].times
        same = all(c.times.times == grid.times for c in chunk)
        groups = [sorted({p.value for _, p in parse_caption(c.caption)}) for c in chunk]
        if same:
            frames = model.generate(np.stack([c.frames[0] for c in chunk]), [c.caption for c in chunk], grid)
        else:
            frames = [model.generate(c.frames[0], [c.caption], c.times) for c in chunk]
        for c, fr, g in zip(chunk, frames, groups):
            report.add_video(fr, c.frames, g)
    return report


def cmd_evaluate(args) -> int:
    model, _, _ = load_model(args.ckpt)
    samples = read_dataset(args.data)
    if args.limit:
        samples = samples[:args.limit]
    report = evaluate_model(model, samples)
    text = report.to_text([p.value for p in PATTERNS])
    Path(args.report).parent.mkdir(parents=True, exist_ok=True)
    Path(args.report).write_text(text)
    sys.stdout.write(text)
    return EXIT_OK


def ablation_table(rows) -> str:
    """``rows``: (name, ssim, mse) triples."""
    lines = ["model\tSSIM\tMSE"]
    lines += [f"{name}\t{s:.4f}\t{m:.6f}" for name, s, m in rows]
    return "\n".join(lines) + "\n"


def cmd_ablate(args) -> int:
    cfg = _config(args.config)
    if args.vqvae:
        cfg.set("paths.vqvae", args.vqvae)
    samples = read_dataset(args.data)
    held = read_dataset(args.eval_data) if args.eval_data else samples
    out = _out_dir(args.out)
    cfg.archive(out)
    rows = []
    for name, baseline in ABLATION_ROWS:
        model, _, _ = _train_one(cfg, samples, _out_dir(out / baseline), baseline)
        rep = evaluate_model(model, held)
        rows.append((name, rep.mean_ssim, rep.mean_mse))
    table = ablation_table(rows)
    (out / "ablation.txt").write_text(table)
    sys.stdout.write(table)
    return EXIT_OK


# ---------------------------------------------------------------- entry point


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="tivode", description="Text+image conditioned video generation with a latent ODE.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="render a synthetic moving-shapes dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--samples", type=int, default=200)
    g.add_argument("--shapes", type=int, default=1)
    g.add_argument("--frames", type=int, default=8)
    g.add_argument("--size", type=int, default=32)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--split", default="train", choices=("train", "test", "val"))
    g.set_defaults(fn=cmd_gen_data)

    for name, fn, help_ in (("pretrain-vqvae", cmd_pretrain, "pretrain the VQ-VAE on dataset frames"),
                            ("train", cmd_train, "train the video model (or a baseline)"),
                            ("ablate", cmd_ablate, "train all three variants and compare them")):
        s = sub.add_parser(name, help=help_)
        s.add_argument("--config", default=None)
        s.add_argument("--data", required=True)
        s.add_argument("--out", required=True)
        if fn is not cmd_pretrain:
            s.add_argument("--vqvae", default=None, help="pretrained VQ-VAE checkpoint (overrides paths.vqvae)")
        if fn is cmd_ablate:
            s.add_argument("--eval-data", default=None, help="held-out dataset for the comparison")
        s.set_defaults(fn=fn)

    s = sub.add_parser("generate", help="generate frames from an image and a caption")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--image", required=True, help="first frame as a PGM file")
    s.add_argument("--caption", required=True)
    s.add_argument("--times", default="fps:7", help='comma list in [0,1] or "fps:<n>"')
    s.add_argument("--out-dir", required=True)
    s.set_defaults(fn=cmd_generate)

    s = sub.add_parser("evaluate", help="score generated videos against ground truth")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--report", required=True)
    s.add_argument("--limit", type=int, default=0)
    s.set_defaults(fn=cmd_evaluate)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        with thread_limit():
            return args.fn(args)
    except (ArgError, InputError, DimensionError, ContractError, UnsupportedGridError) as exc:
        print(f"tivode: error: {exc}", file=sys.stderr)
        return EXIT_ARGS
    except TrainingError as exc:
        print(f"tivode: training diverged: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except SolverError as exc:
        print(f"tivode: solver failed: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    except (FormatError, OSError) as exc:
        print(f"tivode: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
