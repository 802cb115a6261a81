"""Train a small TiV-ODE model on moving shapes, then play it back at several frame rates.

A short budget (a few minutes on one core), so expect blurry but moving
glyphs. Frames are written as PGM files under demos/out/.

Run:  python demos/02_train_and_generate.py [steps]
"""
import logging
import sys
import time
from pathlib import Path

import numpy as np

from tivode import pgm
from tivode.metrics import MetricReport
from tivode.model import ModelConfig, build_model
from tivode.odesolve import TimeGrid
from tivode.shapes import make_dataset
from tivode.train import PretrainConfig, Trainer, TrainConfig, VqPretrainer

logging.basicConfig(level=logging.INFO, format="%(message)s")
steps = int(sys.argv[1]) if len(sys.argv) > 1 else 300
out = Path(__file__).parent / "out"
out.mkdir(exist_ok=True)

train = make_dataset(100, n_shapes=1, T=8, size=32, split="train")
test = make_dataset(10, n_shapes=1, T=8, size=32, split="test")
print("example caption:", train[0].caption)

# 1. the VQ-VAE learns to reconstruct single frames
model = build_model(ModelConfig(), seed=0)
t0 = time.time()
images = np.stack([s.frames for s in train])
pre = VqPretrainer(model.vqvae, images, PretrainConfig(epochs=4))
pre.fit()
print(f"VQ-VAE reconstruction MSE {pre.eval_mse():.4f} ({time.time() - t0:.0f}s)")

# 2. with the autoencoder frozen, learn the latent dynamics
cfg = TrainConfig(steps=steps, loss_space="pixel+latent",
                  freeze_encoder=True, freeze_decoder=True, freeze_codebook=True)
trainer = Trainer(model, train, cfg)
trainer.fit()
losses = trainer.losses()
print(f"loss {losses[:10].mean():.4f} -> {losses[-20:].mean():.4f} over {len(losses)} steps")

# 3. held-out score on the training frame rate
rep = MetricReport()
for s in test:
    rep.add_video(model.generate(s.frames[0], s.caption, s.times), s.frames)
print(f"held-out SSIM {rep.mean_ssim:.3f}  PSNR {rep.mean_psnr:.1f} dB")

# 4. the same model at other frame rates, and a slow-motion middle section
s = test[0]
grids = {
    "fps4": TimeGrid.uniform(5),
    "fps20": TimeGrid.uniform(21),
    "slowmo": TimeGrid(list(np.linspace(0, 0.4, 3)[:-1]) + list(np.linspace(0.4, 0.6, 11))
                       + list(np.linspace(0.6, 1.0, 3)[1:])),
}
for name, grid in grids.items():
    frames = model.generate(s.frames[0], s.caption, grid)
    d = out / name
    d.mkdir(exist_ok=True)
    for t, f in zip(grid, frames):
        pgm.write(d / f"frame_{t:.4f}.pgm", f)
    print(f"{name}: {len(grid)} frames -> {d}")
print("caption was:", s.caption)
