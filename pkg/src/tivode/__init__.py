"""Caption-controlled video generation with a latent neural ODE, on numpy.

Modules:

* :mod:`tivode.tensor` - fp64 tensors with reverse-mode autodiff
* :mod:`tivode.odesolve` - RK4 / Dormand-Prince integration on time grids
* :mod:`tivode.vqvae` - convolutional VQ-VAE with an EMA codebook
* :mod:`tivode.fusion` - image-query / text-key cross-attention fusion
* :mod:`tivode.model` - the end-to-end model and step-wise baselines
* :mod:`tivode.shapes` - synthetic moving-shapes videos with captions
* :mod:`tivode.metrics` - MSE, PSNR, SSIM
* :mod:`tivode.cli` - the ``tivode`` command
"""
from .errors import (ContractError, DimensionError, FormatError, InputError, IntegrationError, SolverError,
                     StepBudgetError, StiffnessError, TivodeError, TrainingError, UnsupportedGridError)
from .model import ModelConfig, StepModel, TivOdeModel, build_model
from .odesolve import SolverConfig, TimeGrid, solve_at
from .shapes import MotionPattern, make_dataset, make_sample
from .tensor import Parameter, Tensor, backward, no_grad

__version__ = "0.1.0"
