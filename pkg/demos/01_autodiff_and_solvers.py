"""Walk through the numerical core: the autodiff tape and the two ODE solvers.

Run:  python demos/01_autodiff_and_solvers.py
"""
import math

import numpy as np

from tivode import tensor as T
from tivode.odesolve import SolverConfig, TimeGrid, solve_at

# A tiny graph. Gradients come off the tape in reverse creation order.
x = T.Tensor(np.array([[0.5, -1.0], [2.0, 0.1]]), requires_grad=True)
w = T.Tensor(np.array([[1.0, 2.0], [-0.5, 0.3]]), requires_grad=True)
loss = T.sum_(T.tanh(T.matmul(x, w)))
T.backward(loss)
print("loss", loss.item())
print("d loss / d x\n", x.grad)

# Check one entry against a central difference.
h = 1e-5
xp, xm = x.data.copy(), x.data.copy()
xp[0, 1] += h
xm[0, 1] -= h
num = (np.tanh(xp @ w.data).sum() - np.tanh(xm @ w.data).sum()) / (2 * h)
print(f"analytic {x.grad[0, 1]:.10f}  numeric {num:.10f}")

# y' = -y. Fixed-step RK4 error shrinks ~16x per halving of h.
decay = lambda y, t: -y  # noqa: E731
print("\nRK4 on y' = -y")
prev = None
for h in (0.1, 0.05, 0.025):
    cfg = SolverConfig(h_init=h, h_min=h / 10)
    y1 = solve_at(decay, np.array([1.0]), TimeGrid([0.0, 1.0]), cfg).states[-1][0]
    err = abs(y1 - math.exp(-1))
    note = f"  order {math.log2(prev / err):.2f}" if prev else ""
    print(f"  h={h:<6} error {err:.3e}{note}")
    prev = err

# Adaptive Dormand-Prince lands exactly on every requested time.
cfg = SolverConfig(method="dopri5", rtol=1e-6, atol=1e-6, h_init=0.1)
grid = TimeGrid([0.0, 0.1, 0.15, 0.7, 1.0])
traj = solve_at(decay, np.array([1.0]), grid, cfg)
print("\nDOPRI5 states vs exp(-t)")
for t, y in zip(grid, traj.states):
    print(f"  t={t:<5} y={y[0]:.8f}  exact={math.exp(-t):.8f}")
s = traj.stats
print(f"  {s.accepted} accepted steps, {s.rejected} rejected, {s.nfev} field evaluations")
