"""Walk through the selective scan and one VisionMamba block.

Run with ``python demos/01_scan_and_block.py``. Everything is small and CPU-only.
"""
# %% setup
import numpy as np

from mamapp import MamAppConfig, Tensor, build, count_params
from mamapp.ssm import VisionMambaBlock, scan_chunked, scan_sequential, selective_scan_core
from mamapp.model import summarize_params

np.set_printoptions(precision=4, suppress=True, linewidth=110)
rng = np.random.default_rng(0)

# %% the recurrence on a toy sequence
# one channel, two state entries, five tokens
L, D, N = 5, 1, 2
x = rng.standard_normal((1, L, D))
delta = np.full((1, L, D), 0.5)
A = -np.array([[1.0, 2.0]])
Bm = np.ones((1, L, N))
Cm = np.ones((1, L, N))
skip = np.zeros(D)
y = scan_sequential(x, delta, A, Bm, Cm, skip)
print("x:", x.ravel())
print("y:", y.ravel())

# by hand: h_t = exp(delta A) h_{t-1} + delta B x_t, y_t = C . h_t
h = np.zeros(N)
manual = []
for t in range(L):
    h = np.exp(0.5 * A[0]) * h + 0.5 * x[0, t, 0]
    manual.append(h.sum())
print("hand-rolled:", np.array(manual))

# %% chunked evaluation gives the same numbers
args = (rng.standard_normal((2, 40, 4)), rng.uniform(0.01, 1, (2, 40, 4)), -np.exp(rng.standard_normal((4, 3))),
        rng.standard_normal((2, 40, 3)), rng.standard_normal((2, 40, 3)), rng.standard_normal(4))
print("chunked vs sequential:", np.abs(scan_chunked(*args, chunk=8) - scan_sequential(*args)).max())

# %% gradients flow through the scan
ins = [Tensor(a, requires_grad=True, dtype=np.float64) for a in args]
selective_scan_core(*ins).sum().backward()
print("grad norms (x, delta, A, B, C, D):", [round(float(np.linalg.norm(t.grad)), 3) for t in ins])

# %% one block on a 4096-token image
block = VisionMambaBlock(32, 32, 16, 2, 4, rng)
tokens = Tensor(rng.standard_normal((1, 4096, 32)).astype(np.float32))
print("block output:", block(tokens).shape)

# %% the whole network and where its parameters live
model = build(MamAppConfig())
total, breakdown = count_params(model)
for name, n in summarize_params(breakdown).items():
    print(f"{name:10s} {n:6d}")
print("total", total)
