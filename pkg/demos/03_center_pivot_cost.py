# Center-pivot convolution: same answer on its support, far fewer multiply-adds.
import time

import numpy as np

from chm.convengine import conv_cp, conv_dense
from chm.kernels import SharedKernel

rng = np.random.default_rng(2)
c = rng.random((6, 6, 3, 6, 6, 3))
k = SharedKernel.init("cp_psi", (5, 5, 3), spread=0.5, seed=3)

for name, fn in (("dense", conv_dense), ("center-pivot", conv_cp)):
    stats = {}
    t0 = time.perf_counter()
    out = fn(c, k, stats)
    print(f"{name:>12}: {stats['taps']:5d} MAC/output, {1e3 * (time.perf_counter() - t0):7.1f} ms")

print("max |difference|:", np.abs(conv_dense(c, k) - conv_cp(c, k)).max())
