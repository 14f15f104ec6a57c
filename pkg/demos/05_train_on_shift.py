# Train the CHM kernels on a synthetic translated pair (about a minute).
import numpy as np

from chm.config import RunConfig
from chm.flow import pck, pixels_to_grid
from chm.synthetic import shift_sample
from chm.traincheck import check_gradients, init_params, predict, train

cfg = RunConfig(scheme="cp_psi", engine="cp", H=12, W=12, H_up=24, W_up=24, S=1, scale_factors=[1.0],
                kernel_6d=[5, 5, 1], kernel_4d=[5, 5], levels=1, rho=4, lr=5e-2)
sample = shift_sample(cfg, shift=(1, 2), channels=64, margin=2, rng=0)
params = init_params(cfg, [64])

# the hand-written backward pass agrees with finite differences; the step is kept
# small because the loss jumps wherever a soft-argmax mask re-centres on a new peak
print(check_gradients(cfg, params, sample, eps=1e-6, max_entries=3))


def report(step, loss):
    if step % 50 == 0:
        print(f"step {step:3d}  loss {loss:7.3f} px")


params, trace = train(cfg, params, [sample], 300, callback=report)
pred, _, _ = predict(cfg, params, sample)
pair = sample.pair
cells = np.linalg.norm(pixels_to_grid(pred, pair.trg_size, cfg.base) - pixels_to_grid(pair.trg_kps, pair.trg_size, cfg.base), axis=1)
print("final loss %.3f px, max error %.3f cells, PCK@0.1 %.2f" % (trace[-1], cells.max(), pck(pred, pair.trg_kps, 0.1, "img", pair)))
