# One forward pass: features -> 6D correlation -> CHM -> flow -> transferred keypoints.
import numpy as np

from chm.config import RunConfig
from chm.convengine import scale_argmax_histogram
from chm.flow import form_flow, kernel_soft_argmax
from chm.synthetic import shift_sample
from chm.traincheck import init_params, predict

cfg = RunConfig(H=8, W=8, H_up=12, W_up=12, S=3, kernel_6d=[3, 3, 3], kernel_4d=[3, 3], levels=2, rho=4)
sample = shift_sample(cfg, shift=(1, 1), channels=16, rng=0)
params = init_params(cfg, [16, 16])

pred, flow, out = predict(cfg, params, sample)
print("final correlation", out.corr.shape, "flow", flow.shape)

probs = kernel_soft_argmax(out.corr, cfg.sigma_g)
print("each soft-argmax slice sums to", probs[0, 0].sum().round(12))
print("scale pairs picked by the maxpool at level 0:\n", scale_argmax_histogram(out.scale_argmax[0], cfg.S))

err = np.linalg.norm(pred - sample.pair.trg_kps, axis=1)
print("untrained keypoint error (px): mean %.1f, max %.1f" % (err.mean(), err.max()))
