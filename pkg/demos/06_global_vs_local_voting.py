# Global offset voting cannot tell an isolated background match from a consistent cluster.
import numpy as np

from chm.convengine import conv_dense
from chm.kernels import SharedKernel, build_index_map
from chm.matching import rhm_vote

n = 10
c = np.zeros((n, n, n, n))
for y in range(2, 5):
    for x in range(2, 5):
        c[y, x, y + 1, x + 2] = 0.9  # a 3x3 patch moving by (1, 2)
c[8, 1, 9, 3] = 0.9  # a lone match with the same offset somewhere else

hough, rescored = rhm_vote(c, 1.0)
inlier, lone = (3, 3, 4, 5), (8, 1, 9, 3)
print("global vote weight, inlier vs lone match:", hough[1 + n - 1, 2 + n - 1], "for both")
print("rescored:", rescored[inlier], rescored[lone])

k = SharedKernel.delta("iso", (3, 3), 0.0)
k.params[:] = build_index_map("iso", (3, 3))[1]
local = conv_dense(c, k)
print("local votes, inlier vs lone match:", local[inlier], local[lone])
