# Local Hough voting with an isotropic kernel is the same thing as a 6D convolution.
import numpy as np

from chm.convengine import conv_dense
from chm.kernels import SharedKernel, build_index_map
from chm.matching import local_vote_oracle

rng = np.random.default_rng(1)
dims = (3, 3, 3)

# a vote weight that depends only on the group-wise distance of the displacement
table = rng.normal(size=(9, 3))
index_map, share = build_index_map("iso", dims)
params = np.zeros(share.size)
for idx in np.ndindex(*(dims + dims)):
    d = np.subtract(idx[3:], idx[:3])
    params[index_map[idx]] = table[d[0] ** 2 + d[1] ** 2, abs(d[2])] * share[index_map[idx]]
kernel = SharedKernel(dims, "iso", params)

c = rng.random((4, 4, 2, 4, 4, 2))
out = conv_dense(c, kernel)

x, xp = (1, 2, 0), (3, 1, 1)
vote = local_vote_oracle(c, x, xp, lambda sq, ds: table[sq, ds], dims)
print("convolution output", out[x + xp])
print("direct vote       ", vote)
