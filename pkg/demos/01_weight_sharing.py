# How much does weight sharing shrink a 6D Hough kernel?
import numpy as np

from chm.kernels import SharedKernel, build_index_map, export_weight_maps, materialize, param_count

dims = (5, 5, 3)
for scheme in ("full", "psi", "iso", "cp_psi"):
    print(f"{scheme:>7}: {param_count(scheme, dims):5d} free parameters for a 5x5x3 x 5x5x3 kernel")

# every dense weight is params[slot] / share_count[slot], so a slot shared by
# many offset pairs still gets a per-entry weight of the same magnitude
index_map, share = build_index_map("psi", dims)
print("largest psi class covers", share.max(), "offset pairs")

k = SharedKernel.init("psi", dims, spread=0.1, seed=0)
dense = materialize(k)
print("dense kernel", dense.shape, "center weight", dense[2, 2, 1, 2, 2, 1].round(3))

# psi groups scale pairs by their scale distances: 4 distinct 5x5x5x5 maps
for label, m in export_weight_maps(k):
    print(label["group"], "scale pairs", label["scale_pairs"], "map range", np.ptp(m).round(3))
