"""Parameter-sharing schemes for high-dimensional Hough matching kernels.

A kernel acts on pairs of offsets ``(z, z')``, one offset per image, each
ranging over a symmetric window ``[-h//2..h//2] x [-w//2..w//2]`` (plus a
scale axis for 6D kernels). Sharing schemes collapse offset pairs into a small
set of parameter slots:

* ``full``   - every pair has its own slot.
* ``iso``    - pairs share a slot when their displacement ``z' - z`` has the
  same group-wise norm (squared spatial norm, absolute scale offset).
* ``psi``    - position-sensitive isotropic: the displacement norm plus the
  unordered pair of endpoint norms, taken per group.
* ``cp_full``/``cp_psi`` - center-pivot variants that keep only pairs with
  ``z = 0`` or ``z' = 0``; every other weight is identically zero.

Dense weights are ``params[slot] / share_count[slot]`` so that gradients of
heavily shared slots stay on the same scale as unshared ones.
"""

from __future__ import annotations

import enum
import functools
import itertools
from dataclasses import dataclass, field

import numpy as np

UNSUPPORTED = -1


class Scheme(str, enum.Enum):
    FULL = "full"
    ISO = "iso"
    PSI = "psi"
    CP_FULL = "cp_full"
    CP_PSI = "cp_psi"

    @property
    def center_pivot(self):
        return self in (Scheme.CP_FULL, Scheme.CP_PSI)


@dataclass(frozen=True)
class KernelDims:
    h: int
    w: int
    s: int | None = None

    def __post_init__(self):
        for name, v in (("h", self.h), ("w", self.w), ("s", self.s)):
            if v is None and name == "s":
                continue
            if int(v) != v or v < 1 or v % 2 == 0:
                raise ValueError(f"kernel extent {name} must be an odd positive int, got {v}")

    @classmethod
    def parse(cls, dims):
        """Build from a tuple/list ``(h, w)`` or ``(h, w, s)``, or pass through."""
        if isinstance(dims, KernelDims):
            return dims
        dims = tuple(int(d) for d in dims)
        if len(dims) not in (2, 3):
            raise ValueError(f"kernel dims must have 2 or 3 entries, got {dims}")
        return cls(*dims)

    @property
    def half(self):
        """Per-side window shape."""
        return (self.h, self.w) if self.s is None else (self.h, self.w, self.s)

    @property
    def shape(self):
        """Dense kernel shape: per-side window twice."""
        return self.half + self.half

    @property
    def ndim(self):
        return 2 * len(self.half)

    @property
    def half_volume(self):
        return int(np.prod(self.half))

    def offsets(self):
        """All per-side offsets in row-major order."""
        ranges = [range(-(n // 2), n // 2 + 1) for n in self.half]
        return list(itertools.product(*ranges))

    def as_list(self):
        return list(self.half)


def group_norm(v):
    """Group-wise norm of an offset: (squared spatial norm, |scale offset|)."""
    return (v[0] * v[0] + v[1] * v[1], abs(v[2]) if len(v) > 2 else 0)


def _pair_key(scheme, z, zp, flat):
    if scheme is Scheme.FULL:
        return flat
    d = tuple(b - a for a, b in zip(z, zp))
    if scheme is Scheme.ISO:
        return group_norm(d)
    if scheme is Scheme.PSI:
        (dxy, ds), (zxy, zs), (pxy, ps) = group_norm(d), group_norm(z), group_norm(zp)
        # endpoint norms enter as unordered pairs, each group sorted independently
        return (dxy, ds, min(zxy, pxy), max(zxy, pxy), min(zs, ps), max(zs, ps))
    zero = (0,) * len(z)
    if z != zero and zp != zero:
        return None
    if scheme is Scheme.CP_PSI:
        return group_norm(zp if z == zero else z)
    # cp_full: z = 0 side indexed by z', the z' = 0 side by z; (0, 0) lives on the first
    return ("c", zp) if z == zero else ("c'", z)


@functools.lru_cache(maxsize=None)
def _index_map(scheme, dims):
    offs = dims.offsets()
    keys = []
    for flat, (z, zp) in enumerate(itertools.product(offs, offs)):
        keys.append(_pair_key(scheme, z, zp, flat))
    distinct = sorted({k for k in keys if k is not None})
    slot_of = {k: i for i, k in enumerate(distinct)}
    index_map = np.array([UNSUPPORTED if k is None else slot_of[k] for k in keys], dtype=np.int64)
    index_map = index_map.reshape(dims.shape)
    share_count = np.bincount(index_map[index_map >= 0], minlength=len(distinct)).astype(np.int64)
    index_map.flags.writeable = False
    share_count.flags.writeable = False
    return index_map, share_count


def build_index_map(scheme, dims):
    """Map every offset pair of the dense kernel to a parameter slot.

    Returns ``(index_map, share_count)``. ``index_map`` has the dense kernel
    shape and holds ``-1`` at pairs a center-pivot scheme does not support.
    """
    return _index_map(Scheme(scheme), KernelDims.parse(dims))


def param_count(scheme, dims):
    return int(build_index_map(scheme, dims)[1].size)


def supported_count(scheme, dims):
    """Number of offset pairs carrying a (possibly nonzero) weight."""
    return int(build_index_map(scheme, dims)[1].sum())


def zero_offset_slot(scheme, dims):
    index_map, _ = build_index_map(scheme, dims)
    dims = KernelDims.parse(dims)
    return int(index_map[tuple(n // 2 for n in dims.shape)])


@dataclass
class SharedKernel:
    dims: KernelDims
    scheme: Scheme
    params: np.ndarray
    bias: float = 0.0
    index_map: np.ndarray = field(init=False, repr=False)
    share_count: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        self.dims = KernelDims.parse(self.dims)
        self.scheme = Scheme(self.scheme)
        self.index_map, self.share_count = build_index_map(self.scheme, self.dims)
        self.params = np.asarray(self.params, dtype=np.float64).copy()
        if self.params.shape != (self.share_count.size,):
            raise ValueError(
                f"{self.scheme.value} kernel {self.dims.half} needs {self.share_count.size} params, "
                f"got shape {self.params.shape}"
            )
        self.bias = float(self.bias)

    @classmethod
    def init(cls, scheme, dims, spread=0.01, center_boost=1.0, seed=0):
        """Random init scaled by share counts, with a boost on the zero-offset pair.

        Materialized weights are ``g + center_boost * [zero-offset slot]`` with
        ``g ~ N(0, spread^2)`` per slot, independent of the sharing scheme.
        """
        scheme, dims = Scheme(scheme), KernelDims.parse(dims)
        _, share = build_index_map(scheme, dims)
        rng = np.random.default_rng(seed)
        params = share * rng.normal(0.0, spread, size=share.size)
        params[zero_offset_slot(scheme, dims)] += center_boost * share[zero_offset_slot(scheme, dims)]
        return cls(dims, scheme, params, 0.0)

    @classmethod
    def delta(cls, scheme, dims, value=1.0, bias=0.0):
        """Kernel whose dense weight is ``value`` at the zero-offset slot and 0 elsewhere."""
        scheme, dims = Scheme(scheme), KernelDims.parse(dims)
        _, share = build_index_map(scheme, dims)
        params = np.zeros(share.size)
        slot = zero_offset_slot(scheme, dims)
        params[slot] = value * share[slot]
        return cls(dims, scheme, params, bias)

    @property
    def param_count(self):
        return int(self.share_count.size)

    def copy(self):
        return SharedKernel(self.dims, self.scheme, self.params.copy(), self.bias)

    def materialize(self):
        return materialize(self)


def materialize(k):
    """Dense kernel tensor; unsupported pairs are zero."""
    weights = k.params / k.share_count
    dense = np.zeros(k.dims.shape)
    mask = k.index_map >= 0
    dense[mask] = weights[k.index_map[mask]]
    return dense


def scatter_grad(k, dense_grad):
    """Pull a gradient w.r.t. the dense kernel back onto the shared params."""
    dense_grad = np.asarray(dense_grad, dtype=np.float64)
    if dense_grad.shape != k.dims.shape:
        raise ValueError(f"dense gradient shape {dense_grad.shape} != kernel shape {k.dims.shape}")
    mask = k.index_map >= 0
    summed = np.bincount(k.index_map[mask], weights=dense_grad[mask], minlength=k.param_count)
    return summed / k.share_count


def _map_groups(k):
    """Scale-offset groups used when flattening a 6D kernel into 4D maps."""
    side = range(-(k.dims.s // 2), k.dims.s // 2 + 1)
    pairs = list(itertools.product(side, side))
    base = {Scheme.CP_FULL: Scheme.FULL, Scheme.CP_PSI: Scheme.PSI}.get(k.scheme, k.scheme)
    if base is Scheme.FULL:
        return [((zs, ps), [(zs, ps)]) for zs, ps in pairs]
    groups = {}
    for zs, ps in pairs:
        if base is Scheme.ISO:
            key = (abs(ps - zs),)
        else:
            key = (abs(ps - zs), min(abs(zs), abs(ps)), max(abs(zs), abs(ps)))
        groups.setdefault(key, []).append((zs, ps))
    return sorted(groups.items())


def export_weight_maps(k):
    """Split a kernel into 4D weight maps, one per scale-offset group.

    Returns a list of ``(label, map)``; ``label`` is a dict describing the
    group and the (z_s, z'_s) pairs it covers. A 4D kernel yields one map.
    """
    dense = materialize(k)
    if k.dims.s is None:
        return [({"group": "4d", "scale_pairs": []}, dense)]
    c = k.dims.s // 2
    out = []
    for key, members in _map_groups(k):
        zs, ps = members[0]
        label = {"group": list(key), "scale_pairs": [list(m) for m in members]}
        out.append((label, dense[:, :, zs + c, :, :, ps + c].copy()))
    return out


# stack layouts reported in ablations: (6D kernel scheme per level, n levels, 4D scheme)
STACKS = {
    "psi_6d4d": [("psi", (5, 5, 3)), ("psi", (5, 5))],
    "full_6d4d": [("full", (5, 5, 3)), ("full", (5, 5))],
    "iso_6d4d": [("iso", (5, 5, 3)), ("iso", (5, 5))],
    "psi_4d4d": [("psi", (5, 5)), ("psi", (5, 5))],
    "full_4d4d": [("full", (5, 5)), ("full", (5, 5))],
    "iso_4d4d": [("iso", (5, 5)), ("iso", (5, 5))],
    "cp_psi_2level": [("cp_psi", (5, 5, 3)), ("cp_psi", (5, 5, 3)), ("cp_psi", (5, 5))],
}


def stack_param_count(layers):
    return sum(param_count(scheme, dims) for scheme, dims in layers)
