"""Invariant geometric featurization and rigid-motion helpers.

Distances, triplet angles and radial-basis expansions participate in the
autodiff graph as custom primitives whose forward/backward pairs live in
:mod:`moldiff.kernels`. They are kept in float64 regardless of the model
precision; casting to the model dtype happens after the basis expansion,
which is what makes the equivariance tolerances attainable in float32
training.
"""

from dataclasses import dataclass

import numpy as np

from . import kernels
from .autodiff import Tensor


@dataclass
class RadialBasis:
    """Gaussian basis set: basis k evaluates exp(-(x - c_k)^2 / (2 w_k^2))."""

    centers: np.ndarray
    widths: np.ndarray

    def __post_init__(self):
        self.centers = np.asarray(self.centers, dtype=np.float64)
        self.widths = np.asarray(self.widths, dtype=np.float64)
        if self.centers.size < 1:
            raise ValueError("need at least one basis center")
        if self.centers.size > 1 and not np.all(np.diff(self.centers) > 0):
            raise ValueError("basis centers must be strictly increasing")
        if np.any(self.widths <= 0):
            raise ValueError("basis widths must be positive")

    @property
    def n_bases(self):
        return self.centers.size


def distance_basis(n_bases=32, r_max=12.0):
    """Bases uniform on [0, r_max] angstrom with width = spacing."""
    centers = np.linspace(0.0, r_max, n_bases)
    spacing = r_max / max(n_bases - 1, 1)
    return RadialBasis(centers, np.full(n_bases, spacing))


def angle_basis(n_bases=32):
    """Bases uniform on [0, pi] radians with width = spacing."""
    centers = np.linspace(0.0, np.pi, n_bases)
    spacing = np.pi / max(n_bases - 1, 1)
    return RadialBasis(centers, np.full(n_bases, spacing))


def pairwise_distances(pos):
    """Tensor (N, 3) -> Tensor (N, N) of Euclidean distances."""
    p = np.ascontiguousarray(pos.data)
    data = kernels.pairwise_dist_fwd(p)

    def bw(g):
        g = np.ascontiguousarray(g, dtype=p.dtype)
        Tensor._acc(pos, kernels.pairwise_dist_bwd(p, data, g))

    return Tensor._node(data, (pos,), bw)


def triplet_angles(pos):
    """Tensor (N, 3) -> Tensor (N, N, N); angle at vertex i between i->j, i->k.

    Degenerate entries (i=j, i=k, coincident atoms) are 0 with zero gradient.
    """
    p = np.ascontiguousarray(pos.data)
    data = kernels.angles_fwd(p)

    def bw(g):
        g = np.ascontiguousarray(g, dtype=p.dtype)
        Tensor._acc(pos, kernels.angles_bwd(p, g))

    return Tensor._node(data, (pos,), bw)


def rbf_expand(x, basis):
    """Tensor (...,) -> Tensor (..., n_bases) Gaussian expansion."""
    xd = np.ascontiguousarray(x.data)
    c = basis.centers.astype(xd.dtype)
    w = basis.widths.astype(xd.dtype)
    data = kernels.rbf_fwd(xd, c, w)

    def bw(g):
        g = np.ascontiguousarray(g, dtype=xd.dtype)
        Tensor._acc(x, kernels.rbf_bwd(xd, c, w, g))

    return Tensor._node(data, (x,), bw)


def triplet_mask(dist):
    """Valid-triplet mask (N,N,N) from a distance matrix (plain ndarray)."""
    return kernels.triplet_mask(np.ascontiguousarray(dist))


def project_zero_com(pos):
    """Subtract the column mean; works on ndarrays and Tensors alike."""
    return pos - pos.mean(axis=0, keepdims=True)


def com_norm(pos):
    """Max abs column mean; 0 for a perfectly centered cloud."""
    return float(np.max(np.abs(np.mean(pos, axis=0))))


def random_rotation(rng):
    """Uniform random proper rotation (det +1) via QR of a Gaussian matrix."""
    m = rng.standard_normal((3, 3))
    q, r = np.linalg.qr(m)
    q = q * np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


def random_rigid_motion(rng, translation_scale=1.0, reflect=False):
    """Random orthogonal matrix (optionally improper) and translation."""
    q = random_rotation(rng)
    if reflect:
        q = q @ np.diag([1.0, 1.0, -1.0])
    t = rng.standard_normal(3) * translation_scale
    return q, t


def apply_rigid(pos, q, t):
    return pos @ q.T + t
