"""Hot numeric kernels with numba-jitted and pure-numpy implementations.

Every kernel exists twice: a numpy version (reference, always available)
and a numba ``@njit`` version compiled lazily. The active backend is chosen
at import from the ``MOLDIFF_NUMBA`` environment variable (set it to ``0``
to force the numpy path) and can be switched at runtime with
:func:`set_backend`. Reductions keep a fixed order within each backend, so
a run is bit-reproducible under the backend it started with. Across
backends, discrete outputs (bond decisions, masks) and the valency sums
agree bitwise; the float geometry kernels agree to roundoff.
"""

import math
import os

import numpy as np

try:
    from numba import njit

    HAS_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    HAS_NUMBA = False

    def njit(*args, **kwargs):
        def wrap(f):
            return f

        return wrap if not args or callable(args[0]) is False else wrap(args[0])


# Clamp for arccos arguments; collinear triplets would otherwise produce
# infinite derivatives.
COS_CLIP = 1e-7
# Below this separation two atoms count as coincident and the triplet is
# degenerate (angle 0, zero gradient, masked out of attention).
COINCIDENT_TOL = 1e-9

# Bond-order decision rules for decide_bonds.
RULE_HIGHEST = 0  # highest bond order whose margin is negative
RULE_ARGMIN = 1   # literal minimum-margin index


# ---------------------------------------------------------------------------
# numpy implementations
# ---------------------------------------------------------------------------


def _pairwise_dist_fwd_np(pos):
    """pos (N, 3) -> distance matrix (N, N), zero diagonal."""
    diff = pos[:, None, :] - pos[None, :, :]
    dist = np.sqrt(np.sum(diff * diff, axis=-1))
    np.fill_diagonal(dist, 0.0)
    return dist


def _pairwise_dist_bwd_np(pos, dist, grad_out):
    """Gradient of the distance matrix w.r.t. pos. Coincident pairs get zero."""
    n = pos.shape[0]
    safe = np.where(dist > COINCIDENT_TOL, dist, 1.0)
    g = np.where(dist > COINCIDENT_TOL, grad_out, 0.0)
    diff = pos[:, None, :] - pos[None, :, :]
    unit = diff / safe[:, :, None]
    # d d_ij / d p_i = unit_ij, d d_ij / d p_j = -unit_ij
    grad_pos = np.einsum("ij,ijc->ic", g, unit) - np.einsum("ij,ijc->jc", g, unit)
    return grad_pos.reshape(n, 3)


def _angles_fwd_np(pos):
    """Angle tensor (N, N, N): angle at vertex i between rays i->j and i->k.

    Degenerate triplets (repeated indices or coincident atoms) are 0.
    """
    n = pos.shape[0]
    diff = pos[:, None, :] - pos[None, :, :]            # diff[i, j] = p_i - p_j
    norms = np.sqrt(np.sum(diff * diff, axis=-1))
    dots = np.einsum("ijc,ikc->ijk", diff, diff)
    denom = norms[:, :, None] * norms[:, None, :]
    valid = denom > COINCIDENT_TOL * COINCIDENT_TOL
    cosang = np.where(valid, dots / np.where(valid, denom, 1.0), 1.0)
    cosang = np.clip(cosang, -1.0 + COS_CLIP, 1.0 - COS_CLIP)
    ang = np.arccos(cosang)
    idx = np.arange(n)
    ang[idx, idx, :] = 0.0
    ang[idx, :, idx] = 0.0
    short = norms <= COINCIDENT_TOL
    ang = np.where(short[:, :, None] | short[:, None, :], 0.0, ang)
    return ang


def _angles_bwd_np(pos, grad_out):
    """Gradient of the angle tensor w.r.t. pos (clamped-arccos derivative)."""
    n = pos.shape[0]
    diff = pos[:, None, :] - pos[None, :, :]
    norms = np.sqrt(np.sum(diff * diff, axis=-1))
    dots = np.einsum("ijc,ikc->ijk", diff, diff)
    r1 = norms[:, :, None]
    r2 = norms[:, None, :]
    denom = r1 * r2
    idx = np.arange(n)
    valid = denom > COINCIDENT_TOL * COINCIDENT_TOL
    valid[idx, idx, :] = False
    valid[idx, :, idx] = False

    safe_denom = np.where(valid, denom, 1.0)
    c = np.clip(dots / safe_denom, -1.0 + COS_CLIP, 1.0 - COS_CLIP)
    dphi_dc = -1.0 / np.sqrt(1.0 - c * c)
    scale = np.where(valid, grad_out * dphi_dc, 0.0)

    safe_r1 = np.where(r1 > COINCIDENT_TOL, r1, 1.0)
    safe_r2 = np.where(r2 > COINCIDENT_TOL, r2, 1.0)
    # dc/da = b/(r1 r2) - (a.b) a / (r1^3 r2), a = p_i - p_j, b = p_i - p_k
    a = diff[:, :, None, :]
    b = diff[:, None, :, :]
    dc_da = b / safe_denom[..., None] - dots[..., None] * a / (
        safe_r1[..., None] ** 2 * safe_denom[..., None]
    )
    dc_db = a / safe_denom[..., None] - dots[..., None] * b / (
        safe_r2[..., None] ** 2 * safe_denom[..., None]
    )
    ga = scale[..., None] * dc_da
    gb = scale[..., None] * dc_db
    grad_pos = (
        np.einsum("ijkc->ic", ga + gb)
        - np.einsum("ijkc->jc", ga)
        - np.einsum("ijkc->kc", gb)
    )
    return grad_pos


def _rbf_fwd_np(x, centers, widths):
    """Gaussian basis expansion: x (...,) -> (..., n_bases)."""
    z = (x[..., None] - centers) / widths
    return np.exp(-0.5 * z * z)


def _rbf_bwd_np(x, centers, widths, grad_out):
    """Gradient of the Gaussian expansion w.r.t. x."""
    z = (x[..., None] - centers) / widths
    y = np.exp(-0.5 * z * z)
    return np.sum(grad_out * y * (-z / widths), axis=-1)


def _decide_bonds_np(margins, rule):
    """Bond existence/order from a margin tensor (N, N, nf, nf, 3).

    Absent table entries carry +inf margins and never qualify. Returns
    (isbond bool (N,N,nf,nf), order int64 (N,N,nf,nf)).
    """
    n = margins.shape[0]
    neg = margins < 0.0
    isbond = np.any(neg, axis=-1)
    if rule == RULE_ARGMIN:
        order = np.argmin(margins, axis=-1) + 1
    else:
        # highest order whose margin is negative
        order = np.where(neg[..., 2], 3, np.where(neg[..., 1], 2, 1))
    order = np.where(isbond, order, 0)
    idx = np.arange(n)
    isbond[idx, idx] = False
    order[idx, idx] = 0
    return isbond, order.astype(np.int64)


def _order_matrix_np(dist, type_idx, table, margin_vec, rule):
    """Bond orders (N, N) for atoms with known types (delta probabilities)."""
    n = dist.shape[0]
    d = table[type_idx[:, None], type_idx[None, :]]          # (N, N, 3)
    m = np.where(np.isfinite(d), dist[:, :, None] - (d + margin_vec), np.inf)
    neg = m < 0.0
    isbond = np.any(neg, axis=-1)
    if rule == RULE_ARGMIN:
        order = np.argmin(m, axis=-1) + 1
    else:
        order = np.where(neg[..., 2], 3, np.where(neg[..., 1], 2, 1))
    order = np.where(isbond, order, 0)
    idx = np.arange(n)
    order[idx, idx] = 0
    return order.astype(np.int64)


def _valency_sum_np(p_pair, weights):
    """sum_{j!=i,a,b} p_pair[i,j,a,b] * weights[i,j,a,b], sequential order.

    The accumulation order matches a scalar loop over (j, a, b) in C order
    so results are bit-identical to a brute-force implementation.
    """
    n = p_pair.shape[0]
    prod = np.ascontiguousarray(p_pair * weights)
    idx = np.arange(n)
    prod[idx, idx] = 0.0
    flat = prod.reshape(n, -1)
    return np.add.accumulate(flat, axis=1)[:, -1].copy()


def _triplet_mask_np(dist):
    """Valid-attention mask (N,N,N): i,j,k distinct and legs non-coincident."""
    n = dist.shape[0]
    i = np.arange(n)
    ok_leg = dist > COINCIDENT_TOL
    mask = ok_leg[:, :, None] & ok_leg[:, None, :]
    mask[i, i, :] = False
    mask[i, :, i] = False
    mask[:, i, i] = False
    return mask


# ---------------------------------------------------------------------------
# numba implementations
# ---------------------------------------------------------------------------


@njit(cache=True)
def _pairwise_dist_fwd_nb(pos):
    n = pos.shape[0]
    dist = np.zeros((n, n), dtype=pos.dtype)
    for i in range(n):
        for j in range(i + 1, n):
            dx = pos[i, 0] - pos[j, 0]
            dy = pos[i, 1] - pos[j, 1]
            dz = pos[i, 2] - pos[j, 2]
            d = math.sqrt(dx * dx + dy * dy + dz * dz)
            dist[i, j] = d
            dist[j, i] = d
    return dist


@njit(cache=True)
def _pairwise_dist_bwd_nb(pos, dist, grad_out):
    n = pos.shape[0]
    grad_pos = np.zeros_like(pos)
    for i in range(n):
        for j in range(n):
            if i == j or dist[i, j] <= COINCIDENT_TOL:
                continue
            g = grad_out[i, j] / dist[i, j]
            for c in range(3):
                u = (pos[i, c] - pos[j, c]) * g
                grad_pos[i, c] += u
                grad_pos[j, c] -= u
    return grad_pos


@njit(cache=True)
def _angles_fwd_nb(pos):
    n = pos.shape[0]
    ang = np.zeros((n, n, n), dtype=pos.dtype)
    for i in range(n):
        for j in range(n):
            if j == i:
                continue
            ax = pos[i, 0] - pos[j, 0]
            ay = pos[i, 1] - pos[j, 1]
            az = pos[i, 2] - pos[j, 2]
            r1 = math.sqrt(ax * ax + ay * ay + az * az)
            if r1 <= COINCIDENT_TOL:
                continue
            for k in range(n):
                if k == i:
                    continue
                bx = pos[i, 0] - pos[k, 0]
                by = pos[i, 1] - pos[k, 1]
                bz = pos[i, 2] - pos[k, 2]
                r2 = math.sqrt(bx * bx + by * by + bz * bz)
                if r2 <= COINCIDENT_TOL:
                    continue
                c = (ax * bx + ay * by + az * bz) / (r1 * r2)
                if c > 1.0 - COS_CLIP:
                    c = 1.0 - COS_CLIP
                elif c < -1.0 + COS_CLIP:
                    c = -1.0 + COS_CLIP
                ang[i, j, k] = math.acos(c)
    return ang


@njit(cache=True)
def _angles_bwd_nb(pos, grad_out):
    n = pos.shape[0]
    grad_pos = np.zeros_like(pos)
    for i in range(n):
        for j in range(n):
            if j == i:
                continue
            ax = pos[i, 0] - pos[j, 0]
            ay = pos[i, 1] - pos[j, 1]
            az = pos[i, 2] - pos[j, 2]
            r1 = math.sqrt(ax * ax + ay * ay + az * az)
            if r1 <= COINCIDENT_TOL:
                continue
            for k in range(n):
                if k == i:
                    continue
                g = grad_out[i, j, k]
                if g == 0.0:
                    continue
                bx = pos[i, 0] - pos[k, 0]
                by = pos[i, 1] - pos[k, 1]
                bz = pos[i, 2] - pos[k, 2]
                r2 = math.sqrt(bx * bx + by * by + bz * bz)
                if r2 <= COINCIDENT_TOL:
                    continue
                dot = ax * bx + ay * by + az * bz
                denom = r1 * r2
                c = dot / denom
                if c > 1.0 - COS_CLIP:
                    c = 1.0 - COS_CLIP
                elif c < -1.0 + COS_CLIP:
                    c = -1.0 + COS_CLIP
                s = g * (-1.0 / math.sqrt(1.0 - c * c))
                f1 = dot / (r1 * r1 * denom)
                f2 = dot / (r2 * r2 * denom)
                gax = s * (bx / denom - f1 * ax)
                gay = s * (by / denom - f1 * ay)
                gaz = s * (bz / denom - f1 * az)
                gbx = s * (ax / denom - f2 * bx)
                gby = s * (ay / denom - f2 * by)
                gbz = s * (az / denom - f2 * bz)
                grad_pos[i, 0] += gax + gbx
                grad_pos[i, 1] += gay + gby
                grad_pos[i, 2] += gaz + gbz
                grad_pos[j, 0] -= gax
                grad_pos[j, 1] -= gay
                grad_pos[j, 2] -= gaz
                grad_pos[k, 0] -= gbx
                grad_pos[k, 1] -= gby
                grad_pos[k, 2] -= gbz
    return grad_pos


@njit(cache=True)
def _rbf_fwd_nb(x, centers, widths):
    nb = centers.shape[0]
    flat = x.ravel()
    out = np.empty((flat.shape[0], nb), dtype=x.dtype)
    for i in range(flat.shape[0]):
        for b in range(nb):
            z = (flat[i] - centers[b]) / widths[b]
            out[i, b] = math.exp(-0.5 * z * z)
    return out.reshape(x.shape + (nb,))


@njit(cache=True)
def _rbf_bwd_nb(x, centers, widths, grad_out):
    nb = centers.shape[0]
    flat = x.ravel()
    gflat = grad_out.reshape(flat.shape[0], nb)
    out = np.zeros(flat.shape[0], dtype=x.dtype)
    for i in range(flat.shape[0]):
        acc = 0.0
        for b in range(nb):
            z = (flat[i] - centers[b]) / widths[b]
            acc += gflat[i, b] * math.exp(-0.5 * z * z) * (-z / widths[b])
        out[i] = acc
    return out.reshape(x.shape)


@njit(cache=True)
def _decide_bonds_nb(margins, rule):
    n = margins.shape[0]
    nf = margins.shape[2]
    isbond = np.zeros((n, n, nf, nf), dtype=np.bool_)
    order = np.zeros((n, n, nf, nf), dtype=np.int64)
    for i in range(n):
        for j in range(n):
            if i == j:
                continue
            for a in range(nf):
                for b in range(nf):
                    best = 0
                    if rule == RULE_ARGMIN:
                        mmin = np.inf
                        has = False
                        for o in range(3):
                            m = margins[i, j, a, b, o]
                            if m < 0.0:
                                has = True
                            if m < mmin:
                                mmin = m
                                best = o + 1
                        if not has:
                            best = 0
                    else:
                        for o in range(3):
                            if margins[i, j, a, b, o] < 0.0:
                                best = o + 1
                    if best > 0:
                        isbond[i, j, a, b] = True
                        order[i, j, a, b] = best
    return isbond, order


@njit(cache=True)
def _order_matrix_nb(dist, type_idx, table, margin_vec, rule):
    n = dist.shape[0]
    order = np.zeros((n, n), dtype=np.int64)
    for i in range(n):
        for j in range(n):
            if i == j:
                continue
            a = type_idx[i]
            b = type_idx[j]
            best = 0
            if rule == RULE_ARGMIN:
                mmin = np.inf
                has = False
                for o in range(3):
                    th = table[a, b, o]
                    if not np.isfinite(th):
                        continue
                    m = dist[i, j] - (th + margin_vec[o])
                    if m < 0.0:
                        has = True
                    if m < mmin:
                        mmin = m
                        best = o + 1
                if not has:
                    best = 0
            else:
                for o in range(3):
                    th = table[a, b, o]
                    if np.isfinite(th) and dist[i, j] - (th + margin_vec[o]) < 0.0:
                        best = o + 1
            order[i, j] = best
    return order


@njit(cache=True)
def _valency_sum_nb(p_pair, weights):
    n = p_pair.shape[0]
    nf = p_pair.shape[2]
    out = np.empty(n, dtype=p_pair.dtype)
    for i in range(n):
        acc = 0.0
        for j in range(n):
            if j == i:
                continue
            for a in range(nf):
                for b in range(nf):
                    acc += p_pair[i, j, a, b] * weights[i, j, a, b]
        out[i] = acc
    return out


@njit(cache=True)
def _triplet_mask_nb(dist):
    n = dist.shape[0]
    mask = np.zeros((n, n, n), dtype=np.bool_)
    for i in range(n):
        for j in range(n):
            if j == i or dist[i, j] <= COINCIDENT_TOL:
                continue
            for k in range(n):
                if k == i or k == j or dist[i, k] <= COINCIDENT_TOL:
                    continue
                mask[i, j, k] = True
    return mask


# ---------------------------------------------------------------------------
# backend selection
# ---------------------------------------------------------------------------

_NUMPY_IMPLS = {
    "pairwise_dist_fwd": _pairwise_dist_fwd_np,
    "pairwise_dist_bwd": _pairwise_dist_bwd_np,
    "angles_fwd": _angles_fwd_np,
    "angles_bwd": _angles_bwd_np,
    "rbf_fwd": _rbf_fwd_np,
    "rbf_bwd": _rbf_bwd_np,
    "decide_bonds": _decide_bonds_np,
    "order_matrix": _order_matrix_np,
    "valency_sum": _valency_sum_np,
    "triplet_mask": _triplet_mask_np,
}

_NUMBA_IMPLS = {
    "pairwise_dist_fwd": _pairwise_dist_fwd_nb,
    "pairwise_dist_bwd": _pairwise_dist_bwd_nb,
    "angles_fwd": _angles_fwd_nb,
    "angles_bwd": _angles_bwd_nb,
    "rbf_fwd": _rbf_fwd_nb,
    "rbf_bwd": _rbf_bwd_nb,
    "decide_bonds": _decide_bonds_nb,
    "order_matrix": _order_matrix_nb,
    "valency_sum": _valency_sum_nb,
    "triplet_mask": _triplet_mask_nb,
}

_active = {}


def set_backend(name):
    """Select the kernel backend: 'numba' or 'numpy'."""
    if name == "numba":
        if not HAS_NUMBA:
            raise RuntimeError("numba backend requested but numba is not installed")
        _active.update(_NUMBA_IMPLS)
    elif name == "numpy":
        _active.update(_NUMPY_IMPLS)
    else:
        raise ValueError(f"unknown kernel backend {name!r}")
    _active["name"] = name


def backend_name():
    return _active["name"]


def _default_backend():
    env = os.environ.get("MOLDIFF_NUMBA", "1").lower()
    if HAS_NUMBA and env not in ("0", "false", "off"):
        return "numba"
    return "numpy"


set_backend(_default_backend())


def pairwise_dist_fwd(pos):
    return _active["pairwise_dist_fwd"](pos)


def pairwise_dist_bwd(pos, dist, grad_out):
    return _active["pairwise_dist_bwd"](pos, dist, grad_out)


def angles_fwd(pos):
    return _active["angles_fwd"](pos)


def angles_bwd(pos, grad_out):
    return _active["angles_bwd"](pos, grad_out)


def rbf_fwd(x, centers, widths):
    return _active["rbf_fwd"](x, centers, widths)


def rbf_bwd(x, centers, widths, grad_out):
    return _active["rbf_bwd"](x, centers, widths, grad_out)


def decide_bonds_kernel(margins, rule=RULE_HIGHEST):
    return _active["decide_bonds"](np.ascontiguousarray(margins), rule)


def order_matrix(dist, type_idx, table, margin_vec, rule=RULE_HIGHEST):
    return _active["order_matrix"](
        np.ascontiguousarray(dist),
        np.ascontiguousarray(type_idx),
        np.ascontiguousarray(table),
        np.ascontiguousarray(margin_vec),
        rule,
    )


def valency_sum(p_pair, weights):
    return _active["valency_sum"](np.ascontiguousarray(p_pair), np.ascontiguousarray(weights))


def triplet_mask(dist):
    return _active["triplet_mask"](dist)
