"""Dual-track attention denoiser over molecular states.

Per layer: atom-pair attention updates node embeddings, pair-triplet
attention updates pair embeddings (triplet embeddings are keys/values
only and are never updated by attention), a connection module fuses node
embeddings into pairs, a position update moves coordinates along
difference vectors, and the geometric features are rebuilt from the new
coordinates.

Geometry (positions, distances, angles, basis expansions) is kept in
float64 and cast to the model dtype only after the basis expansion; the
scalar gates of the position update are cast back to float64. Everything
the network consumes is built from invariants, and coordinates only ever
move along (p_i - p_j) directions, which is what makes the network
E(3)-equivariant.
"""

import math
from dataclasses import dataclass, asdict

import numpy as np

from . import kernels
from .autodiff import (
    Tensor,
    Linear,
    LayerNorm,
    MLP,
    concat,
    dropout,
    einsum2,
    softmax,
)
from .geometry import (
    angle_basis,
    distance_basis,
    pairwise_distances,
    project_zero_com,
    rbf_expand,
    triplet_angles,
)


@dataclass
class DtnConfig:
    nf: int
    max_valency: int = 6
    n_layers: int = 5
    d_model: int = 256
    n_heads: int = 8
    d_ff: int = 0          # 0 -> 4 * d_model
    d_trip: int = 0        # 0 -> d_model // 4
    dropout: float = 0.1
    n_rbf: int = 32
    r_max: float = 12.0
    time_dim: int = 32
    conditioning_dim: int = 0

    def __post_init__(self):
        if self.d_ff == 0:
            self.d_ff = 4 * self.d_model
        if self.d_trip == 0:
            self.d_trip = max(self.d_model // 4, 4)
        if self.d_model % self.n_heads != 0:
            raise ValueError(
                f"d_model {self.d_model} not divisible by n_heads {self.n_heads}"
            )

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def time_features(t_frac, dim):
    """Sinusoidal features of the normalized time step, shape (dim,)."""
    half = dim // 2
    freqs = np.exp(-np.arange(half) * (math.log(10000.0) / max(half - 1, 1)))
    arg = t_frac * 1000.0 * freqs
    return np.concatenate([np.sin(arg), np.cos(arg)])


class FeedForward:
    def __init__(self, store, name, d_model, d_ff):
        self.ln = LayerNorm(store, f"{name}.ln", d_model)
        self.mlp = MLP(store, f"{name}.mlp", [d_model, d_ff, d_model])

    def __call__(self, x):
        return x + self.mlp(self.ln(x))


class AtomPairTrack:
    """Node update: queries from atoms, keys/values from atoms and pairs."""

    def __init__(self, store, name, cfg):
        d = cfg.d_model
        self.n_heads = cfg.n_heads
        self.d_head = d // cfg.n_heads
        self.p_drop = cfg.dropout
        self.ln_node = LayerNorm(store, f"{name}.ln_node", d)
        self.ln_pair = LayerNorm(store, f"{name}.ln_pair", d)
        self.q = Linear(store, f"{name}.q", d, d)
        # key biases are constant over the attended axis and would be dead
        # under the softmax, so keys are bias-free
        self.k_node = Linear(store, f"{name}.k_node", d, d, bias=False)
        self.k_pair = Linear(store, f"{name}.k_pair", d, d, bias=False)
        self.v_pair = Linear(store, f"{name}.v_pair", d, d)
        self.v_i = Linear(store, f"{name}.v_i", d, d, bias=False)
        self.v_j = Linear(store, f"{name}.v_j", d, d, bias=False)
        self.out = Linear(store, f"{name}.out", d, d)
        self.ff = FeedForward(store, f"{name}.ff", d, cfg.d_ff)

    def __call__(self, e_node, e_pair, training, rng):
        n = e_node.shape[0]
        h, dh = self.n_heads, self.d_head
        node_n = self.ln_node(e_node)
        pair_n = self.ln_pair(e_pair)
        q = self.q(node_n).reshape(n, h, dh)
        k = self.k_pair(pair_n).reshape(n, n, h, dh) + self.k_node(node_n).reshape(1, n, h, dh)
        v = (
            self.v_pair(e_pair)
            + self.v_i(e_node).reshape(n, 1, -1)
            + self.v_j(e_node).reshape(1, n, -1)
        ).reshape(n, n, h, dh)
        scores = einsum2("ihd,ijhd->ihj", q, k) * (1.0 / math.sqrt(dh))
        attn = softmax(scores, axis=-1)
        attn = dropout(attn, self.p_drop, rng, training)
        ctx = einsum2("ihj,ijhd->ihd", attn, v).reshape(n, h * dh)
        e_node = e_node + self.out(ctx)
        return self.ff(e_node)


class PairTripletTrack:
    """Pair update: queries from pairs, keys/values from fixed triplets."""

    def __init__(self, store, name, cfg):
        d, dt = cfg.d_model, cfg.d_trip
        self.n_heads = cfg.n_heads
        self.d_head = d // cfg.n_heads
        self.p_drop = cfg.dropout
        self.ln_pair = LayerNorm(store, f"{name}.ln_pair", d)
        self.ln_trip = LayerNorm(store, f"{name}.ln_trip", dt)
        self.q = Linear(store, f"{name}.q", d, d)
        self.k_trip = Linear(store, f"{name}.k_trip", dt, d, bias=False)
        self.v_trip = Linear(store, f"{name}.v_trip", dt, d)
        self.v_pair = Linear(store, f"{name}.v_pair", d, d, bias=False)
        self.out = Linear(store, f"{name}.out", d, d)
        self.ff = FeedForward(store, f"{name}.ff", d, cfg.d_ff)

    def __call__(self, e_pair, e_trip, mask, training, rng):
        n = e_pair.shape[0]
        h, dh = self.n_heads, self.d_head
        q = self.q(self.ln_pair(e_pair)).reshape(n, n, h, dh)
        k = self.k_trip(self.ln_trip(e_trip)).reshape(n, n, n, h, dh)
        v = (self.v_trip(e_trip) + self.v_pair(e_pair).reshape(n, n, 1, -1)).reshape(
            n, n, n, h, dh
        )
        scores = einsum2("ijhd,ijkhd->ijhk", q, k) * (1.0 / math.sqrt(dh))
        # fully masked rows (no valid third atom) softmax to zero rows,
        # reducing this track to residual + feed-forward
        attn = softmax(scores, axis=-1, mask=mask[:, :, None, :])
        attn = dropout(attn, self.p_drop, rng, training)
        ctx = einsum2("ijhk,ijkhd->ijhd", attn, v).reshape(n, n, h * dh)
        e_pair = e_pair + self.out(ctx)
        return self.ff(e_pair)


class ConnectionModule:
    """e_ij <- LayerNorm(e_ij + Linear(Linear(e_i) * Linear(e_j)))."""

    def __init__(self, store, name, cfg):
        d = cfg.d_model
        self.lin_i = Linear(store, f"{name}.lin_i", d, d)
        self.lin_j = Linear(store, f"{name}.lin_j", d, d)
        self.out = Linear(store, f"{name}.out", d, d)
        self.ln = LayerNorm(store, f"{name}.ln", d)

    def __call__(self, e_node, e_pair):
        n = e_node.shape[0]
        a = self.lin_i(e_node).reshape(n, 1, -1)
        b = self.lin_j(e_node).reshape(1, n, -1)
        return self.ln(e_pair + self.out(a * b))


class PositionUpdate:
    """p_i += sum_j (p_i - p_j)/(d_ij + 1) * MLPscalar(e_ij), re-centered."""

    def __init__(self, store, name, cfg):
        d = cfg.d_model
        # zero-initialized last layer: the untrained network leaves
        # coordinates untouched
        self.gate = MLP(store, f"{name}.gate", [d, d, 1], zero_init_last=True)

    def __call__(self, e_pair, pos, dist):
        n = pos.shape[0]
        s = self.gate(e_pair).reshape(n, n).astype(np.float64)
        coef = s / (dist + 1.0)
        diff = pos.reshape(n, 1, 3) - pos.reshape(1, n, 3)
        upd = (diff * coef.reshape(n, n, 1)).sum(axis=1)
        return project_zero_com(pos + upd)


class GeometryRefresh:
    """Rebuild pair/triplet embeddings from updated coordinates."""

    def __init__(self, store, name, cfg, dist_basis, ang_basis):
        d, dt, nb = cfg.d_model, cfg.d_trip, cfg.n_rbf
        self.dist_basis = dist_basis
        self.ang_basis = ang_basis
        self.pair_inner = Linear(store, f"{name}.pair_inner", nb + d, d)
        self.pair_outer = Linear(store, f"{name}.pair_outer", 3 * d, d)
        self.trip = Linear(store, f"{name}.trip", nb + dt, dt)

    def __call__(self, e_node, e_pair, e_trip, pos, dtype):
        n = pos.shape[0]
        dist = pairwise_distances(pos)
        ang = triplet_angles(pos)
        rbf_d = rbf_expand(dist, self.dist_basis).astype(dtype)
        rbf_a = rbf_expand(ang, self.ang_basis).astype(dtype)
        inner = self.pair_inner(concat([rbf_d, e_pair], axis=-1))
        ei = e_node.reshape(n, 1, -1).broadcast_to(inner.shape)
        ej = e_node.reshape(1, n, -1).broadcast_to(inner.shape)
        e_pair = self.pair_outer(concat([inner, ei, ej], axis=-1))
        e_trip = self.trip(concat([rbf_a, e_trip], axis=-1))
        mask = kernels.triplet_mask(dist.data)
        return e_pair, e_trip, dist, mask


class DtnLayer:
    def __init__(self, store, name, cfg, dist_basis, ang_basis, last=False):
        self.pair_track = AtomPairTrack(store, f"{name}.pair_track", cfg)
        self.triplet_track = PairTripletTrack(store, f"{name}.triplet_track", cfg)
        self.connection = ConnectionModule(store, f"{name}.connection", cfg)
        self.pos_update = PositionUpdate(store, f"{name}.pos_update", cfg)
        # the refresh after the last position update feeds nothing (readout
        # uses node embeddings and coordinates only), so the final layer
        # carries no refresh parameters
        self.refresh = None
        if not last:
            self.refresh = GeometryRefresh(store, f"{name}.refresh", cfg, dist_basis, ang_basis)

    def __call__(self, state, dtype, training, rng):
        e_node, e_pair, e_trip, pos, dist, mask = state
        e_node = self.pair_track(e_node, e_pair, training, rng)
        e_pair = self.triplet_track(e_pair, e_trip, mask, training, rng)
        e_pair = self.connection(e_node, e_pair)
        pos = self.pos_update(e_pair, pos, dist)
        if self.refresh is not None:
            e_pair, e_trip, dist, mask = self.refresh(e_node, e_pair, e_trip, pos, dtype)
        return e_node, e_pair, e_trip, pos, dist, mask


class DTN:
    """The denoiser: predicts coordinate and feature noise from a noisy state."""

    def __init__(self, cfg, store, prefix="dtn"):
        self.cfg = cfg
        self.store = store
        self.dtype = store.dtype
        d, dt, nb = cfg.d_model, cfg.d_trip, cfg.n_rbf
        self.dist_basis = distance_basis(nb, cfg.r_max)
        self.ang_basis = angle_basis(nb)
        self.node_in = Linear(store, f"{prefix}.node_in", cfg.nf + 2 + cfg.time_dim, d)
        self.cond = None
        if cfg.conditioning_dim > 0:
            self.cond = Linear(store, f"{prefix}.cond", cfg.conditioning_dim, d)
        self.pair_embed = Linear(store, f"{prefix}.pair_embed", nb + 2 * d, d)
        self.trip_embed = Linear(store, f"{prefix}.trip_embed", nb + 3 * d, dt)
        self.layers = [
            DtnLayer(
                store,
                f"{prefix}.layers.{i}",
                cfg,
                self.dist_basis,
                self.ang_basis,
                last=(i == cfg.n_layers - 1),
            )
            for i in range(cfg.n_layers)
        ]
        self.feat_head = Linear(store, f"{prefix}.feat_head", d, cfg.nf + 2)
        self.gamma = store.param(f"{prefix}.gamma", (1,), "ones")

    def embed_inputs(self, pos, feats, t_frac, context):
        cfg = self.cfg
        n = pos.shape[0]
        dist = pairwise_distances(pos)
        ang = triplet_angles(pos)
        rbf_d = rbf_expand(dist, self.dist_basis).astype(self.dtype)
        rbf_a = rbf_expand(ang, self.ang_basis).astype(self.dtype)
        tfeat = np.tile(time_features(t_frac, cfg.time_dim), (n, 1)).astype(self.dtype)
        e_node = self.node_in(concat([feats, Tensor(tfeat)], axis=-1))
        if self.cond is not None:
            ctx = Tensor(np.asarray(context, dtype=self.dtype).reshape(1, -1))
            e_node = e_node + self.cond(ctx)
        d = cfg.d_model
        ei = e_node.reshape(n, 1, d).broadcast_to((n, n, d))
        ej = e_node.reshape(1, n, d).broadcast_to((n, n, d))
        e_pair = self.pair_embed(concat([rbf_d, ei, ej], axis=-1))
        ei3 = e_node.reshape(n, 1, 1, d).broadcast_to((n, n, n, d))
        ej3 = e_node.reshape(1, n, 1, d).broadcast_to((n, n, n, d))
        ek3 = e_node.reshape(1, 1, n, d).broadcast_to((n, n, n, d))
        e_trip = self.trip_embed(concat([rbf_a, ei3, ej3, ek3], axis=-1))
        mask = kernels.triplet_mask(dist.data)
        return e_node, e_pair, e_trip, dist, mask

    def forward(self, pos, feats, t_frac, context=None, training=False, rng=None):
        """Noisy state -> (eps_coord (N,3) float64, eps_feat (N, nf+2)).

        pos/feats may be ndarrays or Tensors; positions are re-centered
        defensively (the diffusion process keeps them zero-CoM anyway).
        """
        cfg = self.cfg
        if not isinstance(pos, Tensor):
            pos = Tensor(np.asarray(pos, dtype=np.float64))
        else:
            pos = pos.astype(np.float64)
        if not isinstance(feats, Tensor):
            feats = Tensor(np.asarray(feats, dtype=self.dtype))
        else:
            feats = feats.astype(self.dtype)
        n = pos.shape[0]
        if pos.shape != (n, 3) or feats.shape != (n, cfg.nf + 2):
            raise ValueError(
                f"inconsistent state: pos {pos.shape}, feats {feats.shape}, "
                f"expected ({n},3) and ({n},{cfg.nf + 2})"
            )
        if (context is None) != (self.cond is None):
            raise ValueError(
                "context must be supplied exactly when conditioning_dim > 0"
            )
        pos_in = project_zero_com(pos)
        e_node, e_pair, e_trip, dist, mask = self.embed_inputs(
            pos_in, feats, t_frac, context
        )
        state = (e_node, e_pair, e_trip, pos_in, dist, mask)
        for layer in self.layers:
            state = layer(state, self.dtype, training, rng)
        e_node, _, _, pos_out, _, _ = state
        disp = pos_out - pos_in
        eps_coord = project_zero_com(disp * self.gamma.astype(np.float64))
        eps_feat = self.feat_head(e_node)
        return eps_coord, eps_feat
