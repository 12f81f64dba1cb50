"""Noise schedules, forward noising, the training objective, and sampling.

The state is a molecule G = (P, X, A, V): coordinates plus a feature block
F = [X * x_scale, A / max_atomic_number, V / max_valency] so every channel
has comparable noise sensitivity. Coordinates diffuse in the zero
center-of-mass subspace: coordinate noise is sampled and then projected,
which keeps the process translation-invariant.

Schedules are built by shaping alpha_bar directly: a raw strictly
decreasing curve is mapped affinely onto [clip, 1 - clip] and the per-step
alphas are its successive ratios; alpha_bar is then the running product of
those alphas, so an independent product-of-alphas loop reproduces it
bitwise.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor, no_grad
from .geometry import project_zero_com
from .gfloss import gf_loss_from_clean_estimate

SCHEDULE_KINDS = ("cosine", "polynomial", "linear")
ALPHA_BAR_CLIP = 1e-5


@dataclass
class NoiseSchedule:
    """Arrays indexed by t = 0..T; t=0 is the (nearly) clean anchor."""

    kind: str
    T: int
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray
    snr: np.ndarray
    sigma2: np.ndarray        # standard DDPM posterior variance (default)
    sigma2_paper: np.ndarray  # ((b_t-b_{t-1}) b_{t-1}) / ((1-b_{t-1}) b_t)
    omega: np.ndarray         # 1 - SNR(t)/SNR(t-1)


def _raw_alpha_bar(kind, T):
    u = np.arange(T + 1, dtype=np.float64) / T
    if kind == "cosine":
        s = 0.008
        f = np.cos((u + s) / (1.0 + s) * math.pi / 2.0) ** 2
        return f / f[0]
    if kind == "polynomial":
        return (1.0 - u ** 2) ** 2
    if kind == "linear":
        betas = np.linspace(1e-4, 0.02, T)
        return np.concatenate([[1.0], np.cumprod(1.0 - betas)])
    raise ValueError(f"unknown schedule kind {kind!r}; choose from {SCHEDULE_KINDS}")


def build_schedule(kind, T, clip=ALPHA_BAR_CLIP):
    if T < 2:
        raise ValueError("schedule needs T >= 2")
    raw = _raw_alpha_bar(kind, T)
    lo, hi = clip, 1.0 - clip
    mapped = lo + (raw - raw[-1]) * (hi - lo) / (raw[0] - raw[-1])
    alpha = np.empty(T + 1)
    alpha[0] = mapped[0]
    alpha[1:] = mapped[1:] / mapped[:-1]
    alpha_bar = np.cumprod(alpha)
    beta = 1.0 - alpha
    if not np.all(np.diff(alpha_bar) < 0):
        raise ValueError(f"alpha_bar not strictly decreasing for {kind}, T={T}")
    snr = alpha_bar / (1.0 - alpha_bar)
    sigma2 = np.zeros(T + 1)
    sigma2[1:] = (1.0 - alpha_bar[:-1]) / (1.0 - alpha_bar[1:]) * beta[1:]
    sigma2_paper = np.zeros(T + 1)
    sigma2_paper[1:] = np.maximum(
        (beta[1:] - beta[:-1]) * beta[:-1] / ((1.0 - beta[:-1]) * beta[1:]), 1e-12
    )
    omega = np.zeros(T + 1)
    omega[1:] = 1.0 - snr[1:] / snr[:-1]
    return NoiseSchedule(kind, T, beta, alpha, alpha_bar, snr, sigma2, sigma2_paper, omega)


@dataclass
class FeatureScaling:
    """Element order and channel scales shared by model, loss, and sampler."""

    symbols: tuple
    atomic_numbers: np.ndarray
    max_valency: int
    x_scale: float = 0.25

    def __post_init__(self):
        self.symbols = tuple(self.symbols)
        self.atomic_numbers = np.asarray(self.atomic_numbers, dtype=np.float64)

    @property
    def nf(self):
        return len(self.symbols)

    @property
    def a_scale(self):
        return 1.0 / float(self.atomic_numbers.max())

    @property
    def v_scale(self):
        return 1.0 / float(self.max_valency)


def make_scaling(symbols, max_valency=None):
    from .chem import ATOMIC_NUMBERS, ALLOWED_VALENCES

    numbers = np.array([ATOMIC_NUMBERS[s] for s in symbols], dtype=np.float64)
    if max_valency is None:
        max_valency = max(max(ALLOWED_VALENCES[s]) for s in symbols)
    return FeatureScaling(tuple(symbols), numbers, int(max_valency))


@dataclass
class MoleculeState:
    """Physical molecule state: coordinates, one-hot types, atomic numbers,
    valencies, and an optional padding mask."""

    P: np.ndarray
    X: np.ndarray
    A: np.ndarray
    V: np.ndarray
    mask: np.ndarray = field(default=None)

    def __post_init__(self):
        self.P = np.asarray(self.P, dtype=np.float64)
        self.X = np.asarray(self.X, dtype=np.float64)
        self.A = np.asarray(self.A, dtype=np.float64)
        self.V = np.asarray(self.V, dtype=np.float64)
        n = self.P.shape[0]
        if self.mask is None:
            self.mask = np.ones(n, dtype=bool)
        shapes = (self.P.shape[0], self.X.shape[0], self.A.shape[0], self.V.shape[0])
        if len(set(shapes)) != 1:
            raise ValueError(f"inconsistent atom counts across channels: {shapes}")

    @property
    def n_atoms(self):
        return self.P.shape[0]

    def type_indices(self):
        return np.argmax(self.X, axis=1)

    def symbols(self, scaling):
        idx = self.type_indices()
        return tuple(scaling.symbols[i] for i in idx)


def state_from_symbols(symbols, coords, scaling, valencies):
    n = len(symbols)
    x = np.zeros((n, scaling.nf))
    idx = [scaling.symbols.index(s) for s in symbols]
    x[np.arange(n), idx] = 1.0
    a = scaling.atomic_numbers[idx]
    return MoleculeState(np.asarray(coords), x, a, np.asarray(valencies, dtype=np.float64))


def features_of(state, scaling):
    """Scaled feature block F (N, nf + 2)."""
    return np.concatenate(
        [
            state.X * scaling.x_scale,
            (state.A * scaling.a_scale)[:, None],
            (state.V * scaling.v_scale)[:, None],
        ],
        axis=1,
    )


def zero_com_noise(rng, n):
    """Gaussian coordinate noise projected onto the zero-CoM subspace."""
    return project_zero_com(rng.standard_normal((n, 3)))


def forward_noise(p0, f0, t, sched, rng):
    """q(G_t | G_0): returns (p_t, f_t, eps_p, eps_f)."""
    if not 0 <= t <= sched.T:
        raise ValueError(f"t={t} outside [0, {sched.T}]")
    ab = sched.alpha_bar[t]
    sa, sn = math.sqrt(ab), math.sqrt(1.0 - ab)
    eps_p = zero_com_noise(rng, p0.shape[0])
    eps_f = rng.standard_normal(f0.shape)
    return sa * p0 + sn * eps_p, sa * f0 + sn * eps_f, eps_p, eps_f


def reconstruct_clean(x_t, eps_hat, t, sched):
    """Invert the closed-form noising: (x_t - sqrt(1-ab)*eps)/sqrt(ab).

    Works on ndarrays and Tensors alike; callers re-center coordinates.
    """
    ab = float(sched.alpha_bar[t])
    return (x_t - math.sqrt(1.0 - ab) * eps_hat) * (1.0 / math.sqrt(ab))


@dataclass
class LossSettings:
    lam: float = 0.01
    gf_rule: str = "highest"            # or "argmin"
    gf_count_mode: str = "order"        # or "bool"
    gf_weight_mode: str = "sqrt_alpha_bar"  # or "alpha"


def gf_weight(t, sched, mode):
    if mode == "sqrt_alpha_bar":
        return math.sqrt(sched.alpha_bar[t])
    if mode == "alpha":
        return float(sched.alpha[t])
    raise ValueError(f"unknown gf weight mode {mode!r}")


def training_loss(
    model,
    state,
    t,
    sched,
    scaling,
    table,
    settings=None,
    context=None,
    rng=None,
    training=True,
):
    """0.5 * omega(t) * (||eps - eps_hat||^2 + lambda * L_GF) for one molecule.

    Returns (loss Tensor, parts dict). The squared error sums over the
    coordinate and feature channels of unmasked atoms; GFLoss is evaluated
    on the reconstructed clean estimate with the decision stop-gradded.
    """
    settings = settings or LossSettings()
    if not 1 <= t <= sched.T:
        raise ValueError(f"t={t} outside [1, {sched.T}]")
    p0 = project_zero_com(state.P)
    f0 = features_of(state, scaling)
    p_t, f_t, eps_p, eps_f = forward_noise(p0, f0, t, sched, rng)
    eps_p_hat, eps_f_hat = model.forward(
        p_t, f_t, t / sched.T, context=context, training=training, rng=rng
    )
    m = state.mask.astype(np.float64)[:, None]
    dp = (eps_p_hat - Tensor(eps_p)) * Tensor(m)
    df = (eps_f_hat - Tensor(eps_f.astype(eps_f_hat.dtype))) * Tensor(
        m.astype(eps_f_hat.dtype)
    )
    mse = (dp * dp).sum() + (df * df).sum().astype(np.float64)

    nf = scaling.nf
    x0_hat_scaled = reconstruct_clean(f_t[:, :nf], eps_f_hat[:, :nf], t, sched)
    x0_logits = x0_hat_scaled * (1.0 / scaling.x_scale)
    p0_hat = reconstruct_clean(p_t, eps_p_hat.data, t, sched)
    p0_hat = project_zero_com(p0_hat)
    gf = gf_loss_from_clean_estimate(
        x0_logits,
        p0_hat,
        state.V,
        table,
        gf_weight(t, sched, settings.gf_weight_mode),
        rule=settings.gf_rule,
        count_mode=settings.gf_count_mode,
        mask=state.mask,
    ).astype(np.float64)
    w = 0.5 * float(sched.omega[t])
    loss = (mse + gf * settings.lam) * w
    parts = {
        "eps_mse": float(mse.data),
        "gf": float(gf.data),
        "loss": float(loss.data),
        "t": t,
    }
    return loss, parts


def sample(
    model,
    sched,
    scaling,
    n_atoms,
    rng,
    context=None,
    sigma_mode="posterior",
    noise_hook=None,
    traj_every=0,
):
    """Ancestral reverse chain from pure noise to a discretized molecule.

    noise_hook(name, t, shape), when given, replaces the rng draws; the
    equivariance tests use it to rotate every draw coherently. Returns
    (MoleculeState, trajectory) where trajectory is a list of coordinate
    frames (every traj_every steps plus the final state) or None.
    """
    if sigma_mode == "posterior":
        sigma2 = sched.sigma2
    elif sigma_mode == "paper":
        sigma2 = sched.sigma2_paper
    else:
        raise ValueError(f"unknown sigma mode {sigma_mode!r}")

    def draw(name, t, shape):
        if noise_hook is not None:
            return noise_hook(name, t, shape)
        return rng.standard_normal(shape)

    nf = scaling.nf
    p = project_zero_com(draw("init_pos", sched.T, (n_atoms, 3)))
    f = draw("init_feat", sched.T, (n_atoms, nf + 2))
    traj = [] if traj_every else None
    with no_grad():
        for t in range(sched.T, 0, -1):
            if traj_every and (sched.T - t) % traj_every == 0:
                traj.append(p.copy())
            eps_p, eps_f = model.forward(p, f, t / sched.T, context=context)
            eps_p = eps_p.data
            eps_f = eps_f.data.astype(np.float64)
            bt = sched.beta[t]
            coef = bt / math.sqrt(1.0 - sched.alpha_bar[t])
            inv_sqrt_alpha = 1.0 / math.sqrt(sched.alpha[t])
            mu_p = (p - coef * eps_p) * inv_sqrt_alpha
            mu_f = (f - coef * eps_f) * inv_sqrt_alpha
            if t > 1:
                sig = math.sqrt(sigma2[t])
                zp = project_zero_com(draw("pos", t, (n_atoms, 3)))
                zf = draw("feat", t, (n_atoms, nf + 2))
                p = project_zero_com(mu_p + sig * zp)
                f = mu_f + sig * zf
            else:
                p = project_zero_com(mu_p)
                f = mu_f
    if traj is not None:
        traj.append(p.copy())
    type_idx = np.argmax(f[:, :nf], axis=1)
    x = np.zeros((n_atoms, nf))
    x[np.arange(n_atoms), type_idx] = 1.0
    a = scaling.atomic_numbers[type_idx]
    v = np.clip(np.round(f[:, nf + 1] / scaling.v_scale), 0, scaling.max_valency)
    state = MoleculeState(p, x, a, v)
    return state, traj
