"""Training loop: sequential gradient accumulation, Adam, EMA, resume.

Molecules are processed one at a time in a deterministic order drawn from
a single generator, so a run is reproducible bit for bit given the same
seed, and a resumed run continues the exact stream the interrupted run
would have produced (the checkpoint stores the generator state).
"""

import math

import numpy as np

from .autodiff import Adam, EMA, clip_grad_norm
from .checkpoint import restore_ema, restore_optimizer, restore_params, restore_rng
from .diffusion import LossSettings, state_from_symbols, training_loss


class NumericFailure(RuntimeError):
    """Loss or gradients left the representable range (NaN/inf)."""


class Trainer:
    def __init__(
        self,
        model,
        store,
        sched,
        scaling,
        table,
        loss_settings=None,
        lr=1e-4,
        clip_norm=1.0,
        ema_decay=0.999,
        batch_size=16,
        seed=0,
        context_names=(),
    ):
        self.model = model
        self.store = store
        self.sched = sched
        self.scaling = scaling
        self.table = table
        self.loss_settings = loss_settings or LossSettings()
        self.clip_norm = clip_norm
        self.batch_size = batch_size
        self.context_names = tuple(context_names)
        self.opt = Adam(store, lr=lr)
        self.ema = EMA(store, decay=ema_decay)
        self.rng = np.random.default_rng(seed)
        self.epoch = 0
        self.history = []

    # -- data preparation --------------------------------------------------

    def prepare(self, molecules):
        """Molecules -> (state, context) pairs; valencies must be present."""
        pairs = []
        for i, m in enumerate(molecules):
            if m.valencies is None:
                raise ValueError(f"molecule {i} carries no valencies; run ensure_valencies")
            state = state_from_symbols(m.symbols, m.coords, self.scaling, m.valencies)
            ctx = None
            if self.context_names:
                try:
                    ctx = np.array(
                        [m.properties[k] for k in self.context_names], dtype=np.float64
                    )
                except KeyError as e:
                    raise ValueError(f"molecule {i} misses conditioning property {e}")
            pairs.append((state, ctx))
        return pairs

    # -- single molecule ---------------------------------------------------

    def _molecule_loss(self, state, ctx, training):
        t = int(self.rng.integers(1, self.sched.T + 1))
        loss, parts = training_loss(
            self.model,
            state,
            t,
            self.sched,
            self.scaling,
            self.table,
            settings=self.loss_settings,
            context=ctx,
            rng=self.rng,
            training=training,
        )
        if not math.isfinite(parts["loss"]):
            raise NumericFailure(
                f"non-finite loss {parts['loss']} at epoch {self.epoch}, t={t}"
            )
        return loss, parts

    # -- epochs --------------------------------------------------------------

    def run_epoch(self, pairs):
        order = self.rng.permutation(len(pairs))
        sums = {"loss": 0.0, "eps_mse": 0.0, "gf": 0.0}
        grad_norms = []
        for start in range(0, len(order), self.batch_size):
            batch = order[start : start + self.batch_size]
            self.store.zero_grad()
            for idx in batch:
                state, ctx = pairs[idx]
                loss, parts = self._molecule_loss(state, ctx, training=True)
                loss.backward()
                for k in sums:
                    sums[k] += parts[k]
            inv = 1.0 / len(batch)
            for _, p in self.store.items():
                if p.grad is not None:
                    p.grad = p.grad * inv
            grad_norms.append(clip_grad_norm(self.store, self.clip_norm))
            self.opt.step()
            self.ema.update()
        n = len(pairs)
        logs = {k: v / n for k, v in sums.items()}
        logs["grad_norm"] = float(np.mean(grad_norms)) if grad_norms else 0.0
        if not all(math.isfinite(v) for v in logs.values()):
            raise NumericFailure(f"non-finite epoch statistics: {logs}")
        return logs

    def validate(self, pairs, seed=0):
        """Loss statistics on held-out molecules; uses its own generator so
        the training stream is untouched."""
        saved, self.rng = self.rng, np.random.default_rng([seed, self.epoch])
        try:
            sums = {"loss": 0.0, "eps_mse": 0.0, "gf": 0.0}
            for state, ctx in pairs:
                _, parts = self._molecule_loss(state, ctx, training=False)
                for k in sums:
                    sums[k] += parts[k]
            return {k: v / max(len(pairs), 1) for k, v in sums.items()}
        finally:
            self.rng = saved

    def fit(self, pairs, epochs, callback=None, val_pairs=None):
        """Train up to `epochs` total; resumable (starts at self.epoch)."""
        while self.epoch < epochs:
            logs = self.run_epoch(pairs)
            self.epoch += 1
            logs["epoch"] = self.epoch
            if val_pairs:
                val = self.validate(val_pairs)
                logs.update({f"val_{k}": v for k, v in val.items()})
            self.history.append(logs)
            if callback is not None:
                callback(self, logs)
        return self.history

    # -- persistence ---------------------------------------------------------

    def restore(self, ckpt):
        restore_params(ckpt, self.store)
        restore_optimizer(ckpt, self.opt)
        restore_ema(ckpt, self.ema)
        self.rng = restore_rng(ckpt)
        self.epoch = ckpt.epoch
