"""Density scores d/dx log f(x | z) by denoising score matching.

The network takes ``(x_noisy, z, level)`` in standardized units and is trained
to predict ``-eps`` where ``x_noisy = x + sigma_level * eps``; its output is
then ``sigma`` times the score of the noise-smoothed density.  Each training
row is paired with its mirror image ``x - sigma * eps``.  The term linear in
``eps`` cancels between the two, which removes most of the gradient noise at
small ``sigma`` where the useful signal is weak.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .._rng import generator
from ..exceptions import DataError
from . import _mlp
from ._prep import as_matrix, chunks, column_stats, split_rows
from .config import LearnerConfig

MODEL_SCHEMA = 1


def _level_codes(k: int) -> np.ndarray:
    return np.linspace(-1.0, 1.0, k) if k > 1 else np.zeros(1)


@dataclass(frozen=True, eq=False)
class ScoreModel:
    """Fitted conditional (or, with no ``z`` columns, marginal) score of x."""

    params: list
    x_mean: float
    x_scale: float
    z_mean: np.ndarray
    z_scale: np.ndarray
    noise_scales: tuple[float, ...]
    activation: str = "silu"
    diagnostics: dict = field(default_factory=dict)

    @property
    def n_conditioning(self) -> int:
        return self.z_mean.shape[0]

    def _inputs(self, x, z, level: int) -> np.ndarray:
        x = np.asarray(x, dtype=float).reshape(-1)
        cols = [((x - self.x_mean) / self.x_scale)[:, None]]
        if self.n_conditioning:
            if z is None:
                raise DataError("conditional score needs the conditioning variables")
            z = np.asarray(z, dtype=float)
            z = z.reshape(x.shape[0], -1) if z.ndim < 2 else z
            if z.shape != (x.shape[0], self.n_conditioning):
                raise DataError(f"expected z of shape {(x.shape[0], self.n_conditioning)}, got {z.shape}")
            cols.append((z - self.z_mean) / self.z_scale)
        cols.append(np.full((x.shape[0], 1), _level_codes(len(self.noise_scales))[level]))
        return np.hstack(cols)

    def predict(self, x, z=None) -> np.ndarray:
        """Score of the density smoothed at the smallest noise scale."""
        level = int(np.argmin(self.noise_scales))
        U = self._inputs(x, z, level)
        out = np.empty(U.shape[0])
        ws = _mlp.Workspace()
        for sl in chunks(U.shape[0]):
            out[sl] = _mlp.forward(self.params, U[sl], ws)[:, 0]
        return out / (self.noise_scales[level] * self.x_scale)

    def to_json(self) -> dict:
        return {
            "kind": "score",
            "schema": MODEL_SCHEMA,
            "activation": self.activation,
            "layers": _mlp.flatten(self.params),
            "x_mean": self.x_mean,
            "x_scale": self.x_scale,
            "z_mean": self.z_mean.tolist(),
            "z_scale": self.z_scale.tolist(),
            "noise_scales": list(self.noise_scales),
        }

    @classmethod
    def from_json(cls, blob: dict) -> "ScoreModel":
        if blob.get("kind") != "score" or blob.get("schema") != MODEL_SCHEMA:
            raise DataError("not a serialized score model of a supported schema")
        return cls(
            params=_mlp.unflatten(blob["layers"]),
            x_mean=float(blob["x_mean"]),
            x_scale=float(blob["x_scale"]),
            z_mean=np.asarray(blob["z_mean"], dtype=float),
            z_scale=np.asarray(blob["z_scale"], dtype=float),
            noise_scales=tuple(blob["noise_scales"]),
            activation=blob["activation"],
        )


def _dsm_batch(u_x, u_z, codes, scales, level, eps):
    """Antithetic design matrix and targets for one set of noise draws."""
    sig = scales[level]
    xs = np.concatenate([u_x + sig * eps, u_x - sig * eps])
    parts = [xs[:, None]]
    if u_z.shape[1]:
        parts.append(np.vstack([u_z, u_z]))
    lv = codes[level]
    parts.append(np.concatenate([lv, lv])[:, None])
    target = np.concatenate([-eps, eps])[:, None]
    return np.hstack(parts), target


def fit_conditional_score(x, z, config: LearnerConfig | None = None) -> ScoreModel:
    """Estimate the score of X given Z by denoising score matching."""
    config = config or LearnerConfig()
    x = np.asarray(x, dtype=float).reshape(-1)
    if not np.all(np.isfinite(x)):
        raise DataError("x contains non-finite entries")
    n = x.shape[0]
    Z = np.empty((n, 0)) if z is None else as_matrix(z, "z")
    if Z.shape[0] != n:
        raise DataError(f"x has {n} rows but z has {Z.shape[0]}")
    if n < 50:
        raise DataError(f"need at least 50 rows to fit a score model, got {n}")

    x_mean, x_scale = column_stats(x[:, None])
    x_mean, x_scale = float(x_mean[0]), float(x_scale[0])
    if Z.shape[1]:
        z_mean, z_scale = column_stats(Z)
    else:
        z_mean, z_scale = np.zeros(0), np.zeros(0)
    u_x = (x - x_mean) / x_scale
    u_z = (Z - z_mean) / z_scale if Z.shape[1] else Z

    scales = np.asarray(config.noise_scales)
    codes = _level_codes(len(scales))
    rng = generator(config.seed, "score")
    tr, va = split_rows(n, config.val_fraction, rng)

    # fixed validation draws: each replicate cycles through the noise levels
    reps = config.noise_replicates
    va_rows = np.tile(va, reps)
    va_level = np.repeat(np.arange(reps) % len(scales), va.shape[0])
    va_eps = rng.standard_normal(va_rows.shape[0])
    U_va, t_va = _dsm_batch(u_x[va_rows], u_z[va_rows], codes, scales, va_level, va_eps)

    noise_rng = generator(config.seed, "score", "noise")
    params = _mlp.init_params((1 + Z.shape[1] + 1, *config.hidden, 1), rng)
    ws_tr, ws_va = _mlp.Workspace(), _mlp.Workspace()
    ux_tr, uz_tr = u_x[tr], u_z[tr]

    def loss_grad(p, epoch):
        level = noise_rng.integers(len(scales), size=tr.shape[0])
        eps = noise_rng.standard_normal(tr.shape[0])
        U, t = _dsm_batch(ux_tr, uz_tr, codes, scales, level, eps)
        out, cache = _mlp.forward(p, U, ws_tr, keep=True)
        loss, g = _mlp.mse(out, t, t)
        return loss, _mlp.backward(p, cache, g, ws_tr)

    def val_loss(p):
        r = _mlp.forward(p, U_va, ws_va) - t_va
        return float(np.mean(r * r))

    params, trace = _mlp.train(params, loss_grad, val_loss, lr=config.lr,
                               max_epochs=config.max_epochs, patience=config.patience,
                               ema=config.ema)
    return ScoreModel(
        params=params,
        x_mean=x_mean,
        x_scale=x_scale,
        z_mean=z_mean,
        z_scale=z_scale,
        noise_scales=tuple(float(s) for s in scales),
        diagnostics={"epochs": trace.epochs, "best_epoch": trace.best_epoch,
                     "val_loss": trace.best_val},
    )


def fit_marginal_score(x, config: LearnerConfig | None = None) -> ScoreModel:
    """Estimate d/dx log f_X(x) by denoising score matching."""
    return fit_conditional_score(x, None, config)
