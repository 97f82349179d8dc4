"""Density ratio f_V(v) / f_{V|X}(v | x) by probabilistic classification.

Joint pairs ``(x_i, v_i)`` are labelled 1 and pairs with ``v`` shuffled across
rows are labelled 0.  With balanced classes the Bayes log-odds equal
``log f(x, v) - log f(x) f(v)``, so the ratio is ``exp(-log_odds)``.
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
RATIO_CLIP = (1e-3, 1e3)


@dataclass(frozen=True, eq=False)
class RatioModel:
    params: list
    x_mean: np.ndarray
    x_scale: np.ndarray
    v_mean: float
    v_scale: float
    clip: tuple[float, float] = RATIO_CLIP
    activation: str = "silu"
    diagnostics: dict = field(default_factory=dict)

    def log_odds(self, v, x) -> np.ndarray:
        v = np.asarray(v, dtype=float).reshape(-1)
        X = np.asarray(x, dtype=float)
        X = X.reshape(v.shape[0], -1) if X.ndim < 2 else X
        U = np.hstack([(X - self.x_mean) / self.x_scale, ((v - self.v_mean) / self.v_scale)[:, None]])
        out = np.empty(U.shape[0])
        ws = _mlp.Workspace()
        for sl in chunks(U.shape[0]):
            out[sl] = _mlp.forward(self.params, U[sl], ws)[:, 0]
        return out

    def ratio(self, v, x) -> np.ndarray:
        """Clipped ratio; see :meth:`ratio_and_clipped` for the clip flags."""
        return self.ratio_and_clipped(v, x)[0]

    def ratio_and_clipped(self, v, x) -> tuple[np.ndarray, np.ndarray]:
        lo, hi = self.clip
        raw = -self.log_odds(v, x)
        clipped = (raw < np.log(lo)) | (raw > np.log(hi))
        return np.exp(np.clip(raw, np.log(lo), np.log(hi))), clipped

    def to_json(self) -> dict:
        return {
            "kind": "ratio",
            "schema": MODEL_SCHEMA,
            "activation": self.activation,
            "layers": _mlp.flatten(self.params),
            "x_mean": self.x_mean.tolist(),
            "x_scale": self.x_scale.tolist(),
            "v_mean": self.v_mean,
            "v_scale": self.v_scale,
            "clip": list(self.clip),
        }

    @classmethod
    def from_json(cls, blob: dict) -> "RatioModel":
        if blob.get("kind") != "ratio" or blob.get("schema") != MODEL_SCHEMA:
            raise DataError("not a serialized ratio model of a supported schema")
        return cls(
            params=_mlp.unflatten(blob["layers"]),
            x_mean=np.asarray(blob["x_mean"], dtype=float),
            x_scale=np.asarray(blob["x_scale"], dtype=float),
            v_mean=float(blob["v_mean"]),
            v_scale=float(blob["v_scale"]),
            clip=tuple(blob["clip"]),
            activation=blob["activation"],
        )


def _pairs(ux, uv, perm):
    joint = np.hstack([ux, uv[:, None]])
    product = np.hstack([ux, uv[perm][:, None]])
    labels = np.concatenate([np.ones(ux.shape[0]), np.zeros(ux.shape[0])])[:, None]
    return np.vstack([joint, product]), labels


def fit_density_ratio(v, x, config: LearnerConfig | None = None) -> RatioModel:
    """Classifier estimate of f_V(v) / f_{V|X}(v|x)."""
    config = config or LearnerConfig()
    v = np.asarray(v, dtype=float).reshape(-1)
    X = as_matrix(x, "x")
    n = v.shape[0]
    if X.shape[0] != n:
        raise DataError(f"v has {n} rows but x has {X.shape[0]}")
    if n < 50:
        raise DataError(f"need at least 50 rows to fit a density ratio, got {n}")
    if not np.all(np.isfinite(v)):
        raise DataError("v contains non-finite entries")
    if np.ptp(v) == 0 or np.all(np.ptp(X, axis=0) == 0):
        raise DataError("joint and shuffled samples coincide (constant v or x); classes are degenerate")

    x_mean, x_scale = column_stats(X)
    v_mean, v_scale = column_stats(v[:, None])
    v_mean, v_scale = float(v_mean[0]), float(v_scale[0])
    ux = (X - x_mean) / x_scale
    uv = (v - v_mean) / v_scale

    rng = generator(config.seed, "ratio")
    tr, va = split_rows(n, config.val_fraction, rng)
    reps = config.noise_replicates
    va_blocks = [_pairs(ux[va], uv[va], rng.permutation(va.shape[0])) for _ in range(reps)]
    U_va = np.vstack([b[0] for b in va_blocks])
    y_va = np.vstack([b[1] for b in va_blocks])

    perm_rng = generator(config.seed, "ratio", "shuffle")
    params = _mlp.init_params((X.shape[1] + 1, *config.hidden, 1), rng)
    ws_tr, ws_va = _mlp.Workspace(), _mlp.Workspace()
    ux_tr, uv_tr = ux[tr], uv[tr]

    def loss_grad(p, epoch):
        U, y = _pairs(ux_tr, uv_tr, perm_rng.permutation(tr.shape[0]))
        out, cache = _mlp.forward(p, U, ws_tr, keep=True)
        loss, g = _mlp.logistic(out, y)
        return loss, _mlp.backward(p, cache, g, ws_tr)

    def val_loss(p):
        out = _mlp.forward(p, U_va, ws_va)
        return float(np.mean(np.logaddexp(0.0, out) - y_va * out))

    params, trace = _mlp.train(params, loss_grad, val_loss, lr=config.lr,
                               max_epochs=config.max_epochs, patience=config.patience,
                               ema=config.ema)
    return RatioModel(
        params=params,
        x_mean=x_mean,
        x_scale=x_scale,
        v_mean=v_mean,
        v_scale=v_scale,
        diagnostics={"epochs": trace.epochs, "best_epoch": trace.best_epoch,
                     "val_loss": trace.best_val},
    )
