"""Neural regression with exact input gradients."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .._rng import generator
from ..exceptions import DataError
from . import _mlp
from ._prep import as_matrix, chunks, column_stats, split_rows
from .config import LearnerConfig

MODEL_SCHEMA = 1


@dataclass(frozen=True, eq=False)
class RegressorModel:
    """Fitted feed-forward regressor on standardized inputs and targets.

    ``treatment_cols`` are the feature columns :func:`gradient_wrt_x`
    differentiates along by default.
    """

    params: list
    x_mean: np.ndarray
    x_scale: np.ndarray
    y_mean: float
    y_scale: float
    treatment_cols: tuple[int, ...] = (0,)
    activation: str = "silu"
    target_transform: str = "identity"
    diagnostics: dict = field(default_factory=dict)

    @property
    def widths(self) -> tuple[int, ...]:
        return tuple([self.params[0][0].shape[0]] + [W.shape[1] for W, _ in self.params])

    @property
    def n_features(self) -> int:
        return self.params[0][0].shape[0]

    def _inputs(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        if X.ndim == 1:
            X = X[:, None] if self.n_features == 1 else X[None, :]
        if X.shape[1] != self.n_features:
            raise DataError(f"model expects {self.n_features} features, got {X.shape[1]}")
        return (X - self.x_mean) / self.x_scale

    def predict(self, X) -> np.ndarray:
        U = self._inputs(X)
        out = np.empty(U.shape[0])
        ws = _mlp.Workspace()
        for sl in chunks(U.shape[0]):
            out[sl] = _mlp.forward(self.params, U[sl], ws)[:, 0]
        return self.y_mean + self.y_scale * out

    def value_and_grad(self, X) -> tuple[np.ndarray, np.ndarray]:
        """Predictions and the full gradient w.r.t. every raw feature."""
        U = self._inputs(X)
        val = np.empty(U.shape[0])
        grad = np.empty(U.shape)
        for sl in chunks(U.shape[0]):
            val[sl], grad[sl] = _mlp.value_and_input_grad(self.params, U[sl])
        return self.y_mean + self.y_scale * val, grad * (self.y_scale / self.x_scale)

    def to_json(self) -> dict:
        return {
            "kind": "regressor",
            "schema": MODEL_SCHEMA,
            "activation": self.activation,
            "target_transform": self.target_transform,
            "widths": list(self.widths),
            "layers": _mlp.flatten(self.params),
            "x_mean": self.x_mean.tolist(),
            "x_scale": self.x_scale.tolist(),
            "y_mean": self.y_mean,
            "y_scale": self.y_scale,
            "treatment_cols": list(self.treatment_cols),
        }

    @classmethod
    def from_json(cls, blob: dict) -> "RegressorModel":
        if blob.get("kind") != "regressor" or blob.get("schema") != MODEL_SCHEMA:
            raise DataError("not a serialized regressor of a supported schema")
        return cls(
            params=_mlp.unflatten(blob["layers"]),
            x_mean=np.asarray(blob["x_mean"], dtype=float),
            x_scale=np.asarray(blob["x_scale"], dtype=float),
            y_mean=float(blob["y_mean"]),
            y_scale=float(blob["y_scale"]),
            treatment_cols=tuple(blob["treatment_cols"]),
            activation=blob["activation"],
            target_transform=blob["target_transform"],
        )


def fit_regression(features, targets, config: LearnerConfig | None = None,
                   treatment_cols: tuple[int, ...] = (0,)) -> RegressorModel:
    """Least-squares network fit with early stopping on a held-out split."""
    config = config or LearnerConfig()
    X = as_matrix(features, "features")
    y = np.asarray(targets, dtype=float).reshape(-1)
    if X.shape[0] != y.shape[0]:
        raise DataError(f"features have {X.shape[0]} rows but targets have {y.shape[0]}")
    if X.shape[0] < 20:
        raise DataError(f"need at least 20 rows to fit a regression, got {X.shape[0]}")
    if not np.all(np.isfinite(y)):
        raise DataError("targets contain non-finite entries")

    x_mean, x_scale = column_stats(X)
    y_mean, y_scale = column_stats(y[:, None])
    U = (X - x_mean) / x_scale
    t = ((y - y_mean) / y_scale)[:, None]

    rng = generator(config.seed, "regression")
    tr, va = split_rows(X.shape[0], config.val_fraction, rng)
    U_tr, t_tr, U_va, t_va = U[tr], t[tr], U[va], t[va]
    params = _mlp.init_params((X.shape[1], *config.hidden, 1), rng)
    ws_tr, ws_va = _mlp.Workspace(), _mlp.Workspace()
    gbuf = np.empty_like(t_tr)

    def loss_grad(p, epoch):
        out, cache = _mlp.forward(p, U_tr, ws_tr, keep=True)
        loss, g = _mlp.mse(out, t_tr, gbuf)
        return loss, _mlp.backward(p, cache, g, ws_tr)

    def val_loss(p):
        r = _mlp.forward(p, U_va, ws_va) - t_va
        return float(np.mean(r * r))

    params, trace = _mlp.train(params, loss_grad, val_loss, lr=config.lr,
                               max_epochs=config.max_epochs, patience=config.patience)
    return RegressorModel(
        params=params,
        x_mean=x_mean,
        x_scale=x_scale,
        y_mean=float(y_mean[0]),
        y_scale=float(y_scale[0]),
        treatment_cols=tuple(treatment_cols),
        diagnostics={
            "epochs": trace.epochs,
            "best_epoch": trace.best_epoch,
            "val_mse": trace.best_val * float(y_scale[0]) ** 2,
        },
    )


def gradient_wrt_x(model: RegressorModel, point, coords: tuple[int, ...] | None = None) -> np.ndarray:
    """Derivative of the fitted function along the treatment coordinates.

    A single point gives a vector of length ``len(coords)``; a matrix of
    points gives one row per point.
    """
    coords = model.treatment_cols if coords is None else tuple(coords)
    pt = np.asarray(point, dtype=float)
    single = pt.ndim == 0 or (pt.ndim == 1 and model.n_features > 1)
    _, grad = model.value_and_grad(np.atleast_1d(pt))
    grad = grad[:, list(coords)]
    return grad[0] if single else grad
