"""Columnar datasets and their CSV form.

The canonical CSV header is ``y,x,z1..zk[,iv1..ivm][,v_true]``; floats are
written with ``repr`` so a write/read cycle reproduces every bit.
"""
from __future__ import annotations

import csv
import hashlib
import io
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .exceptions import DataError


def _column(a, name: str) -> np.ndarray:
    a = np.array(a, dtype=float)  # private copy: stored columns are frozen
    if a.ndim != 1:
        raise DataError(f"column {name!r} must be one-dimensional, got shape {a.shape}")
    return a


def _block(a, n: int, name: str) -> np.ndarray:
    if a is None:
        return np.empty((n, 0))
    a = np.array(a, dtype=float)
    if a.ndim == 1:
        a = a[:, None]
    if a.ndim != 2 or a.shape[0] != n:
        raise DataError(f"{name} must have {n} rows, got shape {a.shape}")
    return a


@dataclass(frozen=True, eq=False)
class Dataset:
    """Observations ``(y, x, controls[, instruments][, v_true])``.

    ``x`` is the treatment on the scale it enters the log outcome: log X for
    elasticities, X itself for semi-elasticities.
    """

    y: np.ndarray
    x: np.ndarray
    z_controls: np.ndarray | None = None
    z_instruments: np.ndarray | None = None
    v_true: np.ndarray | None = None

    def __post_init__(self):
        y = _column(self.y, "y")
        x = _column(self.x, "x")
        n = y.shape[0]
        if n < 1:
            raise DataError("dataset is empty")
        if x.shape[0] != n:
            raise DataError(f"y has {n} rows but x has {x.shape[0]}")
        controls = _block(self.z_controls, n, "z_controls")
        instruments = None if self.z_instruments is None else _block(self.z_instruments, n, "z_instruments")
        if instruments is not None and instruments.shape[1] == 0:
            instruments = None
        v_true = None if self.v_true is None else _column(self.v_true, "v_true")
        if v_true is not None and v_true.shape[0] != n:
            raise DataError(f"v_true must have {n} rows, got {v_true.shape[0]}")
        for name, arr in (("y", y), ("x", x), ("z_controls", controls),
                          ("z_instruments", instruments), ("v_true", v_true)):
            if arr is not None and not np.all(np.isfinite(arr)):
                raise DataError(f"{name} contains non-finite entries")
        if np.any(y <= 0):
            raise DataError(f"outcome must be strictly positive; found {int(np.sum(y <= 0))} non-positive value(s)")
        for name, arr in (("y", y), ("x", x), ("z_controls", controls),
                          ("z_instruments", instruments), ("v_true", v_true)):
            if arr is not None:
                arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def n(self) -> int:
        return self.y.shape[0]

    @property
    def log_y(self) -> np.ndarray:
        return np.log(self.y)

    @property
    def has_instruments(self) -> bool:
        return self.z_instruments is not None

    def columns(self) -> dict[str, np.ndarray]:
        cols = {"y": self.y, "x": self.x}
        for j in range(self.z_controls.shape[1]):
            cols[f"z{j + 1}"] = self.z_controls[:, j]
        if self.z_instruments is not None:
            for j in range(self.z_instruments.shape[1]):
                cols[f"iv{j + 1}"] = self.z_instruments[:, j]
        if self.v_true is not None:
            cols["v_true"] = self.v_true
        return cols

    def subset(self, rows) -> "Dataset":
        rows = np.asarray(rows)
        return Dataset(
            y=self.y[rows],
            x=self.x[rows],
            z_controls=self.z_controls[rows],
            z_instruments=None if self.z_instruments is None else self.z_instruments[rows],
            v_true=None if self.v_true is None else self.v_true[rows],
        )

    def to_csv_text(self) -> str:
        return table_to_csv_text(self.columns())

    def content_hash(self) -> str:
        return hashlib.sha256(self.to_csv_text().encode()).hexdigest()

    def write_csv(self, path) -> None:
        Path(path).write_text(self.to_csv_text())

    @classmethod
    def from_table(cls, table: dict[str, np.ndarray], y: str = "y", x: str = "x",
                   controls: list[str] | None = None, instruments: list[str] | None = None,
                   v_true: str | None = None) -> "Dataset":
        """Bind named columns to roles; unknown names raise ``DataError``."""
        if controls is None:
            controls = sorted((c for c in table if _is_indexed(c, "z")), key=_index_key)
        if instruments is None:
            instruments = sorted((c for c in table if _is_indexed(c, "iv")), key=_index_key)
        if v_true is None and "v_true" in table:
            v_true = "v_true"
        needed = [y, x, *controls, *instruments] + ([v_true] if v_true else [])
        missing = [c for c in needed if c not in table]
        if missing:
            raise DataError(f"column(s) not found: {', '.join(missing)}")
        n = len(table[y])
        return cls(
            y=table[y],
            x=table[x],
            z_controls=np.column_stack([table[c] for c in controls]) if controls else np.empty((n, 0)),
            z_instruments=np.column_stack([table[c] for c in instruments]) if instruments else None,
            v_true=table[v_true] if v_true else None,
        )


def _is_indexed(name: str, prefix: str) -> bool:
    return name.startswith(prefix) and name[len(prefix):].isdigit()


def _index_key(name: str) -> int:
    return int("".join(ch for ch in name if ch.isdigit()))


def table_to_csv_text(columns: dict[str, np.ndarray]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    names = list(columns)
    w.writerow(names)
    arrays = [np.asarray(columns[c], dtype=float) for c in names]
    for i in range(len(arrays[0]) if arrays else 0):
        w.writerow([repr(float(a[i])) for a in arrays])
    return buf.getvalue()


def read_table(path) -> dict[str, np.ndarray]:
    """Read a numeric CSV with a header row into named float columns."""
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    rows = list(csv.reader(io.StringIO(text)))
    if not rows:
        raise DataError(f"{path} is empty")
    header = [h.strip() for h in rows[0]]
    if len(set(header)) != len(header):
        raise DataError(f"{path} has duplicate column names")
    body = [r for r in rows[1:] if r]
    for lineno, r in enumerate(body, start=2):
        if len(r) != len(header):
            raise DataError(f"{path}, line {lineno}: expected {len(header)} fields, got {len(r)}")
    try:
        values = np.array([[float(v) for v in r] for r in body], dtype=float).reshape(len(body), len(header))
    except ValueError as exc:
        raise DataError(f"{path}: non-numeric entry ({exc})") from exc
    return {h: values[:, j].copy() for j, h in enumerate(header)}


def read_csv(path, **roles) -> Dataset:
    return Dataset.from_table(read_table(path), **roles)
