"""Input/output records on a uniform sampling grid, with CSV + JSON sidecar IO."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

FLOAT_FMT = "{:.17g}"


@dataclass(frozen=True)
class Dataset:
    """Zero-order-hold inputs ``u_0..u_{n-1}`` and observed outputs ``y_0..y_n``."""

    inputs: np.ndarray
    outputs: np.ndarray
    tau: float
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        u = np.asarray(self.inputs, dtype=float).reshape(-1)
        y = np.asarray(self.outputs, dtype=float).reshape(-1)
        if y.size != u.size + 1:
            raise ValueError(f"need len(outputs) == len(inputs) + 1, got {y.size} and {u.size}")
        object.__setattr__(self, "inputs", u)
        object.__setattr__(self, "outputs", y)

    @property
    def n_steps(self) -> int:
        return self.inputs.size

    @property
    def horizon(self) -> float:
        return self.n_steps * self.tau

    @property
    def times(self) -> np.ndarray:
        return self.tau * np.arange(self.n_steps + 1)

    def with_outputs(self, outputs, **meta) -> "Dataset":
        return Dataset(self.inputs, outputs, self.tau, {**self.meta, **meta})

    def write(self, path) -> list[Path]:
        """Write ``t,u,y`` CSV plus a ``.json`` sidecar; returns both paths.

        The final row has an empty ``u`` since no input acts after the last sample.
        """
        path = Path(path)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["t", "u", "y"])
            for k, (t, y) in enumerate(zip(self.times, self.outputs)):
                u = FLOAT_FMT.format(self.inputs[k]) if k < self.n_steps else ""
                w.writerow([FLOAT_FMT.format(t), u, FLOAT_FMT.format(y)])
        side = path.with_suffix(".json")
        side.write_text(json.dumps({"tau": self.tau, "n_steps": self.n_steps, **self.meta},
                                   indent=2, sort_keys=True, default=_jsonable))
        return [path, side]

    @classmethod
    def read(cls, path) -> "Dataset":
        path = Path(path)
        with path.open(newline="") as fh:
            rows = list(csv.DictReader(fh))
        if not rows or not {"t", "u", "y"} <= set(rows[0]):
            raise ValueError(f"{path}: expected columns t,u,y")
        t = np.array([float(r["t"]) for r in rows])
        y = np.array([float(r["y"]) for r in rows])
        u = np.array([float(r["u"]) for r in rows[:-1]])
        side = path.with_suffix(".json")
        meta = json.loads(side.read_text()) if side.exists() else {}
        tau = float(meta.pop("tau", t[1] - t[0]))
        meta.pop("n_steps", None)
        return cls(u, y, tau, meta)


def _jsonable(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, np.generic):
        return obj.item()
    raise TypeError(f"not JSON serializable: {type(obj)}")
