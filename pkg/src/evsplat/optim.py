"""Adam with per-group learning rates and row-wise state surgery.

Rows of a parameter array are independent Gaussians (or track entries), so
densification needs to append, drop and reset rows of the moment buffers.
"""

from __future__ import annotations

import numpy as np


class Adam:
    def __init__(self, lrs: dict[str, float], beta1=0.9, beta2=0.999, eps=1e-15):
        self.lrs = dict(lrs)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.steps: dict[str, np.ndarray] = {}

    def _init(self, name, param):
        if name not in self.m:
            self.m[name] = np.zeros_like(param)
            self.v[name] = np.zeros_like(param)
            self.steps[name] = np.zeros(len(param), dtype=np.int64)

    def step(self, name: str, param: np.ndarray, grad: np.ndarray, rows=None) -> None:
        """In-place update of ``param``; with ``rows`` only those rows (and
        their moments) move, as in lazy/sparse Adam."""
        lr = self.lrs[name]
        self._init(name, param)
        m, v, steps = self.m[name], self.v[name], self.steps[name]
        if rows is None:
            rows = slice(None)
        else:
            rows = np.unique(np.asarray(rows, dtype=np.int64))
        g = grad[rows]
        steps[rows] += 1
        k = steps[rows].reshape((-1,) + (1,) * (param.ndim - 1)).astype(np.float64)
        m[rows] = self.beta1 * m[rows] + (1.0 - self.beta1) * g
        v[rows] = self.beta2 * v[rows] + (1.0 - self.beta2) * g * g
        m_hat = m[rows] / (1.0 - self.beta1 ** k)
        v_hat = v[rows] / (1.0 - self.beta2 ** k)
        param[rows] -= lr * m_hat / (np.sqrt(v_hat) + self.eps)

    def keep_rows(self, mask) -> None:
        for d in (self.m, self.v, self.steps):
            for name in d:
                d[name] = d[name][mask]

    def append_rows(self, counts: dict[str, int] | int) -> None:
        """Append zero-moment rows (new Gaussians start fresh)."""
        for name in list(self.m):
            n = counts if isinstance(counts, int) else counts[name]
            shape = (n,) + self.m[name].shape[1:]
            self.m[name] = np.concatenate([self.m[name], np.zeros(shape)])
            self.v[name] = np.concatenate([self.v[name], np.zeros(shape)])
            self.steps[name] = np.concatenate([self.steps[name], np.zeros(n, dtype=np.int64)])

    def reset(self, name: str, rows=None) -> None:
        if name not in self.m:
            return
        rows = slice(None) if rows is None else rows
        self.m[name][rows] = 0.0
        self.v[name][rows] = 0.0
        self.steps[name][rows] = 0

    def state_arrays(self, prefix: str) -> dict[str, np.ndarray]:
        out = {}
        for name in self.m:
            out[f"{prefix}.m.{name}"] = self.m[name]
            out[f"{prefix}.v.{name}"] = self.v[name]
            out[f"{prefix}.steps.{name}"] = self.steps[name]
        return out

    def load_state_arrays(self, prefix: str, arrays: dict[str, np.ndarray]) -> None:
        for key, value in arrays.items():
            if not key.startswith(prefix + "."):
                continue
            kind, name = key[len(prefix) + 1:].split(".", 1)
            getattr(self, kind)[name] = value.copy()
