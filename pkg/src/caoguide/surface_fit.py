"""Bivariate degree-5 polynomial height surfaces (poly55).

``z = sum c_k * u**i * v**j`` over the 21 monomials with ``i + j <= 5``,
where ``u = (x - x_mean) / x_scale`` and ``v = (y - y_mean) / y_scale``.
Monomials are in graded order: by total degree, then by descending power
of ``u``: 1, u, v, u^2, uv, v^2, u^3, ...
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import RankDeficientFootprint, TooFewPoints

DEGREE = 5
EXPONENTS: tuple[tuple[int, int], ...] = tuple(
    (d - j, j) for d in range(DEGREE + 1) for j in range(d + 1)
)
N_TERMS = len(EXPONENTS)  # 21


def _powers(t: np.ndarray) -> np.ndarray:
    """(DEGREE + 1, ...) stack of t**0 .. t**DEGREE."""
    out = np.empty((DEGREE + 1,) + t.shape)
    out[0] = 1.0
    for k in range(1, DEGREE + 1):
        out[k] = out[k - 1] * t
    return out


def design_matrix(u: np.ndarray, v: np.ndarray) -> np.ndarray:
    pu, pv = _powers(u), _powers(v)
    return np.stack([pu[i] * pv[j] for i, j in EXPONENTS], axis=-1)


@dataclass(frozen=True, eq=False)
class PolySurface:
    coefficients: np.ndarray
    x_mean: float = 0.0
    y_mean: float = 0.0
    x_scale: float = 1.0
    y_scale: float = 1.0
    # fit footprint (x_min, x_max, y_min, y_max); None when not fitted
    footprint: tuple[float, float, float, float] | None = None

    def __post_init__(self):
        c = np.array(self.coefficients, dtype=np.float64).reshape(-1)
        if len(c) != N_TERMS:
            raise ValueError(f"poly55 needs {N_TERMS} coefficients, got {len(c)}")
        if not (self.x_scale > 0 and self.y_scale > 0):
            raise ValueError("normalization scales must be positive")
        c.flags.writeable = False
        object.__setattr__(self, "coefficients", c)

    def _uv(self, x, y):
        u = (np.asarray(x, dtype=np.float64) - self.x_mean) / self.x_scale
        v = (np.asarray(y, dtype=np.float64) - self.y_mean) / self.y_scale
        return np.broadcast_arrays(u, v)

    def eval(self, x, y):
        u, v = self._uv(x, y)
        z = design_matrix(u, v) @ self.coefficients
        return float(z) if z.ndim == 0 else z

    __call__ = eval

    def gradient(self, x, y):
        """Analytic ``(df/dx, df/dy)`` in input units."""
        u, v = self._uv(x, y)
        pu, pv = _powers(u), _powers(v)
        dfx = np.zeros(u.shape)
        dfy = np.zeros(u.shape)
        for c, (i, j) in zip(self.coefficients, EXPONENTS):
            if i:
                dfx = dfx + c * i * pu[i - 1] * pv[j]
            if j:
                dfy = dfy + c * j * pu[i] * pv[j - 1]
        dfx = dfx / self.x_scale
        dfy = dfy / self.y_scale
        if dfx.ndim == 0:
            return float(dfx), float(dfy)
        return dfx, dfy

    def normal(self, x, y) -> np.ndarray:
        """Unit upward normal ``(-fx, -fy, 1) / |.|``; shape (3,) or (N, 3)."""
        fx, fy = self.gradient(x, y)
        n = np.stack(np.broadcast_arrays(-np.asarray(fx), -np.asarray(fy), np.ones(np.shape(fx))), axis=-1)
        return n / np.linalg.norm(n, axis=-1, keepdims=True)

    def in_footprint(self, x, y):
        """True where (x, y) lies inside the fit footprint's bounding box."""
        if self.footprint is None:
            return np.ones(np.broadcast(np.asarray(x), np.asarray(y)).shape, dtype=bool)
        x0, x1, y0, y1 = self.footprint
        x, y = np.asarray(x), np.asarray(y)
        return (x >= x0) & (x <= x1) & (y >= y0) & (y <= y1)

    def to_dict(self) -> dict:
        return {
            "model": "poly55",
            "exponents": [list(e) for e in EXPONENTS],
            "coefficients": [float(c) for c in self.coefficients],
            "normalization": {
                "x_mean": self.x_mean, "y_mean": self.y_mean,
                "x_scale": self.x_scale, "y_scale": self.y_scale,
            },
            "footprint": None if self.footprint is None else list(self.footprint),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PolySurface":
        n = d["normalization"]
        fp = d.get("footprint")
        return cls(d["coefficients"], n["x_mean"], n["y_mean"], n["x_scale"], n["y_scale"],
                   None if fp is None else tuple(fp))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "PolySurface":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def eval(surface: PolySurface, x, y):
    return surface.eval(x, y)


def surface_normal(surface: PolySurface, x, y) -> np.ndarray:
    return surface.normal(x, y)


def fit_poly55(points) -> PolySurface:
    """Least-squares poly55 fit of z over (x, y) with standardized inputs."""
    p = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if len(p) < N_TERMS:
        raise TooFewPoints(f"poly55 needs at least {N_TERMS} points, got {len(p)}")
    x, y, z = p[:, 0], p[:, 1], p[:, 2]
    xm, ym = float(x.mean()), float(y.mean())
    xs, ys = float(x.std()), float(y.std())
    if not (xs > 0 and ys > 0):
        raise RankDeficientFootprint("footprint has zero extent along x or y")
    A = design_matrix((x - xm) / xs, (y - ym) / ys)
    coef, _, rank, sv = np.linalg.lstsq(A, z, rcond=None)
    if rank < N_TERMS:
        raise RankDeficientFootprint(f"design matrix rank {rank} < {N_TERMS}")
    return PolySurface(coef, xm, ym, xs, ys,
                       (float(x.min()), float(x.max()), float(y.min()), float(y.max())))
