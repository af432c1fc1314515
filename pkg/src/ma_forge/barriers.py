"""Explicit radial and cylindrical barriers for det D^2 u <= 1.

``W_n`` vanishes on the unit ball and has unit Monge-Ampere density
outside it; ``w_{n,k}`` is a Lipschitz-singular supersolution that grows
like ``|y|`` across a ``k``-dimensional set.  ``E`` and ``V`` are the
edge and vertex model profiles.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import integrate, special

__all__ = [
    "BarrierParams",
    "W_profile",
    "eval_W",
    "grad_W",
    "eval_w",
    "radial_constant",
    "radial_constant_closed_form",
    "eval_models",
    "hessian_fd",
    "check_barrier_determinant",
    "barrier_samples",
    "barrier_rhs",
    "ClearanceError",
]


class ClearanceError(ValueError):
    """A sample point is too close to a surface where the identity is singular."""


@dataclass(frozen=True)
class BarrierParams:
    n: int
    k: int

    def __post_init__(self):
        if self.n < 1 or self.k < 0 or not 2 * self.k < self.n:
            raise ValueError(f"need n >= 1 and 0 <= k < n/2, got n={self.n}, k={self.k}")

    @property
    def gamma(self) -> float:
        return 2.0 * (self.n - self.k) / (self.n - 2 * self.k)

    @property
    def C(self) -> float:
        if self.k == 0:
            return 1.0
        g = self.gamma
        return (g / 2.0) ** (1.0 - self.k / self.n) * (g - 1.0) ** (1.0 / self.n)


def _integrand_v(v: float, n: int) -> float:
    # s = 1 + v**n removes the (s - 1)**(1/n) endpoint singularity
    vn = v**n
    return math.expm1(n * math.log1p(vn)) ** (1.0 / n) * n * v ** (n - 1)


def _W_interval(a: float, b: float, n: int) -> float:
    """Integral of (s^n - 1)^(1/n) over [a, b] with 1 <= a <= b."""
    if b <= a:
        return 0.0
    if n == 1:
        return 0.5 * ((b - 1.0) ** 2 - (a - 1.0) ** 2)
    va, vb = (a - 1.0) ** (1.0 / n), (b - 1.0) ** (1.0 / n)
    val, _ = integrate.quad(_integrand_v, va, vb, args=(n,), epsabs=0.0, epsrel=1e-12, limit=200)
    return val


def W_profile(n: int, r) -> np.ndarray:
    """Radial profile ``W_n(r)``; accepts an array of radii.

    Distinct radii are sorted and the integral accumulated interval by
    interval, so lattice radius sets (few distinct values) are cheap.
    """
    r = np.abs(np.asarray(r, dtype=float))
    flat = r.ravel()
    uniq, inv = np.unique(flat, return_inverse=True)
    out = np.zeros_like(uniq)
    acc, prev = 0.0, 1.0
    for i, ri in enumerate(uniq):
        if ri <= 1.0:
            continue
        acc += _W_interval(prev, ri, n)
        prev = ri
        out[i] = acc
    return out[inv].reshape(r.shape)


def eval_W(n: int, x) -> np.ndarray:
    """``W_n`` at points ``x`` (last axis is the coordinate axis)."""
    x = np.asarray(x, dtype=float)
    return W_profile(n, np.linalg.norm(x, axis=-1))


def grad_W(n: int, x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    r = np.linalg.norm(x, axis=-1, keepdims=True)
    mag = np.power(np.clip(r**n - 1.0, 0.0, None), 1.0 / n)
    with np.errstate(invalid="ignore", divide="ignore"):
        g = np.where(r > 0, mag * x / r, 0.0)
    return g


def eval_w(params: BarrierParams, x, y=None) -> np.ndarray:
    """``w_{n,k}(x, y)`` with ``x`` in R^(n-k) and ``y`` in R^k.

    With ``y`` omitted, the last axis of ``x`` holds all ``n`` coordinates.
    """
    n, k = params.n, params.k
    x = np.asarray(x, dtype=float)
    if y is None:
        x, y = x[..., : n - k], x[..., n - k :]
    y = np.asarray(y, dtype=float)
    if k == 0:
        return 0.5 * np.sum(x * x, axis=-1)
    r = np.linalg.norm(x, axis=-1)
    t = np.linalg.norm(y, axis=-1)
    g = params.gamma
    rg = r**g
    inner = t <= rg
    with np.errstate(divide="ignore", invalid="ignore"):
        quad_branch = 0.5 * (rg + np.where(inner, t * t / np.where(rg > 0, rg, 1.0), 0.0))
    val = np.where(inner, quad_branch, t)
    return val / params.C


def barrier_rhs(params: BarrierParams | None, n: int, pts: np.ndarray) -> np.ndarray:
    """Closed-form Monge-Ampere density of the barrier at ``pts``.

    ``params=None`` selects ``W_n``.
    """
    pts = np.asarray(pts, dtype=float)
    if params is None:
        return (np.linalg.norm(pts, axis=-1) > 1.0).astype(float)
    k = params.k
    if k == 0:
        return np.ones(pts.shape[:-1])
    r = np.linalg.norm(pts[..., : n - k], axis=-1)
    t = np.linalg.norm(pts[..., n - k :], axis=-1)
    rg = r**params.gamma
    s = t / rg
    return np.where(t < rg, (1.0 - s * s) ** (n - k), 0.0)


def _second_derivative(func, p, d, order):
    """Second derivative of ``func`` along the vector ``d`` (unnormalised)."""
    if order == 2:
        return func(p + d) + func(p - d) - 2.0 * func(p)
    return (
        -func(p + 2 * d) + 16.0 * func(p + d) - 30.0 * func(p) + 16.0 * func(p - d) - func(p - 2 * d)
    ) / 12.0


def hessian_fd(func, p: np.ndarray, h: float, order: int = 4) -> np.ndarray:
    """Central-difference Hessian of a scalar function of one point.

    Off-diagonal entries come from the polarisation identity
    ``4 H_ij = D_{e_i+e_j} - D_{e_i-e_j}`` applied to directional second
    differences, so every entry uses the same 1D stencil of given order.
    """
    if order not in (2, 4):
        raise ValueError("order must be 2 or 4")
    p = np.asarray(p, dtype=float)
    n = p.size
    eye = np.eye(n) * h
    H = np.empty((n, n))
    for i in range(n):
        H[i, i] = _second_derivative(func, p, eye[i], order) / (h * h)
        for j in range(i + 1, n):
            dp = _second_derivative(func, p, eye[i] + eye[j], order)
            dm = _second_derivative(func, p, eye[i] - eye[j], order)
            H[i, j] = H[j, i] = (dp - dm) / (4.0 * h * h)
    return H


def _clearance(params, n, p, h):
    """Distance proxies to the singular surfaces, in units of ``h``."""
    if params is None:
        return abs(np.linalg.norm(p) - 1.0) / h
    k = params.k
    if k == 0:
        return np.inf
    x, y = p[: n - k], p[n - k :]
    r, t = np.linalg.norm(x), np.linalg.norm(y)
    g = params.gamma
    # distance to {t = r^g} estimated by the level-set gap over its gradient
    gap = abs(t - r**g) / math.hypot(1.0, g * r ** (g - 1.0))
    return min(r / h, gap / h)


def check_barrier_determinant(params: BarrierParams | None, n: int, samples, h=None, rel_step=1e-3, return_rows=False):
    """Worst error of the finite-difference Hessian determinant.

    ``params=None`` checks ``W_n`` against the indicator of ``|x| > 1``.
    The step is ``rel_step * |sample|`` unless ``h`` is given.  The error
    at each sample is ``|fd - exact| / exact`` where the exact density is
    positive and ``|fd|`` where it vanishes.

    Raises
    ------
    ClearanceError
        If a sample lies within ``5h`` of a singular surface.
    """
    samples = np.atleast_2d(np.asarray(samples, dtype=float))
    if params is None:
        func = lambda q: float(eval_W(n, q))
    else:
        if params.n != n:
            raise ValueError("dimension mismatch")
        func = lambda q: float(eval_w(params, q))
    rows = []
    worst = 0.0
    for p in samples:
        step = h if h is not None else rel_step * np.linalg.norm(p)
        if _clearance(params, n, p, step) < 5.0:
            raise ClearanceError(f"sample {p} violates the 5h clearance")
        fd = float(np.linalg.det(hessian_fd(func, p, step)))
        exact = float(barrier_rhs(params, n, p))
        err = abs(fd - exact) / exact if exact > 0 else abs(fd)
        worst = max(worst, err)
        rows.append((p, exact, fd, err))
    return (worst, rows) if return_rows else worst


def barrier_samples(params: BarrierParams | None, n: int, count: int, rng, radius=2.0, rel_step=1e-3):
    """Uniform samples from ``[-radius, radius]^n`` that respect the 5h clearance."""
    out = []
    while len(out) < count:
        p = rng.uniform(-radius, radius, n)
        step = rel_step * np.linalg.norm(p)
        if step > 0 and _clearance(params, n, p, step) >= 5.0:
            out.append(p)
    return np.array(out)


def radial_constant(n: int) -> float:
    """``lim_{R -> inf} W_n(R) - R^2/2`` by quadrature of the convergent tail."""
    if n < 3:
        raise ValueError("the radial constant exists for n >= 3")

    def tail(s):
        # (s^n - 1)^(1/n) - s written without cancellation
        q = -math.expm1(math.log1p(-(s ** (-n))) / n)
        return -s * q

    near, _ = integrate.quad(lambda v: _integrand_v(v, n) - (1.0 + v**n) * n * v ** (n - 1), 0.0, 1.0,
                             epsabs=1e-14, epsrel=1e-12, limit=200)
    far, _ = integrate.quad(tail, 2.0, np.inf, epsabs=1e-14, epsrel=1e-12, limit=400)
    return -0.5 + near + far


def radial_constant_closed_form(n: int) -> float:
    """Beta-function evaluation of the same constant."""
    return special.gamma(-2.0 / n) * special.gamma(1.0 + 1.0 / n) / special.gamma(1.0 - 1.0 / n) / n


def eval_models(n: int, x):
    """Edge model ``E = rho + rho^(n/2) f(x_n)`` with ``f = 1 + t^2`` and vertex model ``V = r + r^(n+1)``."""
    x = np.asarray(x, dtype=float)
    rho = np.linalg.norm(x[..., :-1], axis=-1)
    E = rho + rho ** (n / 2.0) * (1.0 + x[..., -1] ** 2)
    r = np.linalg.norm(x, axis=-1)
    V = r + r ** (n + 1)
    return E, V
