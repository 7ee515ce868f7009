"""Conjugate gradient on the 5-point Laplacian of an m x m grid."""
from __future__ import annotations

import math

import numpy as np

from .base import (
    AcceptanceResult,
    Kernel,
    KernelDiverged,
    Region,
    RegionKind,
    read_f64,
    write_f64,
)


def laplace_apply(v: np.ndarray) -> np.ndarray:
    """Dense reference for A @ v with A the 5-point Laplacian (4 on the diagonal)."""
    out = 4.0 * v
    out[1:, :] -= v[:-1, :]
    out[:-1, :] -= v[1:, :]
    out[:, 1:] -= v[:, :-1]
    out[:, :-1] -= v[:, 1:]
    return out


class CGSolve(Kernel):
    name = "cgsolve"

    def layout(self):
        m = self.spec.size
        self.m = m
        n = m * m
        reg = self.registry
        self.x = reg.allocate("x", 8 * n)
        self.r = reg.allocate("r", 8 * n)
        self.p = reg.allocate("p", 8 * n)
        self.q = reg.allocate("q", 8 * n)
        self.rho = reg.allocate("rho", 8)
        self.b = reg.allocate("b", 8 * n, read_only=True)
        self.regions.regions = [
            Region(1, "matvec", RegionKind.LOOP, m),
            Region(2, "axpy", RegionKind.LOOP, m),
            Region(3, "scalars", RegionKind.STRAIGHT),
            Region(4, "direction", RegionKind.LOOP, m),
        ]
        rng = np.random.default_rng(self.spec.seed)
        self._b = 0.5 + rng.random((m, m))
        self.bnorm = float(np.linalg.norm(self._b))

    def initialize(self, m_):
        m = self.m
        zeros = np.zeros(m)
        for i in range(m):
            write_f64(m_, self.b, i * m, self._b[i])
            write_f64(m_, self.x, i * m, zeros)
            write_f64(m_, self.r, i * m, self._b[i])
            write_f64(m_, self.p, i * m, self._b[i])
            write_f64(m_, self.q, i * m, zeros)
        write_f64(m_, self.rho, 0, [float(np.sum(self._b * self._b))])

    def iteration(self, mc, ctx):
        m = self.m
        x, r, p, q = self.x, self.r, self.p, self.q
        ctx.begin(1)
        pq = 0.0
        for i in range(m):
            pi = read_f64(mc, p, i * m, m)
            qi = 4.0 * pi
            qi[1:] -= pi[:-1]
            qi[:-1] -= pi[1:]
            if i > 0:
                qi -= read_f64(mc, p, (i - 1) * m, m)
            if i < m - 1:
                qi -= read_f64(mc, p, (i + 1) * m, m)
            write_f64(mc, q, i * m, qi)
            pq += float(pi @ qi)
            ctx.step(i)
        ctx.begin(2)
        rho = float(read_f64(mc, self.rho, 0, 1)[0])
        if not (math.isfinite(pq) and pq > 0.0 and math.isfinite(rho)):
            raise KernelDiverged(f"breakdown: p.Ap={pq}, rho={rho}")
        alpha = rho / pq
        rr = 0.0
        for i in range(m):
            xi = read_f64(mc, x, i * m, m)
            pi = read_f64(mc, p, i * m, m)
            write_f64(mc, x, i * m, xi + alpha * pi)
            ri = read_f64(mc, r, i * m, m)
            qi = read_f64(mc, q, i * m, m)
            ri = ri - alpha * qi
            write_f64(mc, r, i * m, ri)
            rr += float(ri @ ri)
            ctx.step(i)
        ctx.begin(3)
        beta = rr / rho if rho != 0.0 else 0.0
        write_f64(mc, self.rho, 0, [rr])
        ctx.end()
        ctx.begin(4)
        for i in range(m):
            ri = read_f64(mc, r, i * m, m)
            pi = read_f64(mc, p, i * m, m)
            write_f64(mc, p, i * m, ri + beta * pi)
            ctx.step(i)
        rel = math.sqrt(rr) / self.bnorm
        if not math.isfinite(rel) or rel > 1e6:
            raise KernelDiverged(f"relative residual {rel}")
        return rel <= self.spec.tolerance

    def residual(self, mc) -> float:
        m = self.m
        xs = np.stack([read_f64(mc, self.x, i * m, m) for i in range(m)])
        return float(np.linalg.norm(self._b - laplace_apply(xs))) / self.bnorm

    def verify(self, mc, iterations, converged):
        rel = self.residual(mc)
        ok = converged and math.isfinite(rel) and rel <= self.spec.tolerance
        return AcceptanceResult(ok, iterations, rel, converged)
