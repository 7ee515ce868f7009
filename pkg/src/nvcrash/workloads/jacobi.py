"""Jacobi relaxation for the 2-D Poisson problem -lap(u) = f with zero boundary."""
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


class Jacobi2D(Kernel):
    name = "jacobi2d"

    def layout(self):
        n = self.spec.size
        self.n = n
        self.width = n + 2
        self.h2 = (1.0 / (n + 1)) ** 2
        cells = self.width * self.width
        reg = self.registry
        self.u = reg.allocate("u", 8 * cells)
        self.u_new = reg.allocate("u_new", 8 * cells)
        self.rhs = reg.allocate("rhs", 8 * cells, read_only=True)
        self.regions.regions = [
            Region(1, "sweep", RegionKind.LOOP, n),
            Region(2, "update", RegionKind.LOOP, n),
        ]
        rng = np.random.default_rng(self.spec.seed)
        f = np.zeros((self.width, self.width))
        f[1:-1, 1:-1] = 1.0 + 0.5 * rng.random((n, n))
        self._f = f
        self.r0 = float(np.linalg.norm(f[1:-1, 1:-1]))

    def initialize(self, m):
        w = self.width
        zeros = np.zeros(w)
        for i in range(w):
            write_f64(m, self.rhs, i * w, self._f[i])
            write_f64(m, self.u, i * w, zeros)
            write_f64(m, self.u_new, i * w, zeros)

    def iteration(self, m, ctx):
        n, w, h2 = self.n, self.width, self.h2
        u, u_new, rhs = self.u, self.u_new, self.rhs
        ctx.begin(1)
        for i in range(1, n + 1):
            up = read_f64(m, u, (i - 1) * w, w)
            mid = read_f64(m, u, i * w, w)
            dn = read_f64(m, u, (i + 1) * w, w)
            f = read_f64(m, rhs, i * w, w)
            new = (up[1:-1] + dn[1:-1] + mid[:-2] + mid[2:] + h2 * f[1:-1]) * 0.25
            write_f64(m, u_new, i * w + 1, new)
            ctx.step(i - 1)
        ctx.begin(2)
        res2 = 0.0
        for i in range(1, n + 1):
            new = read_f64(m, u_new, i * w + 1, n)
            old = read_f64(m, u, i * w + 1, n)
            r = (new - old) * (4.0 / h2)
            res2 += float(r @ r)
            write_f64(m, u, i * w + 1, new)
            ctx.step(i - 1)
        rel = math.sqrt(res2) / self.r0
        if not math.isfinite(rel) or rel > 1e6:
            raise KernelDiverged(f"relative residual {rel}")
        return rel <= self.spec.tolerance

    def residual(self, m) -> float:
        n, w = self.n, self.width
        u = np.stack([read_f64(m, self.u, i * w, w) for i in range(w)])
        f = self._f
        lap = (u[:-2, 1:-1] + u[2:, 1:-1] + u[1:-1, :-2] + u[1:-1, 2:] - 4.0 * u[1:-1, 1:-1]) / self.h2
        return float(np.linalg.norm(f[1:-1, 1:-1] + lap)) / self.r0

    def verify(self, m, iterations, converged):
        rel = self.residual(m)
        ok = converged and math.isfinite(rel) and rel <= self.spec.tolerance
        return AcceptanceResult(ok, iterations, rel, converged)
