"""Lloyd's k-means on synthetic 2-D blobs, accumulating new centres in memory."""
from __future__ import annotations

import math
from functools import lru_cache

import numpy as np

from .base import (
    AcceptanceResult,
    Kernel,
    Region,
    RegionKind,
    read_f64,
    read_i64,
    write_f64,
    write_i64,
)

K = 4
DIM = 2
CHUNK = 4  # points per inner-loop iteration (one 64B line of coordinates)
BLOB_CENTRES = np.array([[0.0, 0.0], [3.0, 0.0], [0.0, 3.0], [3.0, 3.0]])


def make_points(n: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, K, n)
    return BLOB_CENTRES[labels] + rng.normal(scale=0.9, size=(n, DIM))


def assign(points: np.ndarray, centres: np.ndarray) -> np.ndarray:
    d2 = ((points[:, None, :] - centres[None, :, :]) ** 2).sum(axis=2)
    return d2.argmin(axis=1)


def objective(points: np.ndarray, centres: np.ndarray) -> float:
    d2 = ((points[:, None, :] - centres[None, :, :]) ** 2).sum(axis=2)
    return float(d2.min(axis=1).sum())


@lru_cache(maxsize=32)
def reference_run(n: int, seed: int, max_iterations: int = 5000):
    """Plain in-process Lloyd iteration: (iterations, objective, centres)."""
    pts = make_points(n, seed)
    cent = pts[:K].copy()
    member = np.full(n, -1)
    for it in range(1, max_iterations + 1):
        a = assign(pts, cent)
        delta = int((a != member).sum())
        member = a
        sums = np.zeros((K, DIM))
        counts = np.zeros(K, dtype=np.int64)
        np.add.at(sums, a, pts)
        np.add.at(counts, a, 1)
        nz = counts > 0
        cent = cent.copy()
        cent[nz] = sums[nz] / counts[nz, None]
        if delta == 0:
            return it, objective(pts, cent), cent
    return max_iterations, objective(pts, cent), cent


class KMeans(Kernel):
    name = "kmeans"

    def layout(self):
        n = self.spec.size
        if n % CHUNK or n < K:
            raise ValueError(f"kmeans size must be a multiple of {CHUNK} and >= {K}")
        self.n = n
        self._pts = make_points(n, self.spec.seed)
        reg = self.registry
        self.points = reg.allocate("points", 8 * DIM * n, read_only=True)
        self.membership = reg.allocate("membership", 8 * n)
        self.centroids = reg.allocate("centroids", 8 * K * DIM)
        self.sums = reg.allocate("new_centers", 8 * K * DIM)
        self.counts = reg.allocate("new_counts", 8 * K)
        self.regions.regions = [
            Region(1, "assign", RegionKind.LOOP, n // CHUNK),
            Region(2, "update", RegionKind.STRAIGHT),
        ]

    def initialize(self, m):
        flat = self._pts.reshape(-1)
        for c in range(self.n // CHUNK):
            write_f64(m, self.points, c * CHUNK * DIM, flat[c * CHUNK * DIM:(c + 1) * CHUNK * DIM])
            write_i64(m, self.membership, c * CHUNK, np.full(CHUNK, -1))
        write_f64(m, self.centroids, 0, self._pts[:K].reshape(-1))
        write_f64(m, self.sums, 0, np.zeros(K * DIM))
        write_i64(m, self.counts, 0, np.zeros(K, dtype=np.int64))

    def iteration(self, m, ctx):
        ctx.begin(1)
        delta = 0
        for c in range(self.n // CHUNK):
            cent = read_f64(m, self.centroids, 0, K * DIM).reshape(K, DIM)
            pts = read_f64(m, self.points, c * CHUNK * DIM, CHUNK * DIM).reshape(CHUNK, DIM)
            a = assign(pts, cent)
            old = read_i64(m, self.membership, c * CHUNK, CHUNK)
            delta += int((a != old).sum())
            write_i64(m, self.membership, c * CHUNK, a)
            sums = read_f64(m, self.sums, 0, K * DIM).reshape(K, DIM).copy()
            counts = read_i64(m, self.counts, 0, K).copy()
            np.add.at(sums, a, pts)
            np.add.at(counts, a, 1)
            write_f64(m, self.sums, 0, sums.reshape(-1))
            write_i64(m, self.counts, 0, counts)
            ctx.step(c)
        ctx.begin(2)
        sums = read_f64(m, self.sums, 0, K * DIM).reshape(K, DIM)
        counts = read_i64(m, self.counts, 0, K)
        cent = read_f64(m, self.centroids, 0, K * DIM).reshape(K, DIM).copy()
        nz = counts > 0
        cent[nz] = sums[nz] / counts[nz, None]
        write_f64(m, self.centroids, 0, cent.reshape(-1))
        write_f64(m, self.sums, 0, np.zeros(K * DIM))
        write_i64(m, self.counts, 0, np.zeros(K, dtype=np.int64))
        ctx.end()
        return delta == 0

    def verify(self, m, iterations, converged):
        pts = np.stack(
            [read_f64(m, self.points, c * CHUNK * DIM, CHUNK * DIM) for c in range(self.n // CHUNK)]
        ).reshape(self.n, DIM)
        cent = read_f64(m, self.centroids, 0, K * DIM).reshape(K, DIM)
        obj = objective(pts, cent)
        _, ref, _ = reference_run(self.n, self.spec.seed, self.spec.max_iterations)
        ok = converged and math.isfinite(obj) and abs(obj - ref) <= self.spec.tolerance * ref
        return AcceptanceResult(ok, iterations, obj, converged)
