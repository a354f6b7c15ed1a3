"""Spatial partition of normalized endpoint space into M regions."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import ConfigError, SchemaError

TIE_TOL = 1e-9


def _kmeanspp(points: np.ndarray, m: int, rng: np.random.Generator) -> np.ndarray:
    centroids = [points[rng.integers(len(points))]]
    d2 = ((points - centroids[0]) ** 2).sum(-1)
    for _ in range(1, m):
        total = d2.sum()
        if total <= 0:
            idx = rng.integers(len(points))
        else:
            idx = rng.choice(len(points), p=d2 / total)
        centroids.append(points[idx])
        d2 = np.minimum(d2, ((points - points[idx]) ** 2).sum(-1))
    return np.array(centroids, dtype=np.float64)


def balanced_assign(points: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    """Greedy capacity-constrained assignment.

    Exactly ``n % M`` clusters receive ``n // M + 1`` points and the rest
    ``n // M``. Points whose nearest and second-nearest centroids differ
    the most are placed first, each into its nearest cluster with room.
    """
    n, m = len(points), len(centroids)
    q, r = divmod(n, m)
    dist = np.sqrt(((points[:, None, :] - centroids[None, :, :]) ** 2).sum(-1))
    if m == 1:
        return np.zeros(n, dtype=np.int64)
    part = np.sort(dist, axis=1)
    gap = part[:, 1] - part[:, 0]
    order = np.argsort(-gap, kind="stable")
    prefs = np.argsort(dist, axis=1, kind="stable")

    sizes = np.zeros(m, dtype=np.int64)
    big = 0  # clusters that reached q + 1
    labels = np.empty(n, dtype=np.int64)
    for i in order:
        for c in prefs[i]:
            if sizes[c] < (q + 1 if big < r else q):
                labels[i] = c
                sizes[c] += 1
                if sizes[c] == q + 1:
                    big += 1
                break
    return labels


def constrained_kmeans(points, m: int, seed: int = 0, max_iter: int = 100):
    """Balanced k-means: cluster sizes differ by at most one.

    Returns ``(labels, centroids)``.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    if m < 1:
        raise ConfigError("region count M must be at least 1")
    if m > len(pts):
        raise ConfigError(f"cannot form {m} clusters from {len(pts)} points")
    rng = np.random.default_rng(seed)
    centroids = _kmeanspp(pts, m, rng)
    labels = None
    for _ in range(max_iter):
        new = balanced_assign(pts, centroids)
        if labels is not None and np.array_equal(new, labels):
            break
        labels = new
        centroids = np.array([pts[labels == c].mean(axis=0) for c in range(m)])
    return labels, centroids


def convex_hull(points) -> np.ndarray:
    """Andrew's monotone chain. Degenerate inputs give a point or segment."""
    pts = np.unique(np.asarray(points, dtype=np.float64).reshape(-1, 2), axis=0)
    if len(pts) <= 2:
        return pts

    def cross(o, a, b):
        return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])

    lower, upper = [], []
    for p in pts:
        while len(lower) >= 2 and cross(lower[-2], lower[-1], p) <= 0:
            lower.pop()
        lower.append(p)
    for p in pts[::-1]:
        while len(upper) >= 2 and cross(upper[-2], upper[-1], p) <= 0:
            upper.pop()
        upper.append(p)
    hull = np.array(lower[:-1] + upper[:-1])
    return hull


@dataclass
class RegionPartition:
    method: str
    M: int
    centroids: np.ndarray
    hulls: list = field(default_factory=list)
    fan_parameters: Optional[dict] = None
    meta: dict = field(default_factory=dict)

    def assign(self, points) -> np.ndarray:
        pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
        if self.method == "fan":
            return _fan_assign(pts, self.M, self.fan_parameters or {})
        d2 = ((pts[:, None, :] - self.centroids[None, :, :]) ** 2).sum(-1)
        return np.argmin(d2, axis=1)  # first minimum: ties go to the lowest index

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "M": self.M,
            "centroids": self.centroids.tolist(),
            "hulls": [np.asarray(h).tolist() for h in self.hulls],
            "fan_parameters": self.fan_parameters,
            "meta": self.meta,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RegionPartition":
        for key in ("method", "M", "centroids"):
            if key not in d:
                raise SchemaError(f"partition file missing '{key}'", field=key)
        return cls(
            method=d["method"],
            M=int(d["M"]),
            centroids=np.asarray(d["centroids"], dtype=np.float64).reshape(-1, 2),
            hulls=[np.asarray(h, dtype=np.float64).reshape(-1, 2) for h in d.get("hulls", [])],
            fan_parameters=d.get("fan_parameters"),
            meta=d.get("meta", {}),
        )

    def save(self, path) -> None:
        from .scene import atomic_write_text

        atomic_write_text(path, json.dumps(self.to_dict(), indent=1))

    @classmethod
    def load(cls, path) -> "RegionPartition":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def build_region_partition(points, labels, m: Optional[int] = None, meta: Optional[dict] = None) -> RegionPartition:
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    labels = np.asarray(labels)
    m = int(labels.max()) + 1 if m is None else m
    centroids, hulls = [], []
    for c in range(m):
        members = pts[labels == c]
        if len(members) == 0:
            raise ConfigError(f"cluster {c} is empty")
        centroids.append(members.mean(axis=0))
        hulls.append(convex_hull(members))
    return RegionPartition("kmeans", m, np.array(centroids), hulls, None, dict(meta or {}))


def fit_partition(endpoints, m: int, seed: int = 0, max_iter: int = 100) -> RegionPartition:
    labels, _ = constrained_kmeans(endpoints, m, seed, max_iter)
    return build_region_partition(endpoints, labels, m, meta={"seed": seed, "max_iter": max_iter, "num_points": len(labels)})


def _fan_assign(pts: np.ndarray, m: int, params: dict) -> np.ndarray:
    if m == 1:
        return np.zeros(len(pts), dtype=np.int64)
    origin = np.asarray(params.get("origin", (0.0, 0.0)), dtype=np.float64)
    width = 2 * math.pi / m
    rel = pts - origin
    # angle measured counter-clockwise from +y; sector 0 is centred on +y
    ang = np.arctan2(rel[:, 1], rel[:, 0]) - math.pi / 2
    ratio = np.mod(ang + width / 2, 2 * math.pi) / width
    nearest = np.round(ratio)
    on_edge = np.abs(ratio - nearest) < TIE_TOL
    idx = np.floor(ratio).astype(np.int64)
    # an edge between sectors k-1 and k belongs to k-1; the wrap edge to 0
    edge_idx = np.where((nearest == 0) | (nearest == m), 0, nearest - 1).astype(np.int64)
    idx = np.where(on_edge, edge_idx, idx)
    return np.clip(idx, 0, m - 1)


def manual_fan_partition(m: int, origin=(0.0, 0.0), radius: float = 20.0) -> RegionPartition:
    """Equal-angle sectors around ``origin``; ``radius`` only places the
    plotting centroids and hull wedges."""
    if m < 1:
        raise ConfigError("region count M must be at least 1")
    width = 2 * math.pi / m
    ox, oy = origin
    centroids, hulls = [], []
    for i in range(m):
        centre = math.pi / 2 + i * width
        centroids.append((ox + radius * math.cos(centre), oy + radius * math.sin(centre)))
        if m == 1:
            hulls.append(np.array([(ox - radius, oy - radius), (ox + radius, oy - radius), (ox + radius, oy + radius), (ox - radius, oy + radius)]))
            continue
        arc = np.linspace(centre - width / 2, centre + width / 2, 8)
        wedge = [(ox, oy)] + [(ox + 2 * radius * math.cos(a), oy + 2 * radius * math.sin(a)) for a in arc]
        hulls.append(np.array(wedge))
    params = {"origin": [float(ox), float(oy)], "sector_width": width, "sector0_center": math.pi / 2}
    return RegionPartition("fan", m, np.array(centroids), hulls, params)


def assign_region(endpoint, partition: RegionPartition) -> int:
    return int(partition.assign(np.asarray(endpoint, dtype=np.float64).reshape(1, 2))[0])


@dataclass(frozen=True)
class ProposalRegionMap:
    K: int
    M: int

    @property
    def N(self) -> int:
        return self.K // self.M

    @property
    def assignment(self) -> np.ndarray:
        return np.arange(self.K) // self.N

    def proposals_of(self, region: int) -> np.ndarray:
        return np.arange(region * self.N, (region + 1) * self.N)


def map_proposals_to_regions(k: int, m: int) -> ProposalRegionMap:
    if m < 1 or k < 1 or k % m:
        raise ConfigError(f"K={k} proposals cannot be split evenly over M={m} regions")
    return ProposalRegionMap(k, m)
