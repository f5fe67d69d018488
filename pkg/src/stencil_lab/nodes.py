"""Candidate node clouds and randomized stencil sampling.

The candidate cloud comes from an advancing-front Poisson-disc fill: every
accepted node spawns a ring of candidates at distance ``h`` and a candidate
survives if no existing node is closer than ``h``. Stencils are then drawn
from the cloud around a random central node, favouring nearer neighbours.
"""
from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

DUPLICATE_TOL = 1e-12
FRONT_CANDIDATES = 15


class InvalidDomainError(ValueError):
    pass


class InsufficientCandidatesError(ValueError):
    pass


class ZeroRadiusError(ValueError):
    pass


@dataclass(frozen=True)
class Rectangle:
    xmin: float = 0.0
    ymin: float = 0.0
    xmax: float = 1.0
    ymax: float = 1.0

    @property
    def width(self) -> float:
        return self.xmax - self.xmin

    @property
    def height(self) -> float:
        return self.ymax - self.ymin

    @property
    def area(self) -> float:
        return self.width * self.height

    def contains(self, x: float, y: float) -> bool:
        return self.xmin <= x <= self.xmax and self.ymin <= y <= self.ymax


UNIT_SQUARE = Rectangle()


@dataclass(frozen=True, eq=False)
class NodeCloud:
    points: np.ndarray
    spacing_h: float
    domain: Rectangle
    tree: cKDTree = field(repr=False, compare=False)

    def __len__(self) -> int:
        return len(self.points)


@dataclass(frozen=True, eq=False)
class StencilSample:
    nodes: np.ndarray
    center_index: int = 0

    @property
    def size(self) -> int:
        return len(self.nodes)


@dataclass(frozen=True, eq=False)
class Stencil:
    """Centred, unit-radius stencil; ``coords[0]`` is the central node."""
    coords: np.ndarray

    @property
    def size_s(self) -> int:
        return len(self.coords)


@dataclass(frozen=True)
class GenConfig:
    seed: int = 0
    spacing_h: float = 0.02
    stencil_size_s: int = 15
    candidate_pool_m: int | None = None
    decay_beta: float = 1.0
    domain: Rectangle = UNIT_SQUARE

    def __post_init__(self):
        if self.stencil_size_s < 1:
            raise ValueError("stencil size must be at least 1")
        if self.decay_beta < 0:
            raise ValueError("decay_beta must be non-negative")
        if self.pool_m < self.stencil_size_s:
            raise ValueError("candidate pool must hold at least stencil_size_s nodes")

    @property
    def pool_m(self) -> int:
        if self.candidate_pool_m is None:
            return 3 * self.stencil_size_s
        return self.candidate_pool_m


def fill_nodes(domain: Rectangle, spacing_h: float, seed: int) -> NodeCloud:
    """Advancing-front Poisson-disc fill of ``domain`` with spacing ``spacing_h``."""
    if not (domain.width > 0 and domain.height > 0):
        raise InvalidDomainError(f"domain {domain} has no area")
    if not spacing_h > 0:
        raise InvalidDomainError("spacing must be positive")
    if spacing_h >= min(domain.width, domain.height):
        raise InvalidDomainError(
            f"spacing {spacing_h} does not fit in domain {domain.width} x {domain.height}")

    rng = np.random.default_rng(seed)
    h = float(spacing_h)
    h2 = h * h
    # one node per cell at most, since the cell diagonal is below h
    cell = h / math.sqrt(2.0)
    nx = int(math.ceil(domain.width / cell)) + 1
    ny = int(math.ceil(domain.height / cell)) + 1
    grid = np.full((nx, ny), -1, dtype=np.int64)
    xs: list[float] = []
    ys: list[float] = []

    def insert(x: float, y: float) -> None:
        i = int((x - domain.xmin) / cell)
        j = int((y - domain.ymin) / cell)
        grid[i, j] = len(xs)
        xs.append(x)
        ys.append(y)

    def free(x: float, y: float) -> bool:
        i = int((x - domain.xmin) / cell)
        j = int((y - domain.ymin) / cell)
        for a in range(max(i - 2, 0), min(i + 3, nx)):
            for b in range(max(j - 2, 0), min(j + 3, ny)):
                k = grid[a, b]
                if k >= 0 and (xs[k] - x) ** 2 + (ys[k] - y) ** 2 < h2:
                    return False
        return True

    x0 = domain.xmin + rng.random() * domain.width
    y0 = domain.ymin + rng.random() * domain.height
    insert(x0, y0)
    front = deque([0])
    angles = 2.0 * math.pi * np.arange(FRONT_CANDIDATES) / FRONT_CANDIDATES
    while front:
        k = front.popleft()
        px, py = xs[k], ys[k]
        offset = rng.random() * 2.0 * math.pi
        for a in angles:
            cx = px + h * math.cos(a + offset)
            cy = py + h * math.sin(a + offset)
            if domain.contains(cx, cy) and free(cx, cy):
                insert(cx, cy)
                front.append(len(xs) - 1)

    points = np.column_stack([np.array(xs), np.array(ys)])
    return NodeCloud(points, h, domain, cKDTree(points))


def sample_stencil(cloud: NodeCloud, config: GenConfig,
                   rng: np.random.Generator) -> StencilSample:
    """Draw one stencil: a uniform central node plus ``s - 1`` neighbours.

    Neighbours come from the ``pool_m`` nearest nodes (the centre included in
    the count), without replacement, with weight ``(1 + r/h) ** -beta``.
    """
    s, m = config.stencil_size_s, config.pool_m
    if len(cloud) < m:
        raise InsufficientCandidatesError(
            f"cloud has {len(cloud)} nodes, candidate pool needs {m}")
    c = int(rng.integers(len(cloud)))
    dist, idx = cloud.tree.query(cloud.points[c], k=m)
    dist = np.atleast_1d(dist)
    idx = np.atleast_1d(idx)
    keep = idx != c
    dist, idx = dist[keep][: m - 1], idx[keep][: m - 1]
    if s == 1:
        chosen = np.empty(0, dtype=np.intp)
    else:
        w = (1.0 + dist / cloud.spacing_h) ** (-config.decay_beta)
        chosen = rng.choice(len(idx), size=s - 1, replace=False, p=w / w.sum())
    nodes = np.vstack([cloud.points[c][None, :], cloud.points[idx[chosen]]])
    return StencilSample(nodes, 0)


def recenter_variants(sample: StencilSample) -> list[StencilSample]:
    """The same node set once centred on each of its nodes."""
    return [StencilSample(sample.nodes, k) for k in range(sample.size)]


def normalize(sample: StencilSample | Stencil) -> Stencil:
    """Move the central node to the origin and scale the farthest node to radius 1."""
    if isinstance(sample, Stencil):
        nodes, center = sample.coords, 0
    else:
        nodes, center = sample.nodes, sample.center_index
    nodes = np.asarray(nodes, dtype=np.float64)
    order = [center] + [i for i in range(len(nodes)) if i != center]
    rel = nodes[order] - nodes[center]
    radius = np.sqrt((rel ** 2).sum(axis=1)).max()
    if not radius > 0:
        raise ZeroRadiusError("all stencil nodes coincide with the central node")
    coords = rel / radius
    coords[0] = 0.0
    return Stencil(coords)


def has_duplicates(coords: np.ndarray, scale: float = 1.0) -> bool:
    pts = np.asarray(coords, dtype=np.float64)
    d = np.sqrt(((pts[:, None, :] - pts[None, :, :]) ** 2).sum(axis=-1))
    np.fill_diagonal(d, np.inf)
    return bool((d < DUPLICATE_TOL * scale).any())
