"""Analytic benchmark fields with closed-form gradient and Laplacian."""
from __future__ import annotations

from dataclasses import dataclass, asdict

import numpy as np


def _xy(p):
    p = np.asarray(p, dtype=np.float64)
    return p[..., 0], p[..., 1]


@dataclass(frozen=True)
class Monomial:
    """``x**n * y**m``."""
    n: int = 2
    m: int = 3

    def __post_init__(self):
        if self.n < 0 or self.m < 0 or int(self.n) != self.n or int(self.m) != self.m:
            raise ValueError("monomial exponents must be non-negative integers")

    def value(self, p):
        x, y = _xy(p)
        return x ** self.n * y ** self.m

    def gradient(self, p):
        x, y = _xy(p)
        n, m = self.n, self.m
        gx = n * x ** (n - 1) * y ** m if n > 0 else np.zeros_like(x)
        gy = m * x ** n * y ** (m - 1) if m > 0 else np.zeros_like(y)
        return gx, gy

    def laplacian(self, p):
        x, y = _xy(p)
        n, m = self.n, self.m
        lap = np.zeros_like(x)
        if n > 1:
            lap = lap + n * (n - 1) * x ** (n - 2) * y ** m
        if m > 1:
            lap = lap + m * (m - 1) * x ** n * y ** (m - 2)
        return lap


@dataclass(frozen=True)
class Sinusoidal:
    """``sin(kx * x) * sin(ky * y)``."""
    kx: float = 2.0
    ky: float = 1.0

    def value(self, p):
        x, y = _xy(p)
        return np.sin(self.kx * x) * np.sin(self.ky * y)

    def gradient(self, p):
        x, y = _xy(p)
        return (self.kx * np.cos(self.kx * x) * np.sin(self.ky * y),
                self.ky * np.sin(self.kx * x) * np.cos(self.ky * y))

    def laplacian(self, p):
        return -(self.kx ** 2 + self.ky ** 2) * self.value(p)


@dataclass(frozen=True)
class Exponential:
    """``exp(-(x**2 + y**2) / (2 sigma))``."""
    sigma: float = 1.0

    def __post_init__(self):
        if not self.sigma > 0:
            raise ValueError("sigma must be positive")

    def value(self, p):
        x, y = _xy(p)
        return np.exp(-(x * x + y * y) / (2.0 * self.sigma))

    def gradient(self, p):
        x, y = _xy(p)
        f = self.value(p)
        return -x / self.sigma * f, -y / self.sigma * f

    def laplacian(self, p):
        x, y = _xy(p)
        s = self.sigma
        return ((x * x + y * y) / s ** 2 - 2.0 / s) * self.value(p)


TestField = Monomial | Sinusoidal | Exponential

DEFAULT_FIELDS: tuple[TestField, ...] = (Monomial(), Sinusoidal(), Exponential())


def field_value(field: TestField, p):
    return field.value(p)


def field_gradient(field: TestField, p):
    return field.gradient(p)


def field_laplacian(field: TestField, p):
    return field.laplacian(p)


def describe(fields=DEFAULT_FIELDS) -> list[dict]:
    """JSON-friendly parameter record for dataset metadata."""
    return [{"kind": type(f).__name__.lower(), **asdict(f)} for f in fields]


def from_description(items: list[dict]) -> tuple[TestField, ...]:
    kinds = {"monomial": Monomial, "sinusoidal": Sinusoidal, "exponential": Exponential}
    out = []
    for item in items:
        item = dict(item)
        cls = kinds.get(item.pop("kind", None))
        if cls is None:
            raise ValueError(f"unknown field description {item!r}")
        out.append(cls(**item))
    return tuple(out)
