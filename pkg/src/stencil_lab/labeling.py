"""Stencil error labels, quartile classes, padding and the dataset file format."""
from __future__ import annotations

import enum
import io
import json
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import fields as fields_mod
from .linalg import COND_LIMIT, ConditioningError
from .nodes import (GenConfig, NodeCloud, Rectangle, Stencil, fill_nodes, has_duplicates,
                    normalize, recenter_variants, sample_stencil)
from .rbf import OPERATORS, solve_weights_many

FORMAT_NAME = "stencil-dataset"
FORMAT_VERSION = 1
GROUPS_PER_CHUNK = 32


class Quartile(enum.IntEnum):
    Q1 = 0
    Q2 = 1
    Q3 = 2
    Q4 = 3


class InsufficientDataError(ValueError):
    pass


class MissingBordersError(KeyError):
    pass


class DatasetFormatError(ValueError):
    def __init__(self, message: str, line: int | None = None):
        super().__init__(f"line {line}: {message}" if line is not None else message)
        self.line = line


@dataclass(eq=False)
class LabeledStencil:
    stencil: Stencil
    epsilon: float
    quartile: Quartile | None = None

    @property
    def size_s(self) -> int:
        return self.stencil.size_s


@dataclass
class Dataset:
    records: list[LabeledStencil]
    borders: dict[int, tuple[float, float, float]]
    metadata: dict = field(default_factory=dict)

    @property
    def max_size(self) -> int:
        return max(r.size_s for r in self.records)

    @property
    def sizes(self) -> list[int]:
        return sorted({r.size_s for r in self.records})

    def __len__(self) -> int:
        return len(self.records)

    def arrays(self, max_size: int | None = None):
        """``(coords, labels, epsilons, sizes)`` with coords padded to ``max_size``."""
        n = max_size or self.max_size
        coords = np.stack([pad_stencil(r.stencil, n) for r in self.records])
        labels = np.array([int(r.quartile) for r in self.records], dtype=np.int64)
        eps = np.array([r.epsilon for r in self.records])
        sizes = np.array([r.size_s for r in self.records], dtype=np.int64)
        return coords, labels, eps, sizes

    def subset(self, index) -> "Dataset":
        return Dataset([self.records[i] for i in index], self.borders, self.metadata)


def error_measures(coords, fields=fields_mod.DEFAULT_FIELDS) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized :func:`error_measure` for a stack ``(B, s, 2)``.

    Returns ``(epsilon, cond)``; rows with ``cond`` past the limit are not
    meaningful and must be discarded by the caller.
    """
    pts = np.asarray(coords, dtype=np.float64)
    weights, cond = solve_weights_many(pts, OPERATORS)
    center = pts[:, 0, :]
    eps = np.zeros(len(pts))
    for f in fields:
        u = f.value(pts)
        gx, gy = f.gradient(center)
        exact = (gx, gy, f.laplacian(center))
        for k in range(len(OPERATORS)):
            eps += np.abs((weights[:, k, :] * u).sum(axis=-1) - exact[k])
    return eps, cond


def error_measure(stencil, fields=fields_mod.DEFAULT_FIELDS) -> float:
    """Sum of absolute errors of d/dx, d/dy and the Laplacian over the test fields."""
    coords = np.asarray(getattr(stencil, "coords", stencil), dtype=np.float64)
    eps, cond = error_measures(coords[None], fields)
    if not cond[0] <= COND_LIMIT:
        raise ConditioningError(
            f"stencil system is numerically singular (pivot ratio {cond[0]:.3e})", cond[0])
    return float(eps[0])


def compute_borders(epsilons, size_s: int | None = None) -> tuple[float, float, float]:
    """Cuts at the quartiles: cut ``k`` is the sorted value at ``ceil(k N / 4) - 1``."""
    e = np.sort(np.asarray(epsilons, dtype=np.float64))
    n = len(e)
    if n < 4:
        what = f" for size {size_s}" if size_s is not None else ""
        raise InsufficientDataError(f"need at least 4 labels to form quartiles{what}, got {n}")
    return tuple(float(e[math.ceil(k * n / 4) - 1]) for k in (1, 2, 3))


def rank_classes(epsilons) -> np.ndarray:
    """Balanced quartile classes by rank; ties keep input order.

    Agrees with :func:`assign_class` on the borders from
    :func:`compute_borders` whenever the cut values are not tied.
    """
    e = np.asarray(epsilons, dtype=np.float64)
    n = len(e)
    order = np.argsort(e, kind="stable")
    ranks = np.empty(n, dtype=np.int64)
    ranks[order] = np.arange(n)
    limits = np.array([math.ceil(k * n / 4) for k in (1, 2, 3)])
    return np.searchsorted(limits, ranks, side="right")


def assign_class(epsilon: float, size_s: int, borders) -> Quartile:
    try:
        b1, b2, b3 = borders[size_s]
    except KeyError:
        raise MissingBordersError(f"no quartile borders for stencil size {size_s}") from None
    if epsilon <= b1:
        return Quartile.Q1
    if epsilon <= b2:
        return Quartile.Q2
    if epsilon <= b3:
        return Quartile.Q3
    return Quartile.Q4


def pad_stencil(stencil, target_size: int) -> np.ndarray:
    """Append copies of the central node until there are ``target_size`` points."""
    coords = np.asarray(getattr(stencil, "coords", stencil), dtype=np.float64)
    s = len(coords)
    if target_size < s:
        raise ValueError(f"cannot pad a stencil of {s} nodes down to {target_size}")
    if target_size == s:
        return coords.copy()
    return np.vstack([coords, np.repeat(coords[:1], target_size - s, axis=0)])


# generation -----------------------------------------------------------------

def _group_rng(seed: int, size_s: int, group: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, size_s, group]))


def _label_groups(cloud: NodeCloud, config: GenConfig, groups: range):
    """Sample, recentre, normalize and label stencil groups ``groups``.

    Returns ``(coords, epsilons)`` for the variants that survived the
    conditioning check, in group order.
    """
    s = config.stencil_size_s
    stencils = []
    for g in groups:
        sample = sample_stencil(cloud, config, _group_rng(config.seed, s, g))
        if has_duplicates(sample.nodes, cloud.spacing_h):
            continue
        stencils.extend(normalize(v).coords for v in recenter_variants(sample))
    if not stencils:
        return np.empty((0, s, 2)), np.empty(0)
    coords = np.stack(stencils)
    eps, cond = error_measures(coords)
    ok = (cond <= COND_LIMIT) & np.isfinite(eps)
    return coords[ok], eps[ok]


_worker_cloud: NodeCloud | None = None


def _init_worker(domain: Rectangle, spacing_h: float, seed: int) -> None:
    global _worker_cloud
    _worker_cloud = fill_nodes(domain, spacing_h, seed)


def _worker_label(config: GenConfig, start: int, stop: int):
    return _label_groups(_worker_cloud, config, range(start, stop))


def default_workers() -> int:
    env = os.environ.get("STENCIL_LAB_WORKERS")
    if env:
        return max(1, int(env))
    return os.cpu_count() or 1


def _labeled_for_size(cloud: NodeCloud, config: GenConfig, count: int, workers: int,
                      pool: ProcessPoolExecutor | None):
    coords, eps = [], []
    have = 0
    start = 0
    while have < count:
        chunks = [(start + i * GROUPS_PER_CHUNK, start + (i + 1) * GROUPS_PER_CHUNK)
                  for i in range(max(workers, 1))]
        start = chunks[-1][1]
        if pool is None:
            results = [_label_groups(cloud, config, range(a, b)) for a, b in chunks]
        else:
            results = list(pool.map(_worker_label, [config] * len(chunks),
                                    [a for a, _ in chunks], [b for _, b in chunks]))
        for c, e in results:
            coords.append(c)
            eps.append(e)
            have += len(e)
    return np.concatenate(coords)[:count], np.concatenate(eps)[:count]


def build_dataset(gen: GenConfig, sizes, count_per_size: int, workers: int = 1) -> Dataset:
    """Generate ``count_per_size`` labelled stencils for every size in ``sizes``."""
    sizes = [int(s) for s in sizes]
    if not sizes:
        raise ValueError("no stencil sizes requested")
    if len(set(sizes)) != len(sizes):
        raise ValueError(f"duplicate stencil sizes in {sizes}")
    if count_per_size < 4:
        raise InsufficientDataError(
            f"need at least 4 stencils per size to form quartiles, got {count_per_size}")
    for s in sizes:
        if s < 6:
            raise ValueError(f"stencil size {s} is below the 6 augmentation monomials")

    cloud = fill_nodes(gen.domain, gen.spacing_h, gen.seed)
    pool = None
    if workers > 1:
        pool = ProcessPoolExecutor(workers, initializer=_init_worker,
                                   initargs=(gen.domain, gen.spacing_h, gen.seed))
    records: list[LabeledStencil] = []
    borders: dict[int, tuple[float, float, float]] = {}
    try:
        for s in sizes:
            pool_m = gen.candidate_pool_m
            config = replace(gen, stencil_size_s=s,
                             candidate_pool_m=None if pool_m is None else max(pool_m, s))
            coords, eps = _labeled_for_size(cloud, config, count_per_size, workers, pool)
            borders[s] = compute_borders(eps, s)
            classes = rank_classes(eps)
            records.extend(LabeledStencil(Stencil(c), float(e), Quartile(int(q)))
                           for c, e, q in zip(coords, eps, classes))
    finally:
        if pool is not None:
            pool.shutdown()

    meta = {
        "seed": gen.seed,
        "sizes": sizes,
        "count_per_size": count_per_size,
        "generation": {
            "spacing_h": gen.spacing_h,
            "decay_beta": gen.decay_beta,
            "candidate_pool_m": gen.candidate_pool_m if gen.candidate_pool_m else "3s",
            "domain": asdict(gen.domain),
            "variants": "every node used as centre",
        },
        "fields": fields_mod.describe(),
        "field_coordinates": "normalized",
        "epsilon_reduction": "sum |dx err| + |dy err| + |laplacian err| over fields",
        "padding": "copies of central node",
    }
    return Dataset(records, borders, meta)


# file format ----------------------------------------------------------------

def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def dumps_dataset(dataset: Dataset) -> str:
    header = dict(dataset.metadata)
    header["format"] = FORMAT_NAME
    header["version"] = FORMAT_VERSION
    header["records"] = len(dataset)
    header["borders"] = {str(s): [float(b) for b in cuts]
                         for s, cuts in sorted(dataset.borders.items())}
    out = io.StringIO()
    out.write(json.dumps(header, sort_keys=True))
    out.write("\n")
    for r in dataset.records:
        parts = [str(r.size_s)]
        parts.extend(_fmt(v) for v in r.stencil.coords.ravel())
        parts.append(_fmt(r.epsilon))
        parts.append("" if r.quartile is None else str(int(r.quartile) + 1))
        out.write(",".join(parts))
        out.write("\n")
    return out.getvalue()


def write_dataset(dataset: Dataset, path) -> None:
    Path(path).write_text(dumps_dataset(dataset), encoding="ascii")


def loads_dataset(text: str) -> Dataset:
    lines = text.splitlines()
    if not lines:
        raise DatasetFormatError("empty dataset file", 1)
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise DatasetFormatError(f"bad metadata header ({exc.msg})", 1) from None
    if not isinstance(header, dict) or header.get("format") != FORMAT_NAME:
        raise DatasetFormatError("not a stencil dataset", 1)
    if header.get("version") != FORMAT_VERSION:
        raise DatasetFormatError(f"unsupported dataset version {header.get('version')!r}", 1)
    borders = {int(s): tuple(float(b) for b in cuts)
               for s, cuts in header.get("borders", {}).items()}

    records = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        parts = line.split(",")
        try:
            s = int(parts[0])
            if s < 1 or len(parts) != 2 * s + 3:
                raise ValueError(f"expected {2 * s + 3} fields for size {s}, got {len(parts)}")
            coords = np.array([float(v) for v in parts[1:2 * s + 1]]).reshape(s, 2)
            eps = float(parts[2 * s + 1])
            q = parts[2 * s + 2].strip()
            quartile = Quartile(int(q) - 1) if q else None
        except ValueError as exc:
            raise DatasetFormatError(str(exc), lineno) from None
        if not np.all(np.isfinite(coords)) or not (math.isfinite(eps) and eps >= 0):
            raise DatasetFormatError("non-finite coordinate or negative epsilon", lineno)
        records.append(LabeledStencil(Stencil(coords), eps, quartile))

    expected = header.get("records")
    if expected is not None and expected != len(records):
        raise DatasetFormatError(f"header announces {expected} records, file has {len(records)}")
    meta = {k: v for k, v in header.items()
            if k not in ("format", "version", "records", "borders")}
    return Dataset(records, borders, meta)


def read_dataset(path) -> Dataset:
    return loads_dataset(Path(path).read_text(encoding="ascii"))
