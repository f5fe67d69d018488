"""Vanilla PointNet stencil classifier in plain NumPy.

Architecture: a shared per-point stack (affine -> batch norm -> ReLU, the
equivalent of kernel-size-1 Conv1D), a feature-wise max over the points, a
dense head (affine -> batch norm -> ReLU -> dropout) and a softmax output.
There are no input or feature transform sub-networks.
"""
from __future__ import annotations

import hashlib
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, replace
from typing import Callable

import numpy as np

from .labeling import Dataset, Quartile, pad_stencil

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"STENCIL-POINTNET-CHECKPOINT"
CHECKPOINT_VERSION = 1
PROB_FLOOR = 1e-12


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    input_size: int = 15
    point_widths: tuple[int, ...] = (128, 128, 128, 256, 2048)
    dense_widths: tuple[int, ...] = (1024, 512)
    num_classes: int = 4
    dropout_rate: float = 0.3
    bn_momentum: float = 0.99
    bn_epsilon: float = 1e-3

    def __post_init__(self):
        object.__setattr__(self, "point_widths", tuple(int(w) for w in self.point_widths))
        object.__setattr__(self, "dense_widths", tuple(int(w) for w in self.dense_widths))
        if self.input_size < 1 or self.num_classes < 2:
            raise ValueError("input_size must be positive and num_classes at least 2")
        if not self.point_widths or min(self.point_widths + self.dense_widths) < 1:
            raise ValueError("layer widths must be positive")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must lie in [0, 1)")


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 1024
    epochs: int = 20
    test_fraction: float = 0.2
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_epsilon: float = 1e-7
    seed: int = 0
    dtype: str = "float32"
    # re-estimate normalization statistics on the training split after every epoch
    recalibrate_stats: bool = True

    def __post_init__(self):
        if self.batch_size < 1 or self.epochs < 1:
            raise ValueError("batch_size and epochs must be positive")
        if not 0.0 < self.test_fraction < 1.0:
            raise ValueError("test_fraction must lie in (0, 1)")


@dataclass(frozen=True)
class EpochStats:
    epoch: int
    train_loss: float
    train_acc: float
    test_loss: float
    test_acc: float


def _layer_names(config: ModelConfig) -> list[tuple[str, int, int, bool]]:
    """``(prefix, fan_in, fan_out, normalized)`` per affine layer."""
    layers = []
    fan_in = 2
    for i, w in enumerate(config.point_widths):
        layers.append((f"point{i}", fan_in, w, True))
        fan_in = w
    for i, w in enumerate(config.dense_widths):
        layers.append((f"dense{i}", fan_in, w, True))
        fan_in = w
    layers.append(("out", fan_in, config.num_classes, False))
    return layers


def param_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    shapes = {}
    for name, fan_in, fan_out, norm in _layer_names(config):
        shapes[f"{name}.weight"] = (fan_in, fan_out)
        shapes[f"{name}.bias"] = (fan_out,)
        if norm:
            for stat in ("gamma", "beta", "running_mean", "running_var"):
                shapes[f"{name}.{stat}"] = (fan_out,)
    return shapes


def is_trainable(name: str) -> bool:
    return not name.endswith(("running_mean", "running_var"))


def canonical_points(x: np.ndarray) -> np.ndarray:
    """Sort each point set and replace repeated points by its smallest point.

    The max-pooled features only depend on the set of distinct points, so
    this leaves the network function untouched. It makes the array fed to
    the shared layers identical for any ordering or duplicate padding of the
    same set, which is what makes those invariances hold bit for bit: BLAS
    results for a row can depend on where that row sits in the matrix.
    """
    x = x + 0.0  # folds -0.0 into +0.0
    order = np.lexsort((x[..., 1], x[..., 0]), axis=-1)
    xs = np.take_along_axis(x, order[..., None], axis=1)
    dup = np.zeros(xs.shape[:2], dtype=bool)
    dup[:, 1:] = np.all(xs[:, 1:] == xs[:, :-1], axis=-1)
    if not dup.any():
        return xs
    xs = np.where(dup[..., None], xs[:, :1, :], xs)
    order = np.lexsort((xs[..., 1], xs[..., 0]), axis=-1)
    return np.take_along_axis(xs, order[..., None], axis=1)


class PointNet:
    """Parameters plus forward and backward passes.

    ``params`` maps names (see :func:`param_shapes`) to arrays in the compute
    dtype. Running normalization statistics live there too but are never
    touched by the optimizer.
    """

    def __init__(self, config: ModelConfig, params: dict[str, np.ndarray], dtype="float32"):
        self.config = config
        self.dtype = np.dtype(dtype)
        shapes = param_shapes(config)
        if set(params) != set(shapes):
            missing = sorted(set(shapes) - set(params))
            extra = sorted(set(params) - set(shapes))
            raise CheckpointError(f"parameter names differ (missing {missing}, extra {extra})")
        self.params = {}
        for name, shape in shapes.items():
            arr = np.asarray(params[name])
            if arr.shape != shape:
                raise CheckpointError(f"{name}: shape {arr.shape}, expected {shape}")
            self.params[name] = np.array(arr, dtype=self.dtype)

    @classmethod
    def init(cls, config: ModelConfig, seed: int, dtype="float32") -> "PointNet":
        """He-uniform weights (LeCun-uniform on the output layer), zero biases."""
        rng = np.random.default_rng(seed)
        params = {}
        for name, fan_in, fan_out, norm in _layer_names(config):
            limit = math.sqrt((6.0 if norm else 3.0) / fan_in)
            params[f"{name}.weight"] = rng.uniform(-limit, limit, size=(fan_in, fan_out))
            params[f"{name}.bias"] = np.zeros(fan_out)
            if norm:
                params[f"{name}.gamma"] = np.ones(fan_out)
                params[f"{name}.beta"] = np.zeros(fan_out)
                params[f"{name}.running_mean"] = np.zeros(fan_out)
                params[f"{name}.running_var"] = np.ones(fan_out)
        return cls(config, params, dtype)

    @property
    def layers(self):
        return _layer_names(self.config)

    def forward(self, coords, mode: str = "infer", rng: np.random.Generator | None = None,
                *, batch_stats: bool | None = None, dropout: bool | None = None,
                update_stats: bool | None = None, keep_cache: bool = False,
                momentum: float | None = None):
        """Class probabilities for a batch of padded stencils ``(B, N, 2)``.

        ``mode="train"`` normalizes with batch statistics, applies dropout
        and updates the running statistics; ``mode="infer"`` does none of
        that. The keyword flags override single aspects of the mode. With
        ``keep_cache`` the return value is ``(probs, cache)`` for
        :meth:`backward`. ``momentum`` overrides the configured running
        statistics momentum for this call.
        """
        if mode not in ("train", "infer"):
            raise ValueError(f"unknown mode {mode!r}")
        train = mode == "train"
        batch_stats = train if batch_stats is None else batch_stats
        dropout = train if dropout is None else dropout
        update_stats = train if update_stats is None else update_stats
        if dropout and self.config.dropout_rate > 0 and rng is None:
            raise ValueError("dropout needs a random generator")

        x = np.asarray(coords)
        if x.ndim == 2:
            x = x[None]
        n = self.config.input_size
        if x.ndim != 3 or x.shape[1:] != (n, 2):
            raise ValueError(f"expected input of shape (B, {n}, 2), got {np.shape(coords)}")
        if not batch_stats:
            x = canonical_points(x)
        x = x.astype(self.dtype, copy=False)
        b = x.shape[0]
        p = self.params
        cfg = self.config
        layers = self.layers
        n_point = len(cfg.point_widths)
        cache = {"batch_stats": batch_stats, "layers": {}}

        h = x.reshape(b * n, 2)
        for i, (name, _, _, _) in enumerate(layers[:-1]):
            h_in = h
            z = h_in @ p[f"{name}.weight"]
            if batch_stats:
                # the bias cancels against the batch mean, so it only enters the running mean
                mu = z.mean(axis=0)
                z -= mu
                var = np.mean(z * z, axis=0)
                if update_stats:
                    m = cfg.bn_momentum if momentum is None else momentum
                    rm, rv = p[f"{name}.running_mean"], p[f"{name}.running_var"]
                    rm *= m
                    rm += (1 - m) * (mu + p[f"{name}.bias"])
                    rv *= m
                    rv += (1 - m) * var
            else:
                z += p[f"{name}.bias"] - p[f"{name}.running_mean"]
                var = p[f"{name}.running_var"]
            inv = (1.0 / np.sqrt(var + cfg.bn_epsilon)).astype(self.dtype)
            z *= inv
            xhat = z
            h = xhat * p[f"{name}.gamma"]
            h += p[f"{name}.beta"]
            np.maximum(h, 0, out=h)
            entry = {"h_in": h_in, "xhat": xhat, "inv": inv}
            if i == n_point - 1:
                h3 = h.reshape(b, n, -1)
                pooled = h3.max(axis=1)
                arg = np.zeros(pooled.shape, dtype=np.intp)
                for k in range(n - 1, -1, -1):
                    arg[h3[:, k, :] == pooled] = k  # lowest index wins ties
                h = pooled
                entry.update(argmax=arg, active=pooled > 0)
            else:
                entry["active"] = h > 0
                if dropout and i >= n_point and cfg.dropout_rate > 0:
                    keep = 1.0 - cfg.dropout_rate
                    mask = (rng.random(h.shape, dtype=self.dtype) < keep).astype(self.dtype)
                    mask /= self.dtype.type(keep)
                    h *= mask
                    entry["drop"] = mask
            if keep_cache:
                cache["layers"][name] = entry

        logits = h @ p["out.weight"]
        logits += p["out.bias"]
        logits -= logits.max(axis=1, keepdims=True)
        e = np.exp(logits)
        probs = e / e.sum(axis=1, keepdims=True)
        if keep_cache:
            cache["out_in"] = h
            cache["probs"] = probs
            return probs, cache
        return probs

    def backward(self, cache, labels) -> dict[str, np.ndarray]:
        """Gradients of the mean cross-entropy for the batch in ``cache``.

        Max-pooling sends each feature's gradient to the first point that
        attains the maximum. With batch statistics the normalization
        gradients include the terms through the batch mean and variance,
        and the pre-normalization biases get zero gradient since they cancel.
        """
        labels = np.asarray(labels)
        probs = cache["probs"]
        b = probs.shape[0]
        rows = np.arange(b)
        d = probs.copy()
        d[rows, labels] -= 1
        d[probs[rows, labels] < PROB_FLOOR] = 0  # flat region of the clamped loss
        d /= b
        return self._backward_from_logits(cache, d)

    def _backward_from_logits(self, cache, dlogits) -> dict[str, np.ndarray]:
        p = self.params
        grads: dict[str, np.ndarray] = {}
        n_point = len(self.config.point_widths)
        layers = self.layers
        batch_stats = cache["batch_stats"]

        grads["out.weight"] = cache["out_in"].T @ dlogits
        grads["out.bias"] = dlogits.sum(axis=0)
        dh = dlogits @ p["out.weight"].T

        for i in range(len(layers) - 2, -1, -1):
            name = layers[i][0]
            c = cache["layers"][name]
            xhat = c["xhat"]
            scale = p[f"{name}.gamma"] * c["inv"]
            if "drop" in c:
                dh = dh * c["drop"]
            dy = np.where(c["active"], dh, 0).astype(dh.dtype, copy=False)

            if i == n_point - 1:
                # dy lives on the pooled (argmax) entries only
                arg = c["argmax"][:, None, :]
                xhat3 = xhat.reshape(c["argmax"].shape[0], -1, xhat.shape[-1])
                xhat_at = np.take_along_axis(xhat3, arg, axis=1)[:, 0, :]
                dgamma = np.sum(dy * xhat_at, axis=0)
                dbeta = dy.sum(axis=0)
                if batch_stats:
                    m = xhat.shape[0]
                    dz = xhat * (-scale * dgamma / m)
                    dz -= scale * dbeta / m
                else:
                    dz = np.zeros_like(xhat)
                dz3 = dz.reshape(xhat3.shape)
                at = np.take_along_axis(dz3, arg, axis=1)
                np.put_along_axis(dz3, arg, at + (scale * dy)[:, None, :], axis=1)
            else:
                dgamma = np.sum(dy * xhat, axis=0)
                dbeta = dy.sum(axis=0)
                if batch_stats:
                    m = dy.shape[0]
                    dz = dy
                    dz -= dbeta / m
                    dz -= xhat * (dgamma / m)
                    dz *= scale
                else:
                    dz = dy * scale
            grads[f"{name}.gamma"] = dgamma
            grads[f"{name}.beta"] = dbeta
            grads[f"{name}.weight"] = c["h_in"].T @ dz
            grads[f"{name}.bias"] = np.zeros_like(dbeta) if batch_stats else dz.sum(axis=0)
            if i > 0:
                dh = dz @ p[f"{name}.weight"].T
        return grads

    def trainable(self) -> list[str]:
        return [k for k in self.params if is_trainable(k)]


def cross_entropy(probs, labels) -> float:
    """Mean sparse categorical cross-entropy, probabilities clamped at 1e-12."""
    probs = np.atleast_2d(probs)
    labels = np.atleast_1d(np.asarray(labels))
    picked = probs[np.arange(len(labels)), labels].astype(np.float64)
    return float(np.mean(-np.log(np.maximum(picked, PROB_FLOOR))))


class Adam:
    """Adam with bias correction; state kept per parameter name."""

    def __init__(self, learning_rate=1e-3, beta1=0.9, beta2=0.999, epsilon=1e-7):
        self.learning_rate = learning_rate
        self.beta1 = beta1
        self.beta2 = beta2
        self.epsilon = epsilon
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for name, g in grads.items():
            if name not in self.m:
                self.m[name] = np.zeros_like(params[name])
                self.v[name] = np.zeros_like(params[name])
            m, v = self.m[name], self.v[name]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * (g * g)
            step = (m / c1) / (np.sqrt(v / c2) + self.epsilon)
            params[name] -= (self.learning_rate * step).astype(params[name].dtype, copy=False)


def stratified_split(labels, sizes, test_fraction: float, seed: int):
    """Seeded test/train split keeping the per-(size, class) proportions."""
    labels = np.asarray(labels)
    sizes = np.asarray(sizes)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5B11]))
    test = []
    for s in np.unique(sizes):
        for q in np.unique(labels):
            idx = np.flatnonzero((sizes == s) & (labels == q))
            if len(idx) == 0:
                continue
            idx = rng.permutation(idx)
            test.append(idx[: int(round(test_fraction * len(idx)))])
    test_idx = np.sort(np.concatenate(test)) if test else np.empty(0, dtype=np.intp)
    train_mask = np.ones(len(labels), dtype=bool)
    train_mask[test_idx] = False
    return np.flatnonzero(train_mask), test_idx


def recalibrate_statistics(model: PointNet, coords, batch_size: int = 1024) -> None:
    """Replace the running normalization statistics by their average over ``coords``.

    The exponential average kept during training trails the weights by
    roughly ``1 / (1 - momentum)`` steps, which is most of a run when an
    epoch is only a few batches long.
    """
    coords = np.asarray(coords)
    seen = 0
    for i in range(0, len(coords), batch_size):
        batch = coords[i:i + batch_size]
        m = seen / (seen + len(batch))
        model.forward(batch, "infer", batch_stats=True, update_stats=True, momentum=m)
        seen += len(batch)


def predict_proba(model: PointNet, coords, batch_size: int = 1024) -> np.ndarray:
    """Inference-mode probabilities for padded stencils ``(B, N, 2)``."""
    coords = np.asarray(coords)
    out = [model.forward(coords[i:i + batch_size], "infer")
           for i in range(0, len(coords), batch_size)]
    if not out:
        return np.empty((0, model.config.num_classes))
    return np.concatenate(out)


def predict(model: PointNet, stencil, max_size: int | None = None):
    """``(quartile, probabilities)`` for one normalized stencil."""
    n = model.config.input_size
    if max_size is not None and max_size != n:
        raise ValueError(f"model expects {n} points, got max_size {max_size}")
    coords = np.asarray(getattr(stencil, "coords", stencil), dtype=np.float64)
    if len(coords) > n:
        raise ValueError(f"stencil of {len(coords)} nodes exceeds model input size {n}")
    probs = model.forward(pad_stencil(coords, n)[None], "infer")[0].astype(np.float64)
    return Quartile(int(np.argmax(probs))), probs


def _evaluate_split(model: PointNet, x, y, batch_size: int):
    if len(x) == 0:
        return float("nan"), float("nan")
    probs = predict_proba(model, x, batch_size)
    return cross_entropy(probs, y), float(np.mean(np.argmax(probs, axis=1) == y))


def train(dataset: Dataset, model_config: ModelConfig | None = None,
          train_config: TrainConfig | None = None,
          on_epoch: Callable[[EpochStats], None] | None = None):
    """Train a classifier on ``dataset``.

    Returns ``(model, history, (train_idx, test_idx))``. The input size is
    taken from the dataset's largest stencil.
    """
    if len(dataset) == 0:
        raise ValueError("cannot train on an empty dataset")
    tc = train_config or TrainConfig()
    mc = replace(model_config or ModelConfig(), input_size=dataset.max_size)
    x, y, _, sizes = dataset.arrays(mc.input_size)
    train_idx, test_idx = stratified_split(y, sizes, tc.test_fraction, tc.seed)
    if len(train_idx) == 0:
        raise ValueError("training split is empty")

    model = PointNet.init(mc, tc.seed, tc.dtype)
    opt = Adam(tc.learning_rate, tc.beta1, tc.beta2, tc.adam_epsilon)
    rng = np.random.default_rng(np.random.SeedSequence([tc.seed, 0xE90C]))
    x = x.astype(model.dtype)
    history: list[EpochStats] = []

    for epoch in range(1, tc.epochs + 1):
        t0 = time.perf_counter()
        order = rng.permutation(train_idx)
        loss_sum = 0.0
        correct = 0
        for start in range(0, len(order), tc.batch_size):
            batch = order[start:start + tc.batch_size]
            probs, cache = model.forward(x[batch], "train", rng, keep_cache=True)
            loss_sum += cross_entropy(probs, y[batch]) * len(batch)
            correct += int(np.sum(np.argmax(probs, axis=1) == y[batch]))
            grads = model.backward(cache, y[batch])
            del cache
            opt.step(model.params, grads)
        if tc.recalibrate_stats:
            recalibrate_statistics(model, x[train_idx], tc.batch_size)
        test_loss, test_acc = _evaluate_split(model, x[test_idx], y[test_idx], tc.batch_size)
        stats = EpochStats(epoch, loss_sum / len(order), correct / len(order), test_loss, test_acc)
        history.append(stats)
        log.info("epoch %d: loss %.4f acc %.4f test_loss %.4f test_acc %.4f (%.1fs)",
                 epoch, stats.train_loss, stats.train_acc, test_loss, test_acc,
                 time.perf_counter() - t0)
        if on_epoch is not None:
            on_epoch(stats)
    return model, history, (train_idx, test_idx)


# persistence ----------------------------------------------------------------

def history_csv(history: list[EpochStats]) -> str:
    lines = ["epoch,train_loss,train_acc,test_loss,test_acc"]
    for h in history:
        lines.append(",".join([str(h.epoch)] + [format(v, ".17g") for v in
                                                (h.train_loss, h.train_acc, h.test_loss, h.test_acc)]))
    return "\n".join(lines) + "\n"


def dataset_fingerprint(text: str) -> str:
    return hashlib.sha256(text.encode("ascii")).hexdigest()


def config_to_dict(config) -> dict:
    d = asdict(config)
    return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}


def save_checkpoint(path, model: PointNet, manifest: dict) -> None:
    manifest = dict(manifest)
    manifest["model_config"] = config_to_dict(model.config)
    manifest["compute_dtype"] = model.dtype.name
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC + b" %d\n" % CHECKPOINT_VERSION)
        fh.write(json.dumps(manifest, sort_keys=True).encode("utf-8") + b"\n")
        for name in param_shapes(model.config):
            arr = np.ascontiguousarray(model.params[name], dtype="<f8")
            shape = "x".join(str(d) for d in arr.shape)
            fh.write(f"{name} {shape}\n".encode("ascii"))
            fh.write(arr.tobytes())
        fh.write(b"END\n")


def load_checkpoint(path, dtype: str | None = None) -> tuple[PointNet, dict]:
    with open(path, "rb") as fh:
        head = fh.readline().rstrip(b"\n").split(b" ")
        if len(head) != 2 or head[0] != CHECKPOINT_MAGIC:
            raise CheckpointError(f"{path} is not a stencil classifier checkpoint")
        if head[1] != str(CHECKPOINT_VERSION).encode():
            raise CheckpointError(f"unsupported checkpoint version {head[1].decode()!r}")
        try:
            manifest = json.loads(fh.readline())
        except json.JSONDecodeError as exc:
            raise CheckpointError(f"bad checkpoint manifest: {exc.msg}") from None
        cfg_dict = manifest.get("model_config")
        if not isinstance(cfg_dict, dict):
            raise CheckpointError("checkpoint manifest lacks a model configuration")
        config = ModelConfig(**cfg_dict)
        shapes = param_shapes(config)
        params = {}
        while True:
            line = fh.readline()
            if not line:
                raise CheckpointError("checkpoint truncated before END marker")
            if line == b"END\n":
                break
            try:
                name, shape_txt = line.decode("ascii").split()
                shape = tuple(int(v) for v in shape_txt.split("x")) if shape_txt else ()
            except ValueError:
                raise CheckpointError(f"bad array header {line!r}") from None
            if name not in shapes:
                raise CheckpointError(f"unexpected array {name!r}")
            if shape != shapes[name]:
                raise CheckpointError(f"{name}: stored shape {shape}, config implies {shapes[name]}")
            count = math.prod(shape)
            raw = fh.read(8 * count)
            if len(raw) != 8 * count:
                raise CheckpointError(f"{name}: truncated array data")
            params[name] = np.frombuffer(raw, dtype="<f8").reshape(shape)
    model = PointNet(config, params, dtype or manifest.get("compute_dtype", "float32"))
    return model, manifest
