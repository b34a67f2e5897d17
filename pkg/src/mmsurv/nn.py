"""Feed-forward networks, losses, training loop and the model container.

Parameters are float32 during training and in model files; ``grad_check``
works on a float64 copy. Weights are stored ``(fan_in, fan_out)`` so a
layer computes ``x @ W + b``.
"""
from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .errors import DimMismatch, ModelFormatError, NonFiniteLoss

EPS = 1e-7
ACTIVATIONS = ("relu", "sigmoid", "identity")
MODEL_SCHEMA = "mmsurv-model-v1"


def sigmoid(z):
    # split by sign to avoid overflow in exp
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _act(name, z):
    if name == "relu":
        return np.maximum(z, 0)
    if name == "sigmoid":
        return sigmoid(z)
    return z


def _act_grad(name, z, a, g):
    if name == "relu":
        return g * (z > 0)
    if name == "sigmoid":
        return g * a * (1 - a)
    return g


class FeedForwardModel:
    """Stack of affine layers each followed by an activation."""

    def __init__(self, weights, biases, activations):
        if not (len(weights) == len(biases) == len(activations)) or not weights:
            raise ValueError("weights, biases and activations must be equally long and non-empty")
        for a in activations:
            if a not in ACTIVATIONS:
                raise ValueError(f"unknown activation {a!r}")
        for i, (w, b) in enumerate(zip(weights, biases)):
            if w.ndim != 2 or b.shape != (w.shape[1],):
                raise ValueError(f"layer {i}: bad parameter shapes {w.shape}, {b.shape}")
            if i and weights[i - 1].shape[1] != w.shape[0]:
                raise ValueError(f"layer {i}: input dim {w.shape[0]} does not chain")
        self.weights = list(weights)
        self.biases = list(biases)
        self.activations = list(activations)

    @classmethod
    def init(cls, dims, activations, rng, dtype=np.float32):
        """Uniform fan-in init, U(-1/sqrt(fan_in), 1/sqrt(fan_in))."""
        if isinstance(activations, str):
            activations = [activations]
        if len(activations) == 1 and len(dims) > 2:
            activations = list(activations) * (len(dims) - 1)
        ws, bs = [], []
        for fan_in, fan_out in zip(dims[:-1], dims[1:]):
            lim = 1.0 / np.sqrt(fan_in)
            ws.append(rng.uniform(-lim, lim, size=(fan_in, fan_out)).astype(dtype))
            bs.append(rng.uniform(-lim, lim, size=fan_out).astype(dtype))
        return cls(ws, bs, activations)

    @classmethod
    def mlp(cls, in_dim, hidden, out_dim, rng, hidden_act="relu", out_act="sigmoid"):
        dims = [in_dim, *hidden, out_dim]
        acts = [hidden_act] * len(hidden) + [out_act]
        return cls.init(dims, acts, rng)

    @property
    def input_dim(self):
        return self.weights[0].shape[0]

    @property
    def output_dim(self):
        return self.weights[-1].shape[1]

    @property
    def dims(self):
        return [self.input_dim] + [w.shape[1] for w in self.weights]

    @property
    def dtype(self):
        return self.weights[0].dtype

    def params(self):
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def n_params(self):
        return sum(p.size for p in self.params())

    def copy(self):
        return FeedForwardModel([w.copy() for w in self.weights],
                                [b.copy() for b in self.biases], list(self.activations))

    def astype(self, dtype):
        return FeedForwardModel([w.astype(dtype) for w in self.weights],
                                [b.astype(dtype) for b in self.biases], list(self.activations))

    def load_params(self, values):
        for p, v in zip(self.params(), values):
            p[...] = v

    def _check(self, x):
        x = np.asarray(x, dtype=self.dtype)
        if x.shape[-1] != self.input_dim:
            raise DimMismatch(f"model expects input dim {self.input_dim}, got {x.shape[-1]}")
        return x

    def forward(self, x):
        x = self._check(x)
        single = x.ndim == 1
        a = x[None, :] if single else x
        for w, b, act in zip(self.weights, self.biases, self.activations):
            a = _act(act, a @ w + b)
        return a[0] if single else a

    __call__ = forward

    def forward_cache(self, x):
        a = self._check(x)
        cache = [a]
        for w, b, act in zip(self.weights, self.biases, self.activations):
            z = a @ w + b
            a = _act(act, z)
            cache.append((z, a))
        return a, cache

    def backward(self, cache, grad_out, need_input_grad=False):
        """Returns (grad wrt input or None, grads aligned with params())."""
        grads = [None] * (2 * len(self.weights))
        g = grad_out
        for i in range(len(self.weights) - 1, -1, -1):
            z, a = cache[i + 1]
            g = _act_grad(self.activations[i], z, a, g)
            prev = cache[0] if i == 0 else cache[i][1]
            grads[2 * i] = prev.T @ g
            grads[2 * i + 1] = g.sum(axis=0)
            if i or need_input_grad:
                g = g @ self.weights[i].T
        return (g if need_input_grad else None), grads

    def to_spec(self):
        return {"dims": self.dims, "activations": list(self.activations)}


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------

def weighted_bce(p, y, w0=1.0, w1=1.0):
    """-(w1*y*ln p + w0*(1-y)*ln(1-p)) with p clamped to [EPS, 1-EPS]; elementwise."""
    p = np.clip(np.asarray(p, dtype=np.float64), EPS, 1 - EPS)
    y = np.asarray(y, dtype=np.float64)
    out = -(w1 * y * np.log(p) + w0 * (1 - y) * np.log1p(-p))
    return float(out) if out.ndim == 0 else out


def weighted_bce_grad(p, y, w0=1.0, w1=1.0):
    """d weighted_bce / dp; zero where the clamp is active."""
    inside = (p > EPS) & (p < 1 - EPS)
    pc = np.clip(p, EPS, 1 - EPS)
    g = -w1 * y / pc + w0 * (1 - y) / (1 - pc)
    return np.where(inside, g, 0.0).astype(p.dtype)


def mse(out, target):
    """Mean over dims of the squared error, per row."""
    d = out - target
    return np.mean(d * d, axis=-1)


def mse_grad(out, target):
    return 2.0 * (out - target) / out.shape[-1]


LOSSES = ("weighted_bce", "mse")


def class_weights_from_labels(labels, oversample_factor=1):
    """Inverse class frequency, normalised to mean 1 over the two classes; (w0, w1).

    Frequencies are those of the oversampled training stream, so that the
    two corrections are not compounded.
    """
    labels = np.asarray(labels)
    n1 = int(np.sum(labels == 1))
    n0 = int(np.sum(labels == 0))
    if n0 == 0 or n1 == 0:
        return 1.0, 1.0
    minority = minority_class(labels)
    if minority == 0:
        n0 *= max(int(oversample_factor), 1)
    elif minority == 1:
        n1 *= max(int(oversample_factor), 1)
    inv = np.array([1.0 / n0, 1.0 / n1])
    inv /= inv.mean()
    return float(inv[0]), float(inv[1])


# ---------------------------------------------------------------------------
# Optimisers
# ---------------------------------------------------------------------------

class Adam:
    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.lr, self.b1, self.b2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, grads):
        self.t += 1
        c1 = 1 - self.b1 ** self.t
        c2 = 1 - self.b2 ** self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            g = g.astype(p.dtype, copy=False)
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            p -= (self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.dtype)


class SGD:
    def __init__(self, params, lr=1e-2):
        self.params = params
        self.lr = lr

    def step(self, grads):
        for p, g in zip(self.params, grads):
            p -= (self.lr * g).astype(p.dtype)


def make_optimizer(name, params, lr):
    if name == "adam":
        return Adam(params, lr)
    if name == "sgd":
        return SGD(params, lr)
    raise ValueError(f"unknown optimizer {name!r}")


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

@dataclass
class TrainConfig:
    epochs: int = 200
    batch_size: int = 32
    learning_rate: float = 1e-3
    optimizer: str = "adam"
    oversample_factor: int = 1
    class_weights: tuple | None = None  # (w0, w1); None -> inverse frequency
    noise_sigma: float = 0.0
    seed: int = 0
    patience: int = 20
    val_fraction: float = 0.1

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1 or self.learning_rate <= 0:
            raise ValueError("epochs, batch_size and learning_rate must be positive")
        if self.oversample_factor < 1:
            raise ValueError("oversample_factor must be >= 1")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be non-negative")
        if self.class_weights is not None:
            self.class_weights = tuple(float(w) for w in self.class_weights)
            if len(self.class_weights) != 2 or min(self.class_weights) <= 0:
                raise ValueError("class_weights must be two positive reals")

    def replace(self, **kw):
        d = self.to_dict()
        d.update({k: v for k, v in kw.items() if v is not None})
        return TrainConfig.from_dict(d)

    def to_dict(self):
        d = asdict(self)
        if d["class_weights"] is not None:
            d["class_weights"] = list(d["class_weights"])
        return d

    @classmethod
    def from_dict(cls, d):
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown TrainConfig fields: {sorted(unknown)}")
        return cls(**d)


def oversample_indices(labels, factor, minority=None):
    """Every index once, plus (factor-1) extra copies of each minority index."""
    labels = np.asarray(labels)
    idx = np.arange(len(labels))
    if factor <= 1:
        return idx
    if minority is None:
        minority = minority_class(labels)
    if minority is None:
        return idx
    extra = np.flatnonzero(labels == minority)
    return np.concatenate([idx] + [extra] * (factor - 1))


def minority_class(labels):
    labels = np.asarray(labels)
    n1 = int(np.sum(labels == 1))
    n0 = int(np.sum(labels == 0))
    if n0 == n1:
        return None
    return 0 if n0 < n1 else 1


@dataclass
class History:
    train_loss: list = field(default_factory=list)
    val_loss: list = field(default_factory=list)
    best_epoch: int = -1
    epochs_run: int = 0

    def to_dict(self):
        return asdict(self)


def fit(params, labels, batch_step, cfg, rng, val_loss=None):
    """Generic mini-batch loop shared by every trainer.

    ``batch_step(batch_indices) -> (loss, grads)`` evaluates one mini-batch
    (and draws its own augmentation noise). ``val_loss()`` is evaluated once
    per epoch for early stopping; the best parameters are restored at the end.
    """
    opt = make_optimizer(cfg.optimizer, params, cfg.learning_rate)
    hist = History()
    best = None
    best_val = np.inf
    stale = 0
    for epoch in range(cfg.epochs):
        order = oversample_indices(labels, cfg.oversample_factor)
        order = order[rng.permutation(len(order))]
        total, count = 0.0, 0
        for b, start in enumerate(range(0, len(order), cfg.batch_size)):
            batch = order[start:start + cfg.batch_size]
            loss, grads = batch_step(batch)
            if not np.isfinite(loss) or not all(np.all(np.isfinite(g)) for g in grads):
                raise NonFiniteLoss(b, epoch)
            opt.step(grads)
            total += loss * len(batch)
            count += len(batch)
        hist.train_loss.append(total / count)
        hist.epochs_run = epoch + 1
        if val_loss is not None:
            v = float(val_loss())
            hist.val_loss.append(v)
            if v < best_val - 1e-12:
                best_val = v
                best = [p.copy() for p in params]
                hist.best_epoch = epoch
                stale = 0
            else:
                stale += 1
                if stale >= cfg.patience:
                    break
    if best is not None:
        for p, v in zip(params, best):
            p[...] = v
    else:
        hist.best_epoch = hist.epochs_run - 1
    return hist


def validation_split(labels, cfg, rng_seed):
    """Seeded stratified 10% carve-out; None when a class is too small."""
    from .evaluation import stratified_split
    from .errors import DegenerateClass

    labels = np.asarray(labels)
    if cfg.val_fraction <= 0 or cfg.patience <= 0 or len(labels) < 10:
        return None
    try:
        is_val = stratified_split(labels, cfg.val_fraction, rng_seed)
    except DegenerateClass:
        return None
    if is_val.all() or not is_val.any():
        return None
    return is_val


def _loss_and_output_grad(loss, out, target, weights):
    if loss == "weighted_bce":
        p = out[:, 0]
        y = target.astype(out.dtype)
        w0, w1 = weights
        vals = weighted_bce(p, y, w0, w1)
        g = weighted_bce_grad(p, y, w0, w1)[:, None] / len(p)
        return float(np.mean(vals)), g
    if loss == "mse":
        vals = mse(out, target)
        return float(np.mean(vals)), mse_grad(out, target) / len(out)
    raise ValueError(f"unknown loss {loss!r}")


def train(model, dataset, loss, cfg, labels=None):
    """Train ``model`` in place on ``dataset = (X, targets)``.

    For ``weighted_bce`` targets are 0/1 labels. ``labels`` (defaults to the
    targets for BCE) drive oversampling and the stratified validation carve.
    Returns ``(model, History)``.
    """
    X, T = dataset
    X = np.asarray(X, dtype=model.dtype)
    T = np.asarray(T)
    if len(X) == 0:
        raise ValueError("dataset must be non-empty")
    if loss == "weighted_bce":
        T = T.reshape(-1)
        if labels is None:
            labels = T
        if model.output_dim != 1:
            raise DimMismatch("weighted_bce needs a single output unit")
    else:
        T = T.astype(model.dtype)
        if T.shape != (len(X), model.output_dim):
            raise DimMismatch(f"targets must be (n, {model.output_dim})")
        if labels is None:
            labels = np.zeros(len(X), dtype=int)
    labels = np.asarray(labels)
    rng = np.random.default_rng(cfg.seed)
    is_val = validation_split(labels, cfg, cfg.seed)
    if is_val is None:
        tr = np.arange(len(X))
        val_fn = None
    else:
        tr = np.flatnonzero(~is_val)
        va = np.flatnonzero(is_val)
    weights = cfg.class_weights or class_weights_from_labels(labels[tr], cfg.oversample_factor)
    Xtr, Ttr, Ltr = X[tr], T[tr], labels[tr]

    if is_val is not None:
        def val_fn():
            return _loss_and_output_grad(loss, model.forward(X[va]), T[va], weights)[0]

    def step(batch):
        xb = Xtr[batch]
        if cfg.noise_sigma > 0:
            xb = xb + rng.normal(0.0, cfg.noise_sigma, size=xb.shape).astype(xb.dtype)
        out, cache = model.forward_cache(xb)
        value, g = _loss_and_output_grad(loss, out, Ttr[batch], weights)
        _, grads = model.backward(cache, g.astype(out.dtype))
        return value, grads

    hist = fit(model.params(), Ltr, step, cfg, rng, val_fn)
    return model, hist


# ---------------------------------------------------------------------------
# Gradient check
# ---------------------------------------------------------------------------

def loss_value(model, loss, x, target, weights=(1.0, 1.0)):
    out = model.forward(np.atleast_2d(x))
    t = np.atleast_1d(target) if loss == "weighted_bce" else np.atleast_2d(target)
    return _loss_and_output_grad(loss, out, t, weights)[0]


def analytic_grads(model, loss, x, target, weights=(1.0, 1.0)):
    x = np.atleast_2d(x)
    t = np.atleast_1d(target) if loss == "weighted_bce" else np.atleast_2d(target)
    out, cache = model.forward_cache(x)
    _, g = _loss_and_output_grad(loss, out, t, weights)
    _, grads = model.backward(cache, g)
    return grads


def grad_check(model, loss, sample, step=1e-5, weights=(1.0, 1.0)):
    """Max relative error between backprop and central differences over every parameter."""
    m = model.astype(np.float64)
    x, target = sample
    x = np.asarray(x, dtype=np.float64)
    grads = analytic_grads(m, loss, x, target, weights)
    worst = 0.0
    for p, g in zip(m.params(), grads):
        flat = p.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            up = loss_value(m, loss, x, target, weights)
            flat[i] = orig - step
            down = loss_value(m, loss, x, target, weights)
            flat[i] = orig
            num = (up - down) / (2 * step)
            err = abs(num - gflat[i]) / max(abs(num) + abs(gflat[i]), 1e-6)
            worst = max(worst, err)
    return worst


# ---------------------------------------------------------------------------
# Model container
# ---------------------------------------------------------------------------

CONTAINER_MAGIC = b"MMNN\x01"


def save_container(path, models=None, arrays=None, meta=None, kind="model"):
    """Write named networks + raw arrays + JSON metadata into one file.

    Layout: magic, u32 LE header length, UTF-8 JSON header (sorted keys),
    then every array as float32 little-endian in header order.
    """
    models = models or {}
    arrays = arrays or {}
    entries, blobs = [], []
    for name in sorted(models):
        for i, p in enumerate(models[name].params()):
            entries.append({"name": f"{name}/{i}", "shape": list(p.shape)})
            blobs.append(np.ascontiguousarray(p, dtype="<f4").tobytes())
    for name in sorted(arrays):
        a = np.asarray(arrays[name])
        entries.append({"name": f"@{name}", "shape": list(a.shape)})
        blobs.append(np.ascontiguousarray(a, dtype="<f4").tobytes())
    header = {
        "schema": MODEL_SCHEMA,
        "kind": kind,
        "models": {n: models[n].to_spec() for n in sorted(models)},
        "arrays": entries,
        "meta": meta or {},
    }
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(CONTAINER_MAGIC + struct.pack("<I", len(hbytes)) + hbytes + b"".join(blobs))


def load_container(path, kind=None):
    """Returns (models, arrays, meta); raises ModelFormatError naming the file."""
    path = Path(path)
    try:
        buf = path.read_bytes()
    except OSError as e:
        raise ModelFormatError(f"{path}: cannot read model file ({e})") from None
    try:
        if buf[:5] != CONTAINER_MAGIC:
            raise ValueError("bad magic")
        (hlen,) = struct.unpack_from("<I", buf, 5)
        header = json.loads(buf[9:9 + hlen].decode("utf-8"))
        if header.get("schema") != MODEL_SCHEMA:
            raise ValueError(f"schema {header.get('schema')!r} != {MODEL_SCHEMA}")
        if kind is not None and header["kind"] != kind:
            raise ValueError(f"expected a {kind!r} model, found {header['kind']!r}")
        pos = 9 + hlen
        raw = {}
        for e in header["arrays"]:
            n = int(np.prod(e["shape"], dtype=np.int64))
            if pos + 4 * n > len(buf):
                raise ValueError(f"payload truncated at {e['name']}")
            raw[e["name"]] = np.frombuffer(buf, "<f4", n, pos).astype(np.float32).reshape(e["shape"])
            pos += 4 * n
        if pos != len(buf):
            raise ValueError("trailing bytes after payload")
        models = {}
        for name, spec in header["models"].items():
            nl = len(spec["activations"])
            ps = [raw[f"{name}/{i}"] for i in range(2 * nl)]
            m = FeedForwardModel(ps[0::2], ps[1::2], spec["activations"])
            if m.dims != spec["dims"]:
                raise ValueError(f"{name}: dims do not match header")
            models[name] = m
        arrays = {k[1:]: v for k, v in raw.items() if k.startswith("@")}
    except (ValueError, KeyError, struct.error, UnicodeDecodeError) as e:
        raise ModelFormatError(f"{path}: corrupted model file ({e})") from None
    for m in models.values():
        for p in m.params():
            if not np.all(np.isfinite(p)):
                raise ModelFormatError(f"{path}: non-finite parameters")
    return models, arrays, header["meta"]

