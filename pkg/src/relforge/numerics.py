"""Dense float64 layers with hand-written backward passes.

Every layer here is a pair of functions: ``*_forward`` returns the output
and a cache, ``*_backward`` consumes the cache and an upstream gradient.
Inputs may carry any number of leading batch axes; the trailing axis is
the feature axis.  Weight matrices are stored ``(out, in)``.
"""

import struct
import threading

import numpy as np

DTYPE = np.float64


class DimensionError(ValueError):
    pass


class GradCheckError(FloatingPointError):
    pass


def sigmoid(z):
    # tanh form never overflows
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def softplus(z):
    return np.logaddexp(0.0, z)


def relu_forward(x):
    return np.maximum(x, 0.0)


def relu_backward(y, dy):
    return dy * (y > 0)


def affine_forward(x, W, b):
    """y = x W^T + b over the trailing axis of ``x``."""
    x = np.asarray(x, dtype=DTYPE)
    if W.ndim != 2 or b.shape != (W.shape[0],):
        raise DimensionError(f"affine: W{W.shape} and b{b.shape} disagree")
    if x.shape[-1] != W.shape[1]:
        raise DimensionError(f"affine: x{x.shape} does not match W{W.shape}")
    return x @ W.T + b, x


def affine_backward(cache, W, dy):
    x = cache
    x2 = x.reshape(-1, x.shape[-1])
    dy2 = dy.reshape(-1, dy.shape[-1])
    dW = dy2.T @ x2
    db = dy2.sum(axis=0)
    dx = dy @ W
    return dx, dW, db


def lstm_forward(x, h_prev, c_prev, W, b):
    """Single standard LSTM cell.

    ``W`` has shape ``(4H, I + H)`` with gate blocks ordered input, forget,
    output, candidate.  Returns ``(h, c, cache)``.
    """
    H = h_prev.shape[-1]
    if W.shape[0] != 4 * H or b.shape != (4 * H,):
        raise DimensionError(f"lstm: W{W.shape} inconsistent with hidden size {H}")
    if W.shape[1] != x.shape[-1] + H:
        raise DimensionError(f"lstm: W{W.shape} does not take x{x.shape} + h{h_prev.shape}")
    if c_prev.shape != h_prev.shape:
        raise DimensionError(f"lstm: h{h_prev.shape} and c{c_prev.shape} disagree")
    xh = np.concatenate([x, h_prev], axis=-1)
    z = xh @ W.T + b
    s = sigmoid(z[..., :3 * H])
    i, f, o = s[..., :H], s[..., H:2 * H], s[..., 2 * H:]
    g = np.tanh(z[..., 3 * H:])
    c = f * c_prev + i * g
    tc = np.tanh(c)
    h = o * tc
    return h, c, (xh, c_prev, i, f, o, g, tc)


def lstm_backward(cache, W, dh, dc):
    """Returns ``(dx, dh_prev, dc_prev, dW, db)``."""
    xh, c_prev, i, f, o, g, tc = cache
    H = i.shape[-1]
    dc = dc + dh * o * (1.0 - tc * tc)
    dz = np.concatenate([
        dc * g * i * (1.0 - i),
        dc * c_prev * f * (1.0 - f),
        dh * tc * o * (1.0 - o),
        dc * i * (1.0 - g * g),
    ], axis=-1)
    dz2 = dz.reshape(-1, 4 * H)
    dW = dz2.T @ xh.reshape(-1, xh.shape[-1])
    db = dz2.sum(axis=0)
    dxh = dz @ W
    I = xh.shape[-1] - H
    return dxh[..., :I], dxh[..., I:], dc * f, dW, db


def log_softmax(z):
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def class_log_prob(logits, label):
    """log softmax(logits)[label], accurate when that probability is near 1."""
    z = np.asarray(logits, dtype=DTYPE)
    d = np.delete(z, label) - z[label]
    top = d.max()
    if top > 0:
        return float(-(top + np.log(np.exp(-top) + np.exp(d - top).sum())))
    return float(-np.log1p(np.exp(d).sum()))


def softmax_xent(logits, label):
    """Cross-entropy of one logit vector against an integer label.

    Returns ``(loss, probs)``; the gradient w.r.t. the logits is
    ``probs - onehot(label)``.
    """
    logits = np.asarray(logits, dtype=DTYPE)
    K = logits.shape[-1]
    if K < 2:
        raise DimensionError("softmax_xent needs at least two classes")
    if not 0 <= label < K:
        raise IndexError(f"label {label} out of range for {K} classes")
    logp = log_softmax(logits)
    return float(-logp[label]), np.exp(logp)


def conv3x3_forward(x, W, b):
    """'same'-padded 3x3 convolution of an ``(H, W, C)`` map.

    ``W`` is ``(out, 9 * C)`` over patches flattened offset-major.
    """
    Hh, Ww, C = x.shape
    if W.shape[1] != 9 * C:
        raise DimensionError(f"conv3x3: W{W.shape} does not take {C} channels")
    xp = np.pad(x, ((1, 1), (1, 1), (0, 0)))
    patches = np.concatenate(
        [xp[a:a + Hh, c:c + Ww] for a in range(3) for c in range(3)], axis=-1)
    y, _ = affine_forward(patches, W, b)
    return y, (patches, x.shape)


def conv3x3_backward(cache, W, dy):
    patches, (Hh, Ww, C) = cache
    dpatch, dW, db = affine_backward(patches, W, dy)
    dxp = np.zeros((Hh + 2, Ww + 2, C))
    k = 0
    for a in range(3):
        for c in range(3):
            dxp[a:a + Hh, c:c + Ww] += dpatch[..., k * C:(k + 1) * C]
            k += 1
    return dxp[1:-1, 1:-1], dW, db


def glorot(rng, out_dim, in_dim):
    lim = np.sqrt(6.0 / (in_dim + out_dim))
    return rng.uniform(-lim, lim, size=(out_dim, in_dim))


def lstm_init(rng, in_dim, hidden, forget_bias=1.0):
    W = glorot(rng, 4 * hidden, in_dim + hidden)
    b = np.zeros(4 * hidden)
    b[hidden:2 * hidden] = forget_bias
    return W, b


class ParamStore:
    """Named float64 parameters with gradient slots and optimizer state.

    Writes go through :meth:`apply` under a lock so that concurrent
    workers never observe a half-applied update.
    """

    def __init__(self, params=None):
        self.params = {}
        self.grads = {}
        self.state = {}
        self.step_count = 0
        self.lock = threading.Lock()
        for name, value in (params or {}).items():
            self.add(name, value)

    def add(self, name, value):
        if name in self.params:
            raise KeyError(f"duplicate parameter name {name!r}")
        self.params[name] = np.array(value, dtype=DTYPE)
        self.grads[name] = None

    def __getitem__(self, name):
        return self.params[name]

    def __contains__(self, name):
        return name in self.params

    def names(self):
        return list(self.params)

    def snapshot(self):
        with self.lock:
            return {k: v.copy() for k, v in self.params.items()}

    def load(self, params):
        with self.lock:
            for k, v in params.items():
                if k not in self.params:
                    raise KeyError(f"unknown parameter {k!r}")
                if v.shape != self.params[k].shape:
                    raise DimensionError(f"{k}: shape {v.shape} != {self.params[k].shape}")
                self.params[k] = np.array(v, dtype=DTYPE)

    def zero_grad(self):
        for k in self.grads:
            self.grads[k] = None

    def accumulate(self, grads):
        for k, g in grads.items():
            if k not in self.params:
                raise KeyError(f"gradient for unknown parameter {k!r}")
            if g.shape != self.params[k].shape:
                raise DimensionError(f"{k}: gradient {g.shape} != {self.params[k].shape}")
            self.grads[k] = g.copy() if self.grads[k] is None else self.grads[k] + g

    def step(self, kind="adam", lr=1e-3, weight_decay=0.0, *, beta1=0.9, beta2=0.999,
             alpha=0.99, eps=1e-8):
        """One optimizer update with decoupled weight decay; zeroes gradients."""
        missing = [k for k, g in self.grads.items() if g is None]
        if missing:
            raise ValueError(f"no gradient for parameter {missing[0]!r}")
        self.step_count += 1
        t = self.step_count
        for k, p in self.params.items():
            g = self.grads[k]
            st = self.state.setdefault(k, {})
            if kind == "adam":
                m = st.setdefault("m", np.zeros_like(p))
                v = st.setdefault("v", np.zeros_like(p))
                m *= beta1
                m += (1 - beta1) * g
                v *= beta2
                v += (1 - beta2) * g * g
                mhat = m / (1 - beta1 ** t)
                vhat = v / (1 - beta2 ** t)
                update = mhat / (np.sqrt(vhat) + eps)
            elif kind == "rmsprop":
                v = st.setdefault("v", np.zeros_like(p))
                v *= alpha
                v += (1 - alpha) * g * g
                update = g / (np.sqrt(v) + eps)
            else:
                raise ValueError(f"unknown optimizer {kind!r}")
            if weight_decay:
                p -= lr * weight_decay * p
            p -= lr * update
        self.zero_grad()

    def apply(self, grads, kind="adam", lr=1e-3, weight_decay=0.0, max_norm=None):
        """Atomically accumulate ``grads`` and take one optimizer step."""
        with self.lock:
            if max_norm is not None:
                grads = clip_by_global_norm(grads, max_norm)
            self.zero_grad()
            self.accumulate(grads)
            for k in self.params:
                if self.grads[k] is None:
                    self.grads[k] = np.zeros_like(self.params[k])
            self.step(kind, lr, weight_decay)


def clip_by_global_norm(grads, max_norm):
    total = np.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if total <= max_norm or total == 0.0:
        return grads
    return {k: g * (max_norm / total) for k, g in grads.items()}


def grad_check(f, params, eps=1e-5, max_entries=None, rng=None, floor=1e-6):
    """Worst relative error between analytic and central-difference gradients.

    ``f(params)`` must return ``(value, grads)`` with ``grads`` keyed like
    ``params``.  The relative error of an entry is
    ``|a - n| / max(|a|, |n|, floor)``; the floor keeps entries whose true
    gradient is at rounding level from dominating.  With ``max_entries`` set,
    at most that many entries per tensor are probed.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    value, grads = f(params)
    if not np.isfinite(value):
        raise GradCheckError(f"objective is not finite ({value})")
    worst = 0.0
    for name, p in params.items():
        g = grads[name]
        if not np.all(np.isfinite(g)):
            raise GradCheckError(f"analytic gradient of {name!r} is not finite")
        flat = p.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = rng.choice(flat.size, size=max_entries, replace=False)
        for k in idx:
            orig = flat[k]
            flat[k] = orig + eps
            fp = f(params)[0]
            flat[k] = orig - eps
            fm = f(params)[0]
            flat[k] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise GradCheckError(f"objective not finite while perturbing {name!r}[{k}]")
            num = (fp - fm) / (2 * eps)
            ana = g.reshape(-1)[k]
            err = abs(ana - num) / max(abs(ana), abs(num), floor)
            worst = max(worst, err)
    return worst


MAGIC = b"RELFORGE1"
FORMAT_VERSION = 1


def save_checkpoint(path, params):
    """Write ``{name: array}`` in the versioned little-endian binary format."""
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", FORMAT_VERSION, len(params)))
        for name in sorted(params):
            arr = np.asarray(params[name], dtype="<f8")
            raw = name.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            fh.write(arr.tobytes())


def load_checkpoint(path):
    with open(path, "rb") as fh:
        data = fh.read()
    if not data.startswith(MAGIC):
        raise ValueError(f"{path}: not a checkpoint (bad magic)")
    off = len(MAGIC)
    version, count = struct.unpack_from("<II", data, off)
    off += 8
    if version != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    out = {}
    for _ in range(count):
        (n,) = struct.unpack_from("<I", data, off)
        off += 4
        name = data[off:off + n].decode("utf-8")
        off += n
        (rank,) = struct.unpack_from("<I", data, off)
        off += 4
        shape = struct.unpack_from(f"<{rank}Q", data, off)
        off += 8 * rank
        size = int(np.prod(shape)) if rank else 1
        out[name] = np.frombuffer(data, dtype="<f8", count=size, offset=off).reshape(shape).astype(DTYPE)
        off += 8 * size
    return out
