"""Dense-tensor reverse-mode differentiation engine (NCHW, numpy-backed).

Operations record onto the active Tape (a context manager). backward() walks
the tape in reverse, accumulating gradients into .grad of every reached
tensor. Outside a Tape, ops run forward-only.
"""

import numpy as np

INSTANCE_EPS = 1e-5  # stabilizer under the square root of instance std

_ACTIVE_TAPE = None


class Tape:
    """Ordered record of op outputs; reverse walk drives backpropagation."""

    def __init__(self):
        self.nodes = []

    def __enter__(self):
        global _ACTIVE_TAPE
        self._outer = _ACTIVE_TAPE
        _ACTIVE_TAPE = self
        return self

    def __exit__(self, *exc):
        global _ACTIVE_TAPE
        _ACTIVE_TAPE = self._outer
        return False


class Tensor:
    __slots__ = ("data", "grad", "parents", "backward_fn")

    def __init__(self, data, parents=(), backward_fn=None):
        self.data = np.asarray(data)
        self.grad = None
        self.parents = parents
        self.backward_fn = backward_fn

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype})"


def tensor(data, dtype=np.float32):
    return Tensor(np.asarray(data, dtype=dtype))


def _as_tensor(x, like):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.data.dtype))


def _record(out_data, parents, backward_fn):
    if _ACTIVE_TAPE is None:
        return Tensor(out_data)
    t = Tensor(out_data, parents=tuple(parents), backward_fn=backward_fn)
    _ACTIVE_TAPE.nodes.append(t)
    return t


def _sum_to_shape(g, shape):
    """Reduce a broadcast gradient back to the parent's shape."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, (gs, ss) in enumerate(zip(g.shape, shape)):
        if ss == 1 and gs != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g.reshape(shape)


def backward(tape, loss, params=None):
    """Backpropagate from a scalar loss through all tape nodes.

    Gradients accumulate into .grad. Tensors listed in params get their grad
    initialized to zeros so unreached parameters end with zero gradient.
    """
    if loss.data.size != 1:
        raise ValueError("loss must be scalar")
    for t in tape.nodes:
        t.grad = None
    if params is not None:
        for p in params:
            p.grad = np.zeros_like(p.data)
    loss.grad = np.ones_like(loss.data)
    for node in reversed(tape.nodes):
        if node.grad is None or node.backward_fn is None:
            continue
        for parent, g in zip(node.parents, node.backward_fn(node.grad)):
            if g is None:
                continue
            if parent.grad is None:
                parent.grad = g.astype(parent.data.dtype, copy=True)
            else:
                parent.grad = parent.grad + g.astype(parent.data.dtype)


# ---------------------------------------------------------------------------
# elementwise and reduction primitives

def _pair(a, b):
    if isinstance(a, Tensor):
        return a, _as_tensor(b, a)
    return _as_tensor(a, b), b


def add(a, b):
    a, b = _pair(a, b)
    out = a.data + b.data
    return _record(out, (a, b), lambda g: (_sum_to_shape(g, a.data.shape),
                                           _sum_to_shape(g, b.data.shape)))


def sub(a, b):
    a, b = _pair(a, b)
    out = a.data - b.data
    return _record(out, (a, b), lambda g: (_sum_to_shape(g, a.data.shape),
                                           _sum_to_shape(-g, b.data.shape)))


def mul(a, b):
    a, b = _pair(a, b)
    out = a.data * b.data
    return _record(out, (a, b),
                   lambda g: (_sum_to_shape(g * b.data, a.data.shape),
                              _sum_to_shape(g * a.data, b.data.shape)))


def div(a, b):
    a, b = _pair(a, b)
    out = a.data / b.data
    return _record(out, (a, b),
                   lambda g: (_sum_to_shape(g / b.data, a.data.shape),
                              _sum_to_shape(-g * a.data / (b.data * b.data),
                                            b.data.shape)))


def neg(a):
    return _record(-a.data, (a,), lambda g: (-g,))


def log(a):
    out = np.log(a.data)
    return _record(out, (a,), lambda g: (g / a.data,))


def sqrt(a):
    out = np.sqrt(a.data)
    return _record(out, (a,), lambda g: (g / (2.0 * out),))


def mean(a):
    n = a.data.size
    out = a.data.mean(dtype=a.data.dtype)
    return _record(np.asarray(out), (a,),
                   lambda g: (np.broadcast_to(g / n, a.data.shape).astype(a.data.dtype),))


def spatial_mean(a):
    """Mean over H, W keeping dims; input NCHW."""
    n = a.data.shape[2] * a.data.shape[3]
    out = a.data.mean(axis=(2, 3), keepdims=True)
    return _record(out, (a,),
                   lambda g: (np.broadcast_to(g / n, a.data.shape).astype(a.data.dtype),))


# ---------------------------------------------------------------------------
# activations

def relu(a):
    out = np.maximum(a.data, 0)
    return _record(out, (a,), lambda g: (g * (a.data > 0),))


def leaky_relu(a, alpha=0.2):
    out = np.where(a.data > 0, a.data, alpha * a.data)
    return _record(out, (a,),
                   lambda g: (g * np.where(a.data > 0, 1.0, alpha).astype(a.data.dtype),))


SIGMOID_FLOOR = 1e-6


def sigmoid(a):
    # clamped into the open interval so downstream logarithms stay finite
    x = a.data
    out = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                   np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
    out = np.clip(out, SIGMOID_FLOOR, 1.0 - SIGMOID_FLOOR).astype(a.data.dtype)
    return _record(out, (a,), lambda g: (g * out * (1.0 - out),))


def tanh(a):
    out = np.tanh(a.data)
    return _record(out, (a,), lambda g: (g * (1.0 - out * out),))


ACTIVATIONS = {
    "relu": relu,
    "leaky_relu": leaky_relu,
    "sigmoid": sigmoid,
    "tanh": tanh,
}


def activation(a, kind):
    return ACTIVATIONS[kind](a)


# ---------------------------------------------------------------------------
# convolution / upsampling

def _im2col(xp, kh, kw, stride):
    n, c, h, w = xp.shape
    ho = (h - kh) // stride + 1
    wo = (w - kw) // stride + 1
    cols = np.empty((n, c, kh, kw, ho, wo), xp.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i:i + stride * ho:stride,
                                  j:j + stride * wo:stride]
    return cols.reshape(n, c * kh * kw, ho * wo), ho, wo


def _col2im(dcols, xshape, kh, kw, stride):
    n, c, h, w = xshape
    ho = (h - kh) // stride + 1
    wo = (w - kw) // stride + 1
    dcols = dcols.reshape(n, c, kh, kw, ho, wo)
    dx = np.zeros(xshape, dcols.dtype)
    for i in range(kh):
        for j in range(kw):
            dx[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += \
                dcols[:, :, i, j]
    return dx


def conv2d(x, w, b, stride=1, padding=0):
    """Cross-correlation, NCHW input, (Cout, Cin, kh, kw) weights."""
    if x.data.shape[1] != w.data.shape[1]:
        raise ValueError("channel mismatch between input and weights")
    if b.data.shape != (w.data.shape[0],):
        raise ValueError("bias shape mismatch")
    cout, cin, kh, kw = w.data.shape
    xp = x.data
    if padding:
        xp = np.pad(xp, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    cols, ho, wo = _im2col(xp, kh, kw, stride)
    wflat = w.data.reshape(cout, -1)
    out = np.matmul(wflat, cols)
    out += b.data[None, :, None]
    out = out.reshape(x.data.shape[0], cout, ho, wo)

    def bwd(g):
        gflat = np.ascontiguousarray(g.reshape(g.shape[0], cout, -1))
        dw = np.matmul(gflat, cols.transpose(0, 2, 1)).sum(axis=0)
        dw = dw.reshape(w.data.shape)
        db = gflat.sum(axis=(0, 2))
        dcols = np.matmul(wflat.T, gflat)
        dxp = _col2im(dcols, xp.shape, kh, kw, stride)
        if padding:
            dxp = dxp[:, :, padding:-padding or None, padding:-padding or None]
        return dxp, dw, db

    return _record(out, (x, w, b), bwd)


def upsample2x(x):
    """Nearest-neighbor 2x upsampling of an NCHW tensor."""
    if x.data.ndim != 4:
        raise ValueError("upsample2x expects a 4-D tensor")
    out = x.data.repeat(2, axis=2).repeat(2, axis=3)

    def bwd(g):
        n, c, h, w = g.shape
        return (g.reshape(n, c, h // 2, 2, w // 2, 2).sum(axis=(3, 5)),)

    return _record(out, (x,), bwd)


# ---------------------------------------------------------------------------
# instance statistics and AdaIN

def instance_stats(x, eps=INSTANCE_EPS):
    """Per (sample, channel) spatial mean and eps-stabilized population std."""
    mu = spatial_mean(x)
    centered = sub(x, mu)
    var = spatial_mean(mul(centered, centered))
    sigma = sqrt(add(var, np.asarray(eps, x.data.dtype)))
    return mu, sigma


def adain_apply(content, style_mu, style_sigma, eps=INSTANCE_EPS):
    """Re-normalize content channels to the requested style statistics.

    The scale is corrected on both sides of the stabilizer: the target std is
    deflated so that measuring the output with instance_stats (which adds eps
    back) recovers style_sigma, and the content normalization is re-inflated
    to undo the eps added to its own measured std. Channels whose variance is
    below eps are left under-compensated rather than amplified.
    """
    mu, sigma = instance_stats(content, eps)
    style_mu = np.asarray(style_mu, content.data.dtype)
    style_sigma = np.asarray(style_sigma, content.data.dtype)
    if style_mu.ndim == 1:
        style_mu = style_mu.reshape(1, -1, 1, 1)
    if style_sigma.ndim == 1:
        style_sigma = style_sigma.reshape(1, -1, 1, 1)
    s_eff = np.sqrt(np.maximum(style_sigma.astype(np.float64) ** 2 - eps, 0.0))
    var = sigma.data.astype(np.float64) ** 2 - eps
    inflate = sigma.data / np.sqrt(np.maximum(var, eps))
    scale = (s_eff * inflate).astype(content.data.dtype)
    normalized = div(sub(content, mu), sigma)
    return add(mul(normalized, Tensor(scale)), Tensor(style_mu))


# ---------------------------------------------------------------------------
# losses

def gan_terms(d_real, d_fake):
    """Discriminator and (non-saturating) generator losses from patch scores.

    Returns (loss_d, loss_g). The adversarial objective's raw value equals
    -loss_d: mean log d_real + mean log(1 - d_fake).
    """
    if not (np.isfinite(d_real.data).all() and np.isfinite(d_fake.data).all()):
        raise ValueError("non-finite discriminator scores")
    one = np.asarray(1.0, d_fake.data.dtype)
    loss_d = neg(add(mean(log(d_real)), mean(log(sub(one, d_fake)))))
    loss_g = neg(mean(log(d_fake)))
    return loss_d, loss_g


def softmax_xent(logits, targets, ignore_code=255):
    """Mean per-pixel cross-entropy; ignore_code pixels contribute nothing.

    logits: (N, K, H, W) tensor; targets: (N, H, W) integer labels.
    """
    targets = np.asarray(targets)
    k = logits.data.shape[1]
    keep = targets != ignore_code
    n_keep = int(keep.sum())
    if n_keep == 0:
        raise ValueError("all pixels ignored")
    if targets[keep].min() < 0 or targets[keep].max() >= k:
        raise ValueError("target code outside [0, K)")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    ez = np.exp(z)
    p = ez / ez.sum(axis=1, keepdims=True)
    idx = np.where(keep, targets, 0)
    picked = np.take_along_axis(p, idx[:, None], axis=1)[:, 0]
    logp = np.log(picked)
    loss = -(logp * keep).sum(dtype=np.float64) / n_keep

    def bwd(g):
        onehot = np.zeros_like(p)
        np.put_along_axis(onehot, idx[:, None], 1.0, axis=1)
        dlogits = (p - onehot) * (keep[:, None] / n_keep)
        return (g * dlogits.astype(logits.data.dtype),)

    return _record(np.asarray(loss, logits.data.dtype), (logits,), bwd)


def check_finite(t, what="tensor"):
    if not np.isfinite(t.data).all():
        raise FloatingPointError(f"non-finite values in {what}")
    return t
