"""Dense numeric kernels with explicit backward passes.

Tensors are plain row-major ``numpy.ndarray`` values; every kernel here is a
pure function. Forward kernels that participate in training come paired with
a ``*_backward`` function taking the upstream gradient plus whatever the
forward returned or consumed.
"""

import hashlib
import math

import numpy as np

from .errors import DegenerateError, DomainError, NumericError, ShapeError

# Sentinel written into masked similarity entries; see softmax_rows.
NEG_MASK = -1e9

LN_EPS = 1e-5
FD_EPS = 1e-5

_MASK64 = (1 << 64) - 1


def as_tensor(data, dtype=np.float64, checked=True):
    """Convert ``data`` to a contiguous array, rejecting NaN/Inf when checked."""
    arr = np.ascontiguousarray(data, dtype=dtype)
    if checked and not np.all(np.isfinite(arr)):
        raise NumericError(f"non-finite values in tensor of shape {arr.shape}")
    return arr


def check_finite(x, what="tensor"):
    if not np.all(np.isfinite(x)):
        raise NumericError(f"non-finite values in {what}")
    return x


class SeededRng:
    """Counter-based (Philox) generator addressed by ``(seed, stream)``.

    Substreams derived with :meth:`substream` depend only on the parent's
    address and the supplied ids, never on how much the parent has been used.
    """

    def __init__(self, seed, stream=0):
        self.seed = int(seed) & _MASK64
        self.stream = int(stream) & _MASK64
        key = np.array([self.seed, self.stream], dtype=np.uint64)
        self.generator = np.random.Generator(np.random.Philox(key=key))

    def substream(self, *ids):
        h = hashlib.blake2b(digest_size=8)
        h.update(self.stream.to_bytes(8, "little"))
        for i in ids:
            h.update(int(i).to_bytes(8, "little", signed=True))
        return SeededRng(self.seed, int.from_bytes(h.digest(), "little"))

    def random(self, shape):
        return self.generator.random(shape)

    def uniform(self, low, high, shape):
        return self.generator.uniform(low, high, shape)

    def normal(self, loc, scale, shape):
        return self.generator.normal(loc, scale, shape)

    def permutation(self, n):
        return self.generator.permutation(n)

    def __repr__(self):
        return f"SeededRng(seed={self.seed}, stream={self.stream})"


# -- linear algebra ---------------------------------------------------------

def matmul(a, b):
    """Matrix product; leading batch dimensions are allowed on ``a``."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim < 2 or b.ndim != 2 or a.shape[-1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    return a @ b


def linear(x, w, b=None):
    out = x @ w
    if b is not None:
        out = out + b
    return out


def linear_backward(dout, x, w):
    """Returns ``(dx, dw, db)`` for ``out = x @ w + b``."""
    lead = tuple(range(x.ndim - 1))
    dx = dout @ w.T
    dw = np.tensordot(x, dout, axes=(lead, lead))
    db = dout.sum(axis=lead)
    return dx, dw, db


# -- softmax ----------------------------------------------------------------

def softmax_rows(s, temperature=1.0):
    """Temperature-scaled softmax along the last axis.

    ``temperature`` may be a scalar or an array broadcastable against ``s``.
    Entries at or below ``NEG_MASK`` get exactly zero probability.
    """
    s = np.asarray(s)
    tau = np.asarray(temperature, dtype=s.dtype)
    if not np.all(tau > 0):
        bad = tau[~(tau > 0)].ravel()[0] if tau.ndim else tau
        raise DomainError(f"softmax temperature must be positive, got {bad!r}")
    masked = s <= NEG_MASK
    any_masked = bool(masked.any())
    if any_masked and masked.all(axis=-1).any():
        raise DegenerateError("softmax row has every entry masked")
    z = s / tau
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    if any_masked:
        e[masked] = 0.0
    return e / e.sum(axis=-1, keepdims=True)


def softmax_backward(p, dp):
    """Gradient w.r.t. the softmax logits given output ``p`` and ``dL/dp``."""
    return p * (dp - (dp * p).sum(axis=-1, keepdims=True))


def softmax_jacobian_diag(p):
    """d softmax_i / d s_i = p_i (1 - p_i)."""
    if not 0.0 <= p <= 1.0:
        raise DomainError(f"probability out of range: {p}")
    return p * (1.0 - p)


# -- convolution ------------------------------------------------------------

def conv_out_len(length, k, padding, stride):
    return (length + 2 * padding - k) // stride + 1


def conv1d(signal, kernels, padding=0, stride=1, bias=None):
    """Cross-correlation of ``signal[B, L, Cin]`` with ``kernels[Cout, Cin, k]``."""
    if signal.ndim != 3 or kernels.ndim != 3 or signal.shape[2] != kernels.shape[1]:
        raise ShapeError(f"conv1d: signal {signal.shape} incompatible with kernels {kernels.shape}")
    n, length, _ = signal.shape
    cout, _, k = kernels.shape
    lout = conv_out_len(length, k, padding, stride)
    if lout < 1:
        raise ShapeError(f"conv1d: output length {lout} < 1 (len={length}, k={k}, p={padding}, s={stride})")
    xp = np.pad(signal, ((0, 0), (padding, padding), (0, 0))) if padding else signal
    span = stride * (lout - 1) + 1
    out = np.zeros((n, lout, cout), dtype=np.result_type(signal, kernels))
    for t in range(k):
        out += xp[:, t:t + span:stride, :] @ kernels[:, :, t].T
    if bias is not None:
        out += bias
    return out


def conv1d_backward(dout, signal, kernels, padding=0, stride=1):
    """Returns ``(dsignal, dkernels, dbias)``."""
    n, length, cin = signal.shape
    k = kernels.shape[2]
    lout = dout.shape[1]
    xp = np.pad(signal, ((0, 0), (padding, padding), (0, 0))) if padding else signal
    span = stride * (lout - 1) + 1
    dxp = np.zeros_like(xp)
    dk = np.zeros_like(kernels)
    for t in range(k):
        dxp[:, t:t + span:stride, :] += dout @ kernels[:, :, t]
        dk[:, :, t] = np.tensordot(dout, xp[:, t:t + span:stride, :], axes=([0, 1], [0, 1]))
    dx = dxp[:, padding:padding + length, :]
    return dx, dk, dout.sum(axis=(0, 1))


def deconv_out_len(length, k, padding, stride):
    return (length - 1) * stride - 2 * padding + k


def deconv1d(tokens, kernels, stride=1, padding=0, bias=None):
    """Transposed convolution of ``tokens[B, n, Cin]`` with ``kernels[Cin, Cout, k]``."""
    if tokens.ndim != 3 or kernels.ndim != 3 or tokens.shape[2] != kernels.shape[0]:
        raise ShapeError(f"deconv1d: tokens {tokens.shape} incompatible with kernels {kernels.shape}")
    n, length, _ = tokens.shape
    _, cout, k = kernels.shape
    lout = deconv_out_len(length, k, padding, stride)
    if lout < 1 or padding < 0 or stride < 1:
        raise ShapeError(f"deconv1d: invalid geometry (len={length}, k={k}, p={padding}, s={stride})")
    full_len = (length - 1) * stride + k
    span = stride * (length - 1) + 1
    full = np.zeros((n, full_len, cout), dtype=np.result_type(tokens, kernels))
    for t in range(k):
        full[:, t:t + span:stride, :] += tokens @ kernels[:, :, t]
    out = full[:, padding:padding + lout, :]
    if bias is not None:
        out = out + bias
    return np.ascontiguousarray(out)


def deconv1d_backward(dout, tokens, kernels, stride=1, padding=0):
    """Returns ``(dtokens, dkernels, dbias)``."""
    n, length, _ = tokens.shape
    k = kernels.shape[2]
    full_len = (length - 1) * stride + k
    span = stride * (length - 1) + 1
    dfull = np.zeros((n, full_len, dout.shape[2]), dtype=dout.dtype)
    dfull[:, padding:padding + dout.shape[1], :] = dout
    dx = np.zeros_like(tokens)
    dk = np.zeros_like(kernels)
    for t in range(k):
        sl = dfull[:, t:t + span:stride, :]
        dx += sl @ kernels[:, :, t].T
        dk[:, :, t] = np.tensordot(tokens, sl, axes=([0, 1], [0, 1]))
    return dx, dk, dout.sum(axis=(0, 1))


def maxpool1d(x, k=2):
    """Non-overlapping max-pool over axis 1; returns ``(out, argmax)``."""
    n, length, c = x.shape
    if length % k:
        raise ShapeError(f"maxpool1d: length {length} not divisible by {k}")
    xr = x.reshape(n, length // k, k, c)
    idx = xr.argmax(axis=2)
    out = np.take_along_axis(xr, idx[:, :, None, :], axis=2)[:, :, 0, :]
    return out, idx


def maxpool1d_backward(dout, argmax, k=2):
    n, m, c = dout.shape
    dx = np.zeros((n, m, k, c), dtype=dout.dtype)
    np.put_along_axis(dx, argmax[:, :, None, :], dout[:, :, None, :], axis=2)
    return dx.reshape(n, m * k, c)


# -- normalisation / activations -------------------------------------------

def layer_norm(x, gain, bias, eps=LN_EPS):
    """Returns ``(out, xhat, inv_std)``; the last two feed the backward pass."""
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    return xhat * gain + bias, xhat, inv


def layer_norm_backward(dout, xhat, inv, gain):
    """Returns ``(dx, dgain, dbias)``."""
    lead = tuple(range(dout.ndim - 1))
    dgain = (dout * xhat).sum(axis=lead)
    dbias = dout.sum(axis=lead)
    g = dout * gain
    d = xhat.shape[-1]
    dx = (inv / d) * (d * g - g.sum(axis=-1, keepdims=True)
                      - xhat * (g * xhat).sum(axis=-1, keepdims=True))
    return dx, dgain, dbias


def relu(x):
    return np.maximum(x, 0.0)


def relu_backward(dout, x):
    return dout * (x > 0)


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x):
    """Tanh approximation of GELU."""
    return 0.5 * x * (1.0 + np.tanh(_GELU_C * (x + 0.044715 * (x * x * x))))


def gelu_backward(dout, x):
    x2 = x * x
    t = np.tanh(_GELU_C * (x + 0.044715 * (x2 * x)))
    du = _GELU_C * (1.0 + 3 * 0.044715 * x2)
    return dout * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du)


def sigmoid(x):
    # tanh form cannot overflow for large |x|
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x)))


def dropout_mask(shape, ratio, rng, dtype=np.float64):
    """Keep-mask already scaled by ``1/(1-ratio)``."""
    if not 0.0 <= ratio < 1.0:
        raise DomainError(f"dropout ratio must be in [0, 1), got {ratio}")
    keep = rng.random(shape) >= ratio
    return keep.astype(dtype) / (1.0 - ratio)


def dropout(x, ratio, rng, training):
    if not training or ratio == 0.0:
        return x
    return x * dropout_mask(x.shape, ratio, rng, x.dtype)


# -- gradient oracle --------------------------------------------------------

def finite_diff_grad(f, x, eps=FD_EPS):
    """Central-difference gradient of scalar ``f`` at ``x`` (64-bit)."""
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = float(f(x))
        flat[i] = orig - eps
        fm = float(f(x))
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NumericError(f"non-finite function value while differencing coordinate {i}")
        gflat[i] = (fp - fm) / (2.0 * eps)
    return grad


def max_relative_error(analytic, numeric, rel_floor=1e-3, abs_floor=1e-12):
    """Largest element-wise ``|a-n| / max(|a|, |n|, floor)``.

    ``floor`` is ``rel_floor`` times the tensor's largest numeric gradient
    (plus ``abs_floor``), so entries that are tiny compared to the rest of the
    tensor are judged on the tensor's scale rather than amplifying
    finite-difference round-off.
    """
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    if a.shape != n.shape:
        raise ShapeError(f"gradient shapes differ: {a.shape} vs {n.shape}")
    if a.size == 0:
        return 0.0
    floor = rel_floor * float(np.max(np.abs(n))) + abs_floor
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom))
