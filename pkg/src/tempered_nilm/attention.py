"""Self-attention with diagonal nullification and tunable temperature.

Four attention variants share one code path:

* ``standard``  -- softmax(QK^T / sqrt(d_k)) V
* ``fixed:c``   -- diagonal of QK^T masked, temperature c * sqrt(d_k)
* ``raw``       -- diagonal masked, temperature is a free scalar parameter
* ``meta``      -- diagonal masked, temperature predicted per input by a
  small ReLU network on token-averaged features, squeezed into
  (sqrt(d_k)/8, 8 sqrt(d_k))

Inputs are ``[n, d]`` or batched ``[B, n, d]``.
"""

import csv
import enum
import io
import math
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from .errors import DegenerateError, DomainError, NumericError, ShapeError
from .tensor import NEG_MASK, relu, sigmoid, softmax_backward, softmax_rows

# Fixed temperature multipliers swept by the ablation grid, in row order.
TAU_MULTIPLIERS = (1.0, 1 / 8, 1 / 4, 1 / 2, 2.0, 4.0, 8.0)

TAU_LOW_FACTOR = 1 / 8
TAU_HIGH_FACTOR = 8.0
# sigmoid saturates to exactly 1.0 in float64 past ~37
_RAW_CLAMP = 30.0
# floor added to |tau| when a free temperature goes non-positive
RAW_TAU_GUARD = 1e-6


class Variant(enum.Enum):
    STANDARD = "standard"
    FIXED = "fixed"
    RAW = "raw"
    META = "meta"


@dataclass(frozen=True)
class AttentionMode:
    variant: Variant = Variant.STANDARD
    multiplier: float = 1.0

    def __post_init__(self):
        if not self.multiplier > 0:
            raise DomainError(f"temperature multiplier must be positive, got {self.multiplier}")

    @property
    def masked(self):
        return self.variant is not Variant.STANDARD

    @classmethod
    def parse(cls, text):
        """Parse ``standard``, ``masked``, ``fixed:<c>``, ``raw`` or ``meta``.

        ``c`` may be written as a fraction, e.g. ``fixed:1/8``.
        """
        t = str(text).strip().lower()
        if t == "standard":
            return cls(Variant.STANDARD)
        if t == "masked":
            return cls(Variant.FIXED, 1.0)
        if t == "raw":
            return cls(Variant.RAW)
        if t == "meta":
            return cls(Variant.META)
        if t.startswith("fixed:"):
            try:
                c = float(Fraction(t[6:]))
            except (ValueError, ZeroDivisionError):
                raise DomainError(f"bad temperature multiplier in mode {text!r}") from None
            return cls(Variant.FIXED, c)
        raise DomainError(f"unknown attention mode {text!r}")

    def __str__(self):
        if self.variant is Variant.FIXED:
            return f"fixed:{Fraction(self.multiplier).limit_denominator(64)}"
        return self.variant.value


@dataclass
class AttentionParams:
    w_q: np.ndarray  # [heads, d, d_k]
    w_k: np.ndarray
    w_v: np.ndarray
    w_o: np.ndarray  # [heads * d_k, d]
    b_o: np.ndarray  # [d]
    raw_tau: np.ndarray = None  # shape (1,), raw variant only

    def __post_init__(self):
        h, d, dk = self.w_q.shape
        if self.w_k.shape != (h, d, dk) or self.w_v.shape != (h, d, dk):
            raise ShapeError("w_q, w_k, w_v must share shape [heads, d, d_k]")
        if self.w_o.shape != (h * dk, d) or self.b_o.shape != (d,):
            raise ShapeError(f"w_o must be {(h * dk, d)} and b_o {(d,)}")
        if h * dk != d:
            raise ShapeError(f"heads * d_k must equal d ({h} * {dk} != {d})")

    @property
    def heads(self):
        return self.w_q.shape[0]

    @property
    def d_model(self):
        return self.w_q.shape[1]

    @property
    def d_k(self):
        return self.w_q.shape[2]


@dataclass
class MetaNetwork:
    w1: np.ndarray  # [d, h]
    b1: np.ndarray  # [h]
    w2: np.ndarray  # [h, 1]
    b2: np.ndarray  # [1]
    d_k: int

    def __post_init__(self):
        d, h = self.w1.shape
        if self.b1.shape != (h,) or self.w2.shape != (h, 1) or self.b2.shape != (1,):
            raise ShapeError("meta-network shapes must be w1[d,h], b1[h], w2[h,1], b2[1]")


@dataclass
class AttentionTrace:
    """Per-call record of one attention layer.

    ``similarity`` is QK^T before masking, ``attention`` the post-softmax
    matrix; both carry a heads axis. ``tau`` is the temperature actually used
    (scalar, or one value per batch element in the meta variant).
    """

    similarity: np.ndarray
    attention: np.ndarray
    tau: object
    mode: AttentionMode
    tau_guarded: bool = False
    cache: dict = field(default_factory=dict, repr=False)


def _split_heads(y, heads):
    b, n, hd = y.shape
    return y.reshape(b, n, heads, hd // heads).transpose(0, 2, 1, 3)


def _merge_heads(y):
    b, h, n, dk = y.shape
    return y.transpose(0, 2, 1, 3).reshape(b, n, h * dk)


def _stack_heads(w):
    # [H, d, dk] -> [d, H*dk] with head-major columns
    h, d, dk = w.shape
    return w.transpose(1, 0, 2).reshape(d, h * dk)


def _unstack_heads(w, heads):
    d, hdk = w.shape
    return w.reshape(d, heads, hdk // heads).transpose(1, 0, 2)


def project_qkv(x, params):
    """Q, K, V with a heads axis: ``[..., heads, n, d_k]``. No bias terms."""
    x = np.asarray(x)
    if x.shape[-1] != params.d_model:
        raise ShapeError(f"input feature size {x.shape[-1]} != model width {params.d_model}")
    squeeze = x.ndim == 2
    xb = x[None] if squeeze else x
    out = tuple(_split_heads(xb @ _stack_heads(w), params.heads)
                for w in (params.w_q, params.w_k, params.w_v))
    return tuple(o[0] for o in out) if squeeze else out


def similarity(q, k):
    """Unscaled dot products S_ij = q_i . k_j."""
    if q.shape[-1] != k.shape[-1]:
        raise ShapeError(f"similarity: key width mismatch {q.shape} vs {k.shape}")
    return q @ np.swapaxes(k, -1, -2)


def mask_diagonal(s):
    """Copy of ``s`` with every S_ii replaced by ``NEG_MASK``."""
    n = s.shape[-1]
    if s.shape[-2] != n:
        raise ShapeError(f"mask_diagonal needs square matrices, got {s.shape}")
    if n < 2:
        raise DegenerateError("cannot mask the diagonal of a single-token sequence")
    out = s.copy()
    idx = np.arange(n)
    out[..., idx, idx] = NEG_MASK
    return out


def pool_tokens(x):
    """Mean over the token axis: ``[..., n, d] -> [..., d]``."""
    return np.asarray(x).mean(axis=-2)


def tau_bounds(d_k):
    r = math.sqrt(d_k)
    return r * TAU_LOW_FACTOR, r * TAU_HIGH_FACTOR


def squash_tau(raw, d_k):
    """(sqrt(d_k)/8) * (63 * sigmoid(raw) + 1)."""
    raw = np.clip(raw, -_RAW_CLAMP, _RAW_CLAMP)
    return math.sqrt(d_k) / 8 * (63.0 * sigmoid(raw) + 1.0)


def _squash_grad(raw, d_k):
    inside = np.abs(raw) < _RAW_CLAMP
    s = sigmoid(np.clip(raw, -_RAW_CLAMP, _RAW_CLAMP))
    return math.sqrt(d_k) / 8 * 63.0 * s * (1.0 - s) * inside


def compute_tau(meta, x_pooled, return_cache=False):
    """Meta-network temperature for pooled features ``[..., d]``."""
    x_pooled = np.asarray(x_pooled)
    if x_pooled.shape[-1] != meta.w1.shape[0]:
        raise ShapeError(f"pooled width {x_pooled.shape[-1]} != meta input {meta.w1.shape[0]}")
    pre = x_pooled @ meta.w1 + meta.b1
    hidden = relu(pre)
    raw = (hidden @ meta.w2 + meta.b2)[..., 0]
    tau = squash_tau(raw, meta.d_k)
    if return_cache:
        return tau, {"pooled": x_pooled, "pre": pre, "hidden": hidden, "raw": raw}
    return tau


def _resolve_tau(mode, params, meta, pool_src, d_k):
    """Returns ``(tau, broadcastable_tau, guarded, meta_cache)``."""
    v = mode.variant
    if v is Variant.STANDARD:
        return math.sqrt(d_k), math.sqrt(d_k), False, None
    if v is Variant.FIXED:
        t = mode.multiplier * math.sqrt(d_k)
        return t, t, False, None
    if v is Variant.RAW:
        if params.raw_tau is None:
            raise DomainError("raw temperature mode needs params.raw_tau")
        raw = float(params.raw_tau[0])
        if raw > 0:
            return raw, raw, False, None
        t = abs(raw) + RAW_TAU_GUARD
        return t, t, True, None
    if meta is None:
        raise DomainError("meta temperature mode needs a MetaNetwork")
    tau, cache = compute_tau(meta, pool_tokens(pool_src), return_cache=True)
    tau = tau.astype(pool_src.dtype)
    return tau, tau[:, None, None, None], False, cache


def attention_forward(x, params, mode, meta=None, prev_block_out=None):
    """Multi-head attention; returns ``(output, trace)``.

    In the meta variant the temperature is computed from the token average of
    ``prev_block_out`` when given, otherwise of ``x``.
    """
    x = np.asarray(x)
    squeeze = x.ndim == 2
    xb = x[None] if squeeze else x
    if xb.ndim != 3 or xb.shape[-1] != params.d_model:
        raise ShapeError(f"attention input must be [n, {params.d_model}] or [B, n, {params.d_model}], got {x.shape}")
    pool_src = xb
    if prev_block_out is not None:
        pool_src = np.asarray(prev_block_out)
        pool_src = pool_src[None] if pool_src.ndim == 2 else pool_src

    heads = params.heads
    wq, wk, wv = (_stack_heads(w) for w in (params.w_q, params.w_k, params.w_v))
    q = _split_heads(xb @ wq, heads)
    k = _split_heads(xb @ wk, heads)
    v = _split_heads(xb @ wv, heads)
    s = q @ k.transpose(0, 1, 3, 2)
    s_used = mask_diagonal(s) if mode.masked else s

    tau, tau_b, guarded, meta_cache = _resolve_tau(mode, params, meta, pool_src, params.d_k)
    a = softmax_rows(s_used, tau_b)
    o = _merge_heads(a @ v)
    out = o @ params.w_o + params.b_o
    if not np.all(np.isfinite(out)):
        raise NumericError("non-finite attention output")

    cache = {
        "x": xb, "q": q, "k": k, "v": v, "o": o, "tau_b": tau_b,
        "params": params, "meta": meta, "meta_cache": meta_cache,
        "pool_separate": prev_block_out is not None, "squeeze": squeeze,
        "n_pool": pool_src.shape[1],
    }
    if squeeze:
        trace = AttentionTrace(s[0], a[0], float(np.asarray(tau).reshape(-1)[0]), mode, guarded, cache)
        return out[0], trace
    return out, AttentionTrace(s, a, tau, mode, guarded, cache)


def attention_backward(trace, upstream_grad):
    """Gradients of every input and parameter of one attention call.

    Returns a dict with keys ``x``, ``w_q``, ``w_k``, ``w_v``, ``w_o``,
    ``b_o``, and where applicable ``raw_tau``, ``meta.w1``, ``meta.b1``,
    ``meta.w2``, ``meta.b2`` and ``prev_block_out``.
    """
    c = trace.cache
    params = c["params"]
    dout = np.asarray(upstream_grad)
    if c["squeeze"]:
        dout = dout[None]
    xb, q, k, v, o, tau_b = c["x"], c["q"], c["k"], c["v"], c["o"], c["tau_b"]
    if dout.shape != xb.shape:
        raise ShapeError(f"upstream gradient {dout.shape} does not match layer output {xb.shape}")
    s = trace.similarity[None] if c["squeeze"] else trace.similarity
    a = trace.attention[None] if c["squeeze"] else trace.attention
    heads = params.heads

    grads = {}
    grads["w_o"] = np.tensordot(o, dout, axes=([0, 1], [0, 1]))
    grads["b_o"] = dout.sum(axis=(0, 1))
    do = _split_heads(dout @ params.w_o.T, heads)
    da = do @ v.transpose(0, 1, 3, 2)
    dv = a.transpose(0, 1, 3, 2) @ do
    dz = softmax_backward(a, da)
    ds = dz / tau_b
    if trace.mode.masked:
        idx = np.arange(s.shape[-1])
        ds[..., idx, idx] = 0.0
    dq = ds @ k
    dk = ds.transpose(0, 1, 3, 2) @ q

    dx = np.zeros_like(xb)
    for name, d in (("w_q", dq), ("w_k", dk), ("w_v", dv)):
        dm = _merge_heads(d)
        grads[name] = _unstack_heads(np.tensordot(xb, dm, axes=([0, 1], [0, 1])), heads)
        dx += dm @ _stack_heads(getattr(params, name)).T

    variant = trace.mode.variant
    if variant in (Variant.RAW, Variant.META):
        # masked entries carry dz == 0, so the pre-mask similarity is safe here
        dtau = -(dz * s).sum(axis=(1, 2, 3)) / (np.asarray(tau_b).reshape(-1) ** 2)
        if variant is Variant.RAW:
            raw = float(params.raw_tau[0])
            slope = 1.0 if raw > 0 else -1.0
            grads["raw_tau"] = np.array([dtau.sum() * slope], dtype=params.raw_tau.dtype)
        else:
            meta, mc = c["meta"], c["meta_cache"]
            draw = dtau * _squash_grad(mc["raw"], meta.d_k)
            grads["meta.w2"] = mc["hidden"].T @ draw[:, None]
            grads["meta.b2"] = np.array([draw.sum()], dtype=meta.b2.dtype)
            dh = draw[:, None] @ meta.w2.T
            dpre = dh * (mc["pre"] > 0)
            grads["meta.w1"] = mc["pooled"].T @ dpre
            grads["meta.b1"] = dpre.sum(axis=0)
            dpool = (dpre @ meta.w1.T)[:, None, :] / c["n_pool"]
            dsrc = np.broadcast_to(dpool, (dpool.shape[0], c["n_pool"], dpool.shape[2]))
            if c["pool_separate"]:
                grads["prev_block_out"] = dsrc[0].copy() if c["squeeze"] else np.array(dsrc)
            else:
                dx = dx + dsrc

    grads["x"] = dx[0] if c["squeeze"] else dx
    return grads


def reference_attention(x, w_q, w_k, w_v, w_o, b_o, tau, masked=False):
    """Loop-based multi-head attention on a single ``[n, d]`` input.

    Independent of the vectorised path; used as a test oracle.
    """
    n = x.shape[0]
    heads = w_q.shape[0]
    outs = []
    for h in range(heads):
        q = x @ w_q[h]
        k = x @ w_k[h]
        v = x @ w_v[h]
        head = np.zeros((n, v.shape[1]))
        for i in range(n):
            logits = []
            for j in range(n):
                if masked and i == j:
                    continue
                logits.append((j, float(np.dot(q[i], k[j])) / tau))
            m = max(val for _, val in logits)
            weights = [(j, math.exp(val - m)) for j, val in logits]
            total = sum(wt for _, wt in weights)
            for j, wt in weights:
                head[i] += wt / total * v[j]
        outs.append(head)
    return np.concatenate(outs, axis=1) @ w_o + b_o


def smoothing_study(x, dk_values):
    """Rows ``(dk, index, logit, prob)`` of softmax(x / sqrt(dk)) for each dk."""
    x = np.asarray(x, dtype=np.float64)
    rows = []
    for dk in dk_values:
        p = softmax_rows(x[None, :], math.sqrt(dk))[0]
        for i, (logit, prob) in enumerate(zip(x, p)):
            rows.append((dk, i, float(logit), float(prob)))
    return rows


def smoothing_csv(rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["dk", "index", "logit", "prob"])
    for dk, i, logit, prob in rows:
        w.writerow([dk, i, repr(logit), repr(prob)])
    return buf.getvalue()


# Default logits for the smoothing diagnostic.
SMOOTHING_LOGITS = (0.1081, 0.4376, 0.7697, 0.1929, 0.3626, 2.8451)
