"""Per-appliance sequence-to-sequence network.

aggregate [B, L]
  -> conv1d(k=5, p=2) -> max-pool(2) -> + positional embedding -> dropout
  -> ``layers`` x post-norm transformer block (attention, GELU FFN)
  -> deconv1d(k=4, s=2, p=1) -> power head, status head    [B, L] each
"""

import hashlib
import io
import json
import math
import struct
from dataclasses import dataclass, field, replace

import numpy as np

from .attention import (AttentionMode, AttentionParams, MetaNetwork, Variant,
                        attention_backward, attention_forward)
from .errors import DataError, ShapeError
from .tensor import (SeededRng, conv1d, conv1d_backward, deconv1d,
                     deconv1d_backward, dropout_mask, gelu, gelu_backward,
                     layer_norm, layer_norm_backward, linear_backward,
                     maxpool1d, maxpool1d_backward)

CONV_K, CONV_PAD = 5, 2
DECONV_K, DECONV_STRIDE, DECONV_PAD = 4, 2, 1
POOL = 2
POS_STD = 0.02


@dataclass(frozen=True)
class ModelConfig:
    window_len: int = 480
    hidden: int = 16
    layers: int = 2
    heads: int = 2
    dropout: float = 0.5
    mode: AttentionMode = field(default_factory=AttentionMode)
    ffn_mult: int = 4
    seed: int = 0
    meta_hidden: int = 0  # 0 -> same as hidden
    precision: str = "float32"

    def __post_init__(self):
        if isinstance(self.mode, str):
            object.__setattr__(self, "mode", AttentionMode.parse(self.mode))
        if self.hidden % self.heads:
            raise ShapeError(f"hidden {self.hidden} not divisible by heads {self.heads}")
        if self.window_len % 2 or self.window_len < 4:
            raise ShapeError(f"window_len must be even and >= 4, got {self.window_len}")
        if not 0.0 <= self.dropout < 1.0:
            raise ShapeError(f"dropout must be in [0, 1), got {self.dropout}")
        if self.precision not in ("float32", "float64"):
            raise ShapeError(f"precision must be float32 or float64, got {self.precision}")

    @property
    def d_k(self):
        return self.hidden // self.heads

    @property
    def n_tokens(self):
        return self.window_len // POOL

    @property
    def dtype(self):
        return np.dtype(self.precision)

    @property
    def meta_width(self):
        return self.meta_hidden or self.hidden

    def to_dict(self):
        return {
            "window_len": self.window_len, "hidden": self.hidden, "layers": self.layers,
            "heads": self.heads, "dropout": self.dropout, "mode": str(self.mode),
            "ffn_mult": self.ffn_mult, "seed": self.seed, "meta_hidden": self.meta_hidden,
            "precision": self.precision,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(**d)

    def architecture_hash(self):
        """Hash of the fields that fix parameter shapes and the forward graph."""
        arch = {k: v for k, v in self.to_dict().items() if k not in ("seed", "dropout", "precision")}
        blob = json.dumps(arch, sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def parameter_shapes(cfg):
    """Ordered ``name -> shape`` for every learnable tensor."""
    h, f, m = cfg.hidden, cfg.ffn_mult * cfg.hidden, cfg.meta_width
    shapes = {
        "embed.conv.weight": (h, 1, CONV_K),
        "embed.conv.bias": (h,),
        "embed.pos": (cfg.n_tokens, h),
    }
    for i in range(cfg.layers):
        p = f"layers.{i}."
        for w in ("w_q", "w_k", "w_v"):
            shapes[p + "attn." + w] = (cfg.heads, h, cfg.d_k)
        shapes[p + "attn.w_o"] = (h, h)
        shapes[p + "attn.b_o"] = (h,)
        if cfg.mode.variant is Variant.RAW:
            shapes[p + "attn.raw_tau"] = (1,)
        if cfg.mode.variant is Variant.META:
            shapes[p + "meta.w1"] = (h, m)
            shapes[p + "meta.b1"] = (m,)
            shapes[p + "meta.w2"] = (m, 1)
            shapes[p + "meta.b2"] = (1,)
        shapes[p + "ffn.w1"] = (h, f)
        shapes[p + "ffn.b1"] = (f,)
        shapes[p + "ffn.w2"] = (f, h)
        shapes[p + "ffn.b2"] = (h,)
        for norm in ("norm1", "norm2"):
            shapes[p + norm + ".gain"] = (h,)
            shapes[p + norm + ".bias"] = (h,)
    shapes["recon.deconv.weight"] = (h, h, DECONV_K)
    shapes["recon.deconv.bias"] = (h,)
    shapes["head_power.weight"] = (h, 1)
    shapes["head_power.bias"] = (1,)
    shapes["head_status.weight"] = (h, 1)
    shapes["head_status.bias"] = (1,)
    return shapes


def parameter_count(cfg):
    h, f, m, L = cfg.hidden, cfg.ffn_mult * cfg.hidden, cfg.meta_width, cfg.window_len
    per_layer = 4 * h * h + h + (h * f + f + f * h + h) + 4 * h
    if cfg.mode.variant is Variant.RAW:
        per_layer += 1
    if cfg.mode.variant is Variant.META:
        per_layer += h * m + 2 * m + 1
    return (h * CONV_K + h) + (L // 2) * h + cfg.layers * per_layer + (h * h * DECONV_K + h) + 2 * (h + 1)


def _fan_in(name, shape):
    if name.endswith("conv.weight"):
        return shape[1] * shape[2]
    if name == "recon.deconv.weight":
        return shape[0] * shape[2]
    if name.endswith(("w_q", "w_k", "w_v")):
        return shape[1]
    return shape[0]


def init_params(cfg):
    """Deterministic initial parameters derived from ``cfg.seed``."""
    root = SeededRng(cfg.seed)
    shapes = parameter_shapes(cfg)
    params = {}
    for name, shape in shapes.items():
        # keyed by name so variants share every tensor they have in common
        rng = root.substream(int.from_bytes(hashlib.blake2b(name.encode(), digest_size=7).digest(), "little"))
        prefix, leaf = name.rsplit(".", 1)
        if name == "embed.pos":
            val = rng.normal(0.0, POS_STD, shape)
        elif leaf == "gain":
            val = np.ones(shape)
        elif ".norm" in name or leaf == "b_o" or ".meta.b" in name:
            val = np.zeros(shape)
        elif leaf == "raw_tau":
            val = np.full(shape, math.sqrt(cfg.d_k))
        elif leaf in ("bias", "b1", "b2"):
            wname = prefix + (".weight" if leaf == "bias" else ".w" + leaf[1])
            bound = 1.0 / math.sqrt(_fan_in(wname, shapes[wname]))
            val = rng.uniform(-bound, bound, shape)
        else:
            bound = 1.0 / math.sqrt(_fan_in(name, shape))
            val = rng.uniform(-bound, bound, shape)
        params[name] = np.ascontiguousarray(val, dtype=cfg.dtype)
    return params


@dataclass
class ForwardResult:
    power: np.ndarray
    status_logits: np.ndarray
    traces: list
    cache: dict = field(default_factory=dict, repr=False)


class NilmModel:
    """Parameters plus the forward/backward graph for one appliance."""

    def __init__(self, config, params=None):
        self.config = config
        self.params = init_params(config) if params is None else dict(params)
        expected = parameter_shapes(config)
        if set(self.params) != set(expected):
            raise ShapeError(f"parameter names differ from config: {sorted(set(self.params) ^ set(expected))}")
        for name, shape in expected.items():
            if self.params[name].shape != shape:
                raise ShapeError(f"{name}: shape {self.params[name].shape} != {shape}")

    def num_parameters(self):
        return sum(p.size for p in self.params.values())

    def copy(self):
        return NilmModel(self.config, {k: v.copy() for k, v in self.params.items()})

    def astype(self, precision):
        cfg = replace(self.config, precision=precision)
        return NilmModel(cfg, {k: v.astype(precision) for k, v in self.params.items()})

    def attention_params(self, i):
        p = self.params
        pre = f"layers.{i}.attn."
        return AttentionParams(p[pre + "w_q"], p[pre + "w_k"], p[pre + "w_v"],
                               p[pre + "w_o"], p[pre + "b_o"], p.get(pre + "raw_tau"))

    def meta_network(self, i):
        if self.config.mode.variant is not Variant.META:
            return None
        p = self.params
        pre = f"layers.{i}.meta."
        return MetaNetwork(p[pre + "w1"], p[pre + "b1"], p[pre + "w2"], p[pre + "b2"], self.config.d_k)

    def forward(self, aggregate, training=False, rng=None):
        return forward(aggregate, self, training, rng)

    def backward(self, result, d_power, d_status):
        return backward(result, self, d_power, d_status)

    def predict(self, aggregate, batch_size=256):
        """Inference-mode normalised power for ``aggregate[N, L]``."""
        aggregate = np.asarray(aggregate, dtype=self.config.dtype)
        out = [forward(aggregate[i:i + batch_size], self).power
               for i in range(0, len(aggregate), batch_size)]
        return np.concatenate(out) if out else np.zeros((0, self.config.window_len))


def _mask(shape, ratio, rng, site, dtype, training):
    if not training or ratio == 0.0:
        return None
    return dropout_mask(shape, ratio, rng.substream(site), dtype)


def embed(aggregate, model, training=False, rng=None):
    """Returns ``(tokens[B, L/2, hidden], cache)``."""
    cfg, p = model.config, model.params
    agg = np.asarray(aggregate, dtype=cfg.dtype)
    if agg.ndim != 2 or agg.shape[1] != cfg.window_len:
        raise ShapeError(f"expected aggregate [B, {cfg.window_len}], got {agg.shape}")
    sig = agg[:, :, None]
    conv = conv1d(sig, p["embed.conv.weight"], CONV_PAD, 1, p["embed.conv.bias"])
    pooled, argmax = maxpool1d(conv, POOL)
    tokens = pooled + p["embed.pos"]
    m = _mask(tokens.shape, cfg.dropout, rng, 0, cfg.dtype, training)
    if m is not None:
        tokens = tokens * m
    return tokens, {"sig": sig, "argmax": argmax, "mask": m}


def encode(tokens, model, training=False, rng=None):
    """Returns ``(encoded, traces, caches)``."""
    cfg, p = model.config, model.params
    x = tokens
    traces, caches = [], []
    for i in range(cfg.layers):
        pre = f"layers.{i}."
        a, trace = attention_forward(x, model.attention_params(i), cfg.mode,
                                     model.meta_network(i), x if i > 0 else None)
        m1 = _mask(a.shape, cfg.dropout, rng, 1 + 2 * i, cfg.dtype, training)
        r1 = x + (a * m1 if m1 is not None else a)
        x1, xhat1, inv1 = layer_norm(r1, p[pre + "norm1.gain"], p[pre + "norm1.bias"])
        f_pre = x1 @ p[pre + "ffn.w1"] + p[pre + "ffn.b1"]
        f_act = gelu(f_pre)
        f = f_act @ p[pre + "ffn.w2"] + p[pre + "ffn.b2"]
        m2 = _mask(f.shape, cfg.dropout, rng, 2 + 2 * i, cfg.dtype, training)
        r2 = x1 + (f * m2 if m2 is not None else f)
        x2, xhat2, inv2 = layer_norm(r2, p[pre + "norm2.gain"], p[pre + "norm2.bias"])
        traces.append(trace)
        caches.append({"m1": m1, "m2": m2, "x1": x1, "xhat1": xhat1, "inv1": inv1,
                       "f_pre": f_pre, "f_act": f_act, "xhat2": xhat2, "inv2": inv2})
        x = x2
    return x, traces, caches


def reconstruct(encoded, model):
    """Returns ``(power[B, L], status_logits[B, L], upsampled)``."""
    cfg, p = model.config, model.params
    if encoded.ndim != 3 or encoded.shape[1:] != (cfg.n_tokens, cfg.hidden):
        raise ShapeError(f"expected encoded [B, {cfg.n_tokens}, {cfg.hidden}], got {encoded.shape}")
    y = deconv1d(encoded, p["recon.deconv.weight"], DECONV_STRIDE, DECONV_PAD, p["recon.deconv.bias"])
    power = (y @ p["head_power.weight"] + p["head_power.bias"])[..., 0]
    status = (y @ p["head_status.weight"] + p["head_status.bias"])[..., 0]
    return power, status, y


def forward(aggregate, model, training=False, rng=None):
    if training and model.config.dropout > 0 and rng is None:
        raise ValueError("training-mode forward with dropout needs an rng")
    tokens, ecache = embed(aggregate, model, training, rng)
    encoded, traces, lcaches = encode(tokens, model, training, rng)
    power, status, y = reconstruct(encoded, model)
    cache = {"embed": ecache, "tokens": tokens, "layers": lcaches, "encoded": encoded, "y": y}
    return ForwardResult(power, status, traces, cache)


def backward(result, model, d_power, d_status):
    """Gradients of every parameter given ``dL/dpower`` and ``dL/dstatus``."""
    cfg, p = model.config, model.params
    c = result.cache
    g = {}
    dt = np.asarray(d_power, dtype=cfg.dtype)[..., None]
    ds = np.asarray(d_status, dtype=cfg.dtype)[..., None]
    y = c["y"]
    dy, g["head_power.weight"], g["head_power.bias"] = linear_backward(dt, y, p["head_power.weight"])
    dy2, g["head_status.weight"], g["head_status.bias"] = linear_backward(ds, y, p["head_status.weight"])
    dy = dy + dy2
    dx, g["recon.deconv.weight"], g["recon.deconv.bias"] = deconv1d_backward(
        dy, c["encoded"], p["recon.deconv.weight"], DECONV_STRIDE, DECONV_PAD)

    for i in reversed(range(cfg.layers)):
        pre = f"layers.{i}."
        lc = c["layers"][i]
        dr2, g[pre + "norm2.gain"], g[pre + "norm2.bias"] = layer_norm_backward(
            dx, lc["xhat2"], lc["inv2"], p[pre + "norm2.gain"])
        df = dr2 * lc["m2"] if lc["m2"] is not None else dr2
        dfa, g[pre + "ffn.w2"], g[pre + "ffn.b2"] = linear_backward(df, lc["f_act"], p[pre + "ffn.w2"])
        dfp = gelu_backward(dfa, lc["f_pre"])
        dx1, g[pre + "ffn.w1"], g[pre + "ffn.b1"] = linear_backward(dfp, lc["x1"], p[pre + "ffn.w1"])
        dx1 = dx1 + dr2
        dr1, g[pre + "norm1.gain"], g[pre + "norm1.bias"] = layer_norm_backward(
            dx1, lc["xhat1"], lc["inv1"], p[pre + "norm1.gain"])
        da = dr1 * lc["m1"] if lc["m1"] is not None else dr1
        ag = attention_backward(result.traces[i], da)
        dx = dr1 + ag.pop("x")
        if "prev_block_out" in ag:
            dx = dx + ag.pop("prev_block_out")
        for k, v in ag.items():
            g[pre + ("attn." + k if not k.startswith("meta.") else k)] = v

    ec = c["embed"]
    if ec["mask"] is not None:
        dx = dx * ec["mask"]
    g["embed.pos"] = dx.sum(axis=0)
    dconv = maxpool1d_backward(dx, ec["argmax"], POOL)
    _, g["embed.conv.weight"], g["embed.conv.bias"] = conv1d_backward(
        dconv, ec["sig"], p["embed.conv.weight"], CONV_PAD, 1)
    return g


# -- checkpoint container ---------------------------------------------------

MAGIC = "NILMCKPT 1"


def save_checkpoint(path, model, meta=None):
    """Write a header-plus-blob checkpoint.

    Header lines (UTF-8 text): magic, ``config <json>``, ``arch_hash <hex>``,
    ``meta <json>``, one ``tensor <name> <shape> <offset> <precision>`` per
    parameter, ``end``. The little-endian parameter blob follows.
    """
    with open(path, "wb") as fh:
        fh.write(checkpoint_bytes(model, meta))


def checkpoint_bytes(model, meta=None):
    cfg = model.config
    lines = [MAGIC,
             "config " + json.dumps(cfg.to_dict(), sort_keys=True),
             "arch_hash " + cfg.architecture_hash(),
             "meta " + json.dumps(meta or {}, sort_keys=True)]
    blob = io.BytesIO()
    for name in parameter_shapes(cfg):
        arr = model.params[name]
        le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        shape = ",".join(str(s) for s in arr.shape)
        lines.append(f"tensor {name} {shape} {blob.tell()} {arr.dtype.name}")
        blob.write(le.tobytes(order="C"))
    lines.append("end")
    header = ("\n".join(lines) + "\n").encode()
    return struct.pack("<Q", len(header)) + header + blob.getvalue()


def load_checkpoint(path):
    """Returns ``(model, meta)``."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 8:
        raise DataError(f"{path}: truncated checkpoint")
    (hlen,) = struct.unpack("<Q", raw[:8])
    header = raw[8:8 + hlen].decode().splitlines()
    data = raw[8 + hlen:]
    if not header or header[0] != MAGIC:
        raise DataError(f"{path}: not a checkpoint file")
    cfg = meta = arch = None
    params = {}
    for line in header[1:]:
        kind, _, rest = line.partition(" ")
        if kind == "config":
            cfg = ModelConfig.from_dict(json.loads(rest))
        elif kind == "arch_hash":
            arch = rest
        elif kind == "meta":
            meta = json.loads(rest)
        elif kind == "tensor":
            name, shape, offset, prec = rest.split(" ")
            shape = tuple(int(s) for s in shape.split(",") if s)
            dt = np.dtype(prec).newbyteorder("<")
            count = int(np.prod(shape)) if shape else 1
            arr = np.frombuffer(data, dtype=dt, count=count, offset=int(offset))
            params[name] = arr.reshape(shape).astype(np.dtype(prec))
        elif kind == "end":
            break
    if cfg is None:
        raise DataError(f"{path}: checkpoint header lacks a config line")
    if arch != cfg.architecture_hash():
        raise DataError(f"{path}: architecture hash mismatch")
    return NilmModel(cfg, params), meta
