"""Masked sequence-to-sequence training and evaluation."""

import csv
import io
import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError, DivergenceError, DomainError, NumericError, ShapeError
from .metrics import report
from .tensor import SeededRng, sigmoid

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class LossConfig:
    kl_weight: float = 0.1
    margin_weight: float = 1.0
    l1_on_weight: float = 1e-3
    kl_temperature: float = 0.1

    def __post_init__(self):
        if min(self.kl_weight, self.margin_weight, self.l1_on_weight) < 0:
            raise DomainError("loss weights must be non-negative")
        if self.kl_temperature <= 0:
            raise DomainError("kl_temperature must be positive")


@dataclass(frozen=True)
class MaskingScheme:
    ratio: float = 0.3
    mask_value: float = -1.0

    def __post_init__(self):
        if not 0.0 < self.ratio < 1.0:
            raise DomainError(f"masking ratio must be in (0, 1), got {self.ratio}")


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 64
    lr: float = 1e-4
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.01
    clip_norm: float = 1.0
    loss: LossConfig = field(default_factory=LossConfig)
    masking: MaskingScheme = field(default_factory=MaskingScheme)
    seed: int = 0
    log_wallclock: bool = True


# -- masking ----------------------------------------------------------------

def apply_mask(batch, scheme, rng):
    """Independently mask each position with probability ``scheme.ratio``.

    Returns ``(masked_input, mask_positions)``.
    """
    batch = np.asarray(batch)
    positions = rng.random(batch.shape) < scheme.ratio
    masked = np.where(positions, np.asarray(scheme.mask_value, dtype=batch.dtype), batch)
    return masked, positions


# -- loss -------------------------------------------------------------------

@dataclass
class LossResult:
    total: float
    components: dict  # mse, kl, margin, l1on (unweighted)
    d_power: np.ndarray
    d_status: np.ndarray
    fallback: bool = False


def _masked_log_softmax(z, m):
    zm = np.where(m, z, -np.inf)
    mx = zm.max(axis=1, keepdims=True)
    mx = np.where(np.isfinite(mx), mx, 0.0)
    e = np.where(m, np.exp(np.where(m, z, 0.0) - mx), 0.0)
    s = e.sum(axis=1, keepdims=True)
    logp = np.where(m, z - mx - np.log(np.where(s > 0, s, 1.0)), 0.0)
    return logp, np.where(m, np.exp(logp), 0.0)


def compute_loss(pred_power, true_power, status_logits, true_status, mask_positions, cfg=LossConfig()):
    """Composite loss over masked positions and its gradients.

    total = mse + kl_weight * kl + margin_weight * softmargin + l1_on_weight * l1on

    ``kl`` compares per-window softmax distributions of true and predicted
    power over the masked positions of that window (at ``kl_temperature``),
    summed over windows and divided by the masked-position count. ``l1on``
    averages ``|pred - true|`` over masked positions whose true status is on.
    """
    p = np.asarray(pred_power, dtype=np.float64)
    t = np.asarray(true_power, dtype=np.float64)
    logit = np.asarray(status_logits, dtype=np.float64)
    s = np.asarray(true_status, dtype=np.float64)
    m = np.asarray(mask_positions, dtype=bool)
    if not (p.shape == t.shape == logit.shape == s.shape == m.shape) or p.ndim != 2:
        raise ShapeError("loss inputs must share one [B, L] shape")
    fallback = False
    if not m.any():
        log.info("batch drew no masked positions; using every position")
        m = np.ones_like(m)
        fallback = True
    cnt = float(m.sum())

    diff = np.where(m, p - t, 0.0)
    mse = float((diff * diff).sum() / cnt)
    d_p = 2.0 * diff / cnt

    temp = cfg.kl_temperature
    logq_t, prob_t = _masked_log_softmax(t / temp, m)
    logq_p, prob_p = _masked_log_softmax(p / temp, m)
    kl = float(np.where(m, prob_t * (logq_t - logq_p), 0.0).sum() / cnt)
    d_p += cfg.kl_weight * (prob_p - prob_t) / temp / cnt

    y = 2.0 * s - 1.0
    margin_terms = np.logaddexp(0.0, -y * logit)
    margin = float(np.where(m, margin_terms, 0.0).sum() / cnt)
    d_s = cfg.margin_weight * np.where(m, -y * sigmoid(-y * logit), 0.0) / cnt

    on = m & (s > 0.5)
    n_on = float(on.sum())
    if n_on > 0:
        l1on = float(np.abs(np.where(on, p - t, 0.0)).sum() / n_on)
        d_p += cfg.l1_on_weight * np.where(on, np.sign(p - t), 0.0) / n_on
    else:
        l1on = 0.0

    comps = {"mse": mse, "kl": kl, "margin": margin, "l1on": l1on}
    total = mse + cfg.kl_weight * kl + cfg.margin_weight * margin + cfg.l1_on_weight * l1on
    return LossResult(total, comps, d_p, d_s, fallback)


def weighted_total(components, cfg):
    return (components["mse"] + cfg.kl_weight * components["kl"]
            + cfg.margin_weight * components["margin"] + cfg.l1_on_weight * components["l1on"])


# -- optimiser --------------------------------------------------------------

@dataclass
class OptimizerState:
    lr: float = 1e-4
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.01
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adamw_step(params, grads, state):
    """In-place AdamW update with decoupled weight decay."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for parameter {name!r}")
    state.step += 1
    b1, b2 = state.betas
    bc1 = 1.0 - b1 ** state.step
    bc2 = 1.0 - b2 ** state.step
    for name, g in grads.items():
        p = params[name]
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        if state.weight_decay:
            p *= 1.0 - state.lr * state.weight_decay
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
    return params, state


def clip_global_norm(grads, max_norm):
    total = math.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values()))
    if max_norm and total > max_norm:
        scale = max_norm / (total + 1e-12)
        for g in grads.values():
            g *= scale
    return total


# -- training loop ----------------------------------------------------------

@dataclass
class EpochLog:
    epoch: int
    total_loss: float
    mse: float
    kl: float
    margin: float
    l1on: float
    taus: list
    seconds: float
    tau_guard_events: int = 0


def _mean_tau(trace):
    return float(np.mean(trace.tau))


def train(model, dataset, epochs, cfg=TrainConfig(), rng=None, on_epoch=None):
    """Train ``model`` in place; returns ``(model, epoch_logs)``.

    Batch order depends only on ``(seed, epoch)`` so every attention variant
    trained with the same seed sees identical batches.
    """
    if len(dataset) == 0:
        raise DataError("cannot train on an empty dataset")
    if dataset.window_len != model.config.window_len:
        raise ShapeError(f"dataset window {dataset.window_len} != model window {model.config.window_len}")
    rng = rng or SeededRng(cfg.seed)
    state = OptimizerState(cfg.lr, tuple(cfg.betas), cfg.eps, cfg.weight_decay)
    dtype = model.config.dtype
    agg_all = dataset.aggregate.astype(dtype)
    n = len(dataset)
    logs = []
    for epoch in range(1, epochs + 1):
        t0 = time.perf_counter()
        snapshot = {k: v.copy() for k, v in model.params.items()}
        order = rng.substream(0, epoch).permutation(n)
        sums = {"mse": 0.0, "kl": 0.0, "margin": 0.0, "l1on": 0.0}
        tau_sums = [0.0] * model.config.layers
        guards = 0
        batches = 0
        for bi, start in enumerate(range(0, n, cfg.batch_size)):
            idx = order[start:start + cfg.batch_size]
            brng = rng.substream(1, epoch, bi)
            masked, pos = apply_mask(agg_all[idx], cfg.masking, brng.substream(0))
            try:
                res = model.forward(masked, training=True, rng=brng.substream(1))
                loss = compute_loss(res.power, dataset.target[idx], res.status_logits,
                                    dataset.status[idx], pos, cfg.loss)
            except (DomainError, NumericError) as e:
                # overflowing weights surface as NaN temperatures or similar
                raise DivergenceError(f"forward pass failed at epoch {epoch}, batch {bi}: {e}",
                                      last_good=snapshot, epoch=epoch) from None
            if not math.isfinite(loss.total):
                raise DivergenceError(f"loss became {loss.total} at epoch {epoch}, batch {bi}",
                                      last_good=snapshot, epoch=epoch)
            grads = model.backward(res, loss.d_power, loss.d_status)
            clip_global_norm(grads, cfg.clip_norm)
            try:
                adamw_step(model.params, grads, state)
            except NumericError as e:
                raise DivergenceError(str(e), last_good=snapshot, epoch=epoch) from None
            for k in sums:
                sums[k] += loss.components[k]
            for i, tr in enumerate(res.traces):
                tau_sums[i] += _mean_tau(tr)
                guards += int(tr.tau_guarded)
            batches += 1
        comps = {k: v / batches for k, v in sums.items()}
        entry = EpochLog(epoch, weighted_total(comps, cfg.loss), comps["mse"], comps["kl"],
                         comps["margin"], comps["l1on"], [t / batches for t in tau_sums],
                         time.perf_counter() - t0 if cfg.log_wallclock else 0.0, guards)
        if guards:
            log.warning("epoch %d: free temperature went non-positive in %d layer-batches", epoch, guards)
        logs.append(entry)
        if on_epoch is not None:
            on_epoch(entry)
    return model, logs


def epoch_log_csv(logs, layers):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["epoch", "total_loss", "mse", "kl", "margin", "l1on"]
               + [f"tau_layer{i + 1}" for i in range(layers)] + ["seconds"])
    for e in logs:
        w.writerow([e.epoch] + [repr(float(v)) for v in (e.total_loss, e.mse, e.kl, e.margin, e.l1on)]
                   + [repr(float(t)) for t in e.taus] + [f"{e.seconds:.6f}"])
    return buf.getvalue()


# -- evaluation -------------------------------------------------------------

def evaluate(model, dataset, appliance_spec=None):
    """Metrics on un-masked windows.

    ``model`` is anything with ``predict(aggregate) -> normalised power``.
    Predicted power is denormalised and clamped at zero; predicted status is
    that power thresholded at the appliance's on-threshold.
    """
    if len(dataset) == 0:
        raise DataError("cannot evaluate an empty dataset")
    spec = appliance_spec or dataset.appliance
    pred = np.asarray(model.predict(dataset.aggregate), dtype=np.float64)
    pred_w = np.maximum(dataset.stats.denormalize_power(pred), 0.0)
    true_w = dataset.stats.denormalize_power(dataset.target)
    return report(pred_w, true_w, pred_w >= spec.on_threshold_watts, dataset.status > 0.5,
                  fallback_scale=spec.cutoff_watts)


def tau_summary(model, aggregate):
    """Mean temperature per layer for an inference pass (diagnostic)."""
    res = model.forward(np.asarray(aggregate, dtype=model.config.dtype))
    return [_mean_tau(t) for t in res.traces]
