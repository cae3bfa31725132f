"""Finite-difference verification of the full model's hand-written gradients."""

from dataclasses import dataclass

import numpy as np

from .model import ModelConfig, NilmModel
from .tensor import SeededRng, finite_diff_grad, max_relative_error
from .training import LossConfig, MaskingScheme, apply_mask, compute_loss

ALL_MODES = ("standard", "fixed:1", "fixed:1/2", "raw", "meta")


@dataclass
class GradcheckResult:
    mode: str
    errors: dict  # parameter name -> max relative error

    @property
    def worst(self):
        return max(self.errors.values())

    @property
    def worst_param(self):
        return max(self.errors, key=self.errors.get)


def _problem(cfg, batch, seed):
    rng = SeededRng(seed, stream=99)
    agg = rng.normal(0.0, 1.0, (batch, cfg.window_len))
    target = rng.random((batch, cfg.window_len))
    status = (rng.random((batch, cfg.window_len)) < 0.5).astype(np.float64)
    masked, pos = apply_mask(agg, MaskingScheme(0.5), rng.substream(1))
    return masked, target, status, pos


def model_gradcheck(mode, window_len=32, hidden=8, batch=2, seed=0, eps=1e-5,
                    params=None, rel_floor=1e-3):
    """Compare analytic and central-difference gradients of the composite loss.

    Runs in float64 with dropout active under a fixed rng, so the dropout
    masks are identical in every perturbed evaluation.
    """
    cfg = ModelConfig(window_len=window_len, hidden=hidden, mode=mode, seed=seed,
                      precision="float64", dropout=0.1)
    model = NilmModel(cfg)
    x, target, status, pos = _problem(cfg, batch, seed)
    loss_cfg = LossConfig()

    def evaluate():
        res = model.forward(x, training=True, rng=SeededRng(seed, stream=7))
        return res, compute_loss(res.power, target, res.status_logits, status, pos, loss_cfg)

    res, loss = evaluate()
    grads = model.backward(res, loss.d_power, loss.d_status)
    errors = {}
    for name in params or list(model.params):
        orig = model.params[name]

        def f(p, name=name):
            model.params[name] = p
            return evaluate()[1].total

        numeric = finite_diff_grad(f, orig, eps)
        model.params[name] = orig
        errors[name] = max_relative_error(grads[name], numeric, rel_floor=rel_floor)
    return GradcheckResult(str(cfg.mode), errors)
