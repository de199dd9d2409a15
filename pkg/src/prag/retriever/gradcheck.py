"""Central finite-difference check of the hand-written backward pass."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from ..rng import substream
from .model import FROZEN, Batch, RetrieverModel, activation_pattern, forward, joint_loss, \
    loss_and_grads


@dataclass
class GradCheckReport:
    max_rel_error: float
    per_tensor: dict[str, float] = field(default_factory=dict)
    n_checked: int = 0
    n_kinks: int = 0  # coordinates skipped because a ReLU/fallback branch flipped

    def worst(self) -> tuple[str, float]:
        name = max(self.per_tensor, key=self.per_tensor.get)
        return name, self.per_tensor[name]


def _mean_loss(model: RetrieverModel, batch: Batch) -> tuple[float, bytes]:
    cfg = model.config
    Q, r_hat, _, cache = forward(model, batch)
    total, _, _ = joint_loss(Q, batch.target, r_hat, batch.rating,
                             (cfg.w_retrieve, cfg.w_rating))
    return float(total.mean()), activation_pattern(cache)


def _as64(batch: Batch) -> Batch:
    return Batch(batch.E.astype(np.float64), batch.side, batch.mask, batch.rids, batch.u_v,
                 batch.i_v, batch.u_b, batch.i_b, batch.ent,
                 batch.target.astype(np.float64), batch.rating.astype(np.float64))


def gradient_check(model: RetrieverModel, batch: Batch, epsilon: float = 1e-3,
                   max_coords: int | None = 64, seed: int = 0,
                   grad_hook: Callable[[dict, dict], None] | None = None) -> GradCheckReport:
    """Compare analytic gradients of the mean joint loss with central differences.

    Runs in float64.  Tensors larger than ``max_coords`` entries are checked on a
    seeded coordinate sample.  Coordinates where the perturbation flips a ReLU
    or the pooling fallback are not differentiable there and are skipped.
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    m = model.astype(np.float64)
    batch = _as64(batch)
    _, gp, gr = loss_and_grads(m, batch)
    if grad_hook is not None:
        grad_hook(gp, gr)
    _, base_pattern = _mean_loss(m, batch)
    rng = substream(seed, "gradcheck")
    report = GradCheckReport(0.0)
    tensors = [(m.params, gp, k) for k in m.params] + \
              [(m.rparams, gr, k) for k in m.rparams if k not in FROZEN]
    for store, grads, name in tensors:
        arr = store[name]
        flat = arr.reshape(-1)
        n = flat.size
        coords = np.arange(n) if max_coords is None or n <= max_coords \
            else np.sort(rng.choice(n, size=max_coords, replace=False))
        g_a = grads[name].reshape(-1)
        worst = 0.0
        for c in coords:
            orig = flat[c]
            flat[c] = orig + epsilon
            lp, pat_p = _mean_loss(m, batch)
            flat[c] = orig - epsilon
            lm, pat_m = _mean_loss(m, batch)
            flat[c] = orig
            if pat_p != base_pattern or pat_m != base_pattern:
                report.n_kinks += 1
                continue
            g_n = (lp - lm) / (2.0 * epsilon)
            ga = float(g_a[c])
            err = abs(ga - g_n) / max(abs(ga), abs(g_n), 1e-8)
            worst = max(worst, err)
            report.n_checked += 1
        report.per_tensor[("rating." if store is m.rparams else "") + name] = worst
        report.max_rel_error = max(report.max_rel_error, worst)
    return report
