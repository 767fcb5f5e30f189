"""Training objectives.

Every term is a pure function of network outputs. Pixel and feature losses are
means so the weights do not depend on resolution. Discriminator probabilities
are clamped to ``[EPS, 1 - EPS]`` before logarithms, and generator-side
adversarial terms use the non-saturating ``-log D`` form.

The code regressor Q maximises a variational lower bound on the conditional
mutual information between the expression code and the generated image::

    I(c; x_hat | y) >= E[log Q(c | x_hat, y)] + H(c | y)

The entropy term is constant because the code distribution is fixed, so only
the expected log-likelihood is trained. :func:`mi_bound_toy_check` evaluates
both sides on a finite discrete toy problem.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np
import torch

EPS = 1e-7
LOG_2PI = math.log(2.0 * math.pi)
TERMS = ("pixel", "id", "q", "adv_img", "adv_z", "tv")


class NonFiniteLossError(FloatingPointError):
    def __init__(self, term: str, value):
        super().__init__(f"non-finite value for loss term {term!r}: {value}")
        self.term = term


@dataclass(frozen=True)
class LossWeights:
    identity: float = 1.0
    q: float = 1.0
    adv_img: float = 0.01
    adv_z: float = 0.01
    tv: float = 0.001
    beta: tuple[float, ...] = (1.0, 1.0, 1.0, 1.0, 1.0)
    pixel: float = 1.0

    def __post_init__(self):
        for name in ("identity", "q", "adv_img", "adv_z", "tv", "pixel"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v >= 0):
                raise ValueError(f"weight {name}={v} must be finite and >= 0")
        if any(not (math.isfinite(b) and b >= 0) for b in self.beta):
            raise ValueError(f"layer weights {self.beta} must be finite and >= 0")

    def factor(self, term: str) -> float:
        return {"pixel": self.pixel, "id": self.identity, "q": self.q,
                "adv_img": self.adv_img, "adv_z": self.adv_z, "tv": self.tv}[term]


@dataclass
class LossReport:
    terms: dict[str, float]
    total: float
    weights: LossWeights = field(repr=False, default_factory=LossWeights)

    def record(self, **extra) -> dict:
        return {**extra, **self.terms, "total": self.total}


def pixel_loss(x_hat: torch.Tensor, x: torch.Tensor) -> torch.Tensor:
    if x_hat.shape != x.shape:
        raise ValueError(f"shape mismatch {tuple(x_hat.shape)} vs {tuple(x.shape)}")
    return (x_hat - x).abs().mean()


def feature_loss(feats_hat, feats, beta) -> torch.Tensor:
    if len(feats_hat) != len(beta) or len(feats) != len(beta):
        raise ValueError(f"{len(beta)} layer weights for {len(feats_hat)} feature maps")
    total = feats_hat[0].new_zeros(())
    for b, fh, f in zip(beta, feats_hat, feats):
        total = total + b * (fh - f).abs().mean()
    return total


def identity_loss(x_hat, x, phi, beta) -> torch.Tensor:
    """Weighted L1 distance between feature maps of ``phi`` (any callable returning a list)."""
    return feature_loss(phi(x_hat), phi(x), beta)


def q_loss(mu: torch.Tensor, c: torch.Tensor, labels: torch.Tensor, K: int) -> torch.Tensor:
    """Unit-variance factored Gaussian NLL of the code, averaged over the batch.

    ``mu`` of width ``d`` is compared with the active block of ``c``; ``mu`` of
    width ``K*d`` (all branches) is compared with the full code.
    """
    if torch.isnan(mu).any() or torch.isnan(c).any():
        raise NonFiniteLossError("q", "NaN input")
    d = c.shape[-1] // K
    if mu.shape[-1] == d:
        target = c.reshape(c.shape[0], K, d)[torch.arange(c.shape[0]), labels]
    elif mu.shape[-1] == c.shape[-1]:
        target = c
    else:
        raise ValueError(f"Q output width {mu.shape[-1]} matches neither d={d} nor K*d={c.shape[-1]}")
    nll = 0.5 * ((target - mu) ** 2 + LOG_2PI).sum(-1)
    return nll.mean()


def _clamped_log(p):
    return torch.log(p.clamp(EPS, 1.0 - EPS))


def adversarial_losses(p_real: torch.Tensor, p_fake: torch.Tensor):
    """``(discriminator cross-entropy, non-saturating generator loss)`` from probabilities."""
    d_loss = -_clamped_log(p_real).mean() - _clamped_log(1.0 - p_fake).mean()
    g_loss = -_clamped_log(p_fake).mean()
    return d_loss, g_loss


def adv_z_losses(p_prior: torch.Tensor, p_encoded: torch.Tensor):
    """Identity-code adversarial terms; ``p_prior`` scores samples of U(-1, 1)^n_z."""
    return adversarial_losses(p_prior, p_encoded)


def adv_img_losses(p_real: torch.Tensor, p_fake: torch.Tensor):
    """Label-conditioned image adversarial terms (probabilities of ``D(x, y)``, ``D(x_hat, y)``)."""
    return adversarial_losses(p_real, p_fake)


def tv_loss(x: torch.Tensor) -> torch.Tensor:
    """Anisotropic total variation: summed |dx| + |dy| divided by the pixel count."""
    if x.shape[-1] < 2 and x.shape[-2] < 2:
        return x.new_zeros(())
    dh = (x[..., :, 1:] - x[..., :, :-1]).abs().sum()
    dv = (x[..., 1:, :] - x[..., :-1, :]).abs().sum()
    return (dh + dv) / x.numel()


def weighted_sum(components: Mapping[str, torch.Tensor], weights: LossWeights) -> torch.Tensor:
    """Differentiable weighted total over the terms present in ``components``."""
    total = None
    for term in TERMS:
        if term in components:
            part = weights.factor(term) * components[term]
            total = part if total is None else total + part
    if total is None:
        raise ValueError("no loss terms given")
    return total


def total_loss(components: Mapping[str, float], weights: LossWeights) -> LossReport:
    """Report the weighted total of the given terms (missing terms count as zero).

    The total is the correctly rounded sum (``math.fsum``) of the weighted
    terms, so it is independent of summation order and reproducible bitwise
    from the stored components.
    """
    terms = {}
    for term in TERMS:
        v = components.get(term, 0.0)
        v = float(v.detach()) if isinstance(v, torch.Tensor) else float(v)
        if not math.isfinite(v):
            raise NonFiniteLossError(term, v)
        terms[term] = v
    unknown = set(components) - set(TERMS)
    if unknown:
        raise KeyError(f"unknown loss terms {sorted(unknown)}")
    total = math.fsum(weights.factor(t) * terms[t] for t in TERMS)
    return LossReport(terms, total, weights)


# ---------------------------------------------------------------------------
# discrete variational bound check


def mi_bound_toy_check(joint: np.ndarray, q_table: np.ndarray) -> tuple[float, float]:
    """Variational lower bound vs exact conditional MI on a discrete toy.

    ``joint[c, x]`` is P(c, x | y) for a fixed label; ``q_table[c, x]`` is an
    auxiliary conditional Q(c | x) (each column sums to one). Returns
    ``(E[log Q(c|x)] + H(c|y), I(c; x | y))`` in nats.
    """
    joint = np.asarray(joint, dtype=np.float64)
    q_table = np.asarray(q_table, dtype=np.float64)
    if joint.ndim != 2 or q_table.shape != joint.shape:
        raise ValueError("joint and q_table must be matching 2-D tables")
    if max(joint.shape) > 16:
        raise ValueError("toy supports at most 16 states per variable")
    if np.any(joint < 0) or abs(joint.sum() - 1.0) > 1e-12:
        raise ValueError("joint distribution is not normalized")
    if np.any(q_table < 0) or np.any(np.abs(q_table.sum(0) - 1.0) > 1e-12):
        raise ValueError("q_table columns must be normalized distributions over c")
    p_c = joint.sum(1)
    p_x = joint.sum(0)
    nz = joint > 0
    h_c = -np.sum(p_c[p_c > 0] * np.log(p_c[p_c > 0]))
    with np.errstate(divide="ignore"):
        log_q = np.log(q_table)
    if np.any(np.isinf(log_q[nz])):
        return -math.inf, _mutual_information(joint, p_c, p_x)
    bound = float(np.sum(joint[nz] * log_q[nz]) + h_c)
    return bound, _mutual_information(joint, p_c, p_x)


def _mutual_information(joint, p_c, p_x) -> float:
    mi = 0.0
    for i in range(joint.shape[0]):
        for j in range(joint.shape[1]):
            if joint[i, j] > 0:
                mi += joint[i, j] * math.log(joint[i, j] / (p_c[i] * p_x[j]))
    return mi
