"""Adversarial losses as pure functions of critic outputs and gradient
norms, plus small closed-form oracles (optimal discriminator, exact discrete
earth mover's distance) used to validate the minimax machinery numerically.

Every loss accepts torch tensors and is differentiable, so autodiff gradients
can be checked against finite differences. The discrete oracles work in
float64 numpy for exactness.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

GRAD_NORM_EPS = 1e-12


@dataclass(frozen=True)
class CriticOutputs:
    """Per-sample critic scores on the three conditioning streams."""

    on_real_matched: torch.Tensor
    on_fake: torch.Tensor
    on_real_mismatched: torch.Tensor

    def __post_init__(self):
        n = self.on_real_matched.shape
        if self.on_fake.shape != n or self.on_real_mismatched.shape != n:
            raise ValueError("critic output streams must have equal lengths")

    def require_probabilities(self):
        for name in ("on_real_matched", "on_fake", "on_real_mismatched"):
            v = getattr(self, name)
            if (v <= 0).any() or (v >= 1).any():
                raise ValueError(f"{name} must lie strictly inside (0, 1)")


@dataclass(frozen=True)
class PenaltyInputs:
    """Interpolated points with the critic's per-sample gradient norms."""

    interpolated_points: torch.Tensor
    embeddings: torch.Tensor
    gradient_norms_x: torch.Tensor
    gradient_norms_e: torch.Tensor

    def __post_init__(self):
        if (self.gradient_norms_x < 0).any() or (self.gradient_norms_e < 0).any():
            raise ValueError("gradient norms must be nonnegative")


@dataclass(frozen=True)
class DiscreteDistributionPair:
    """Two discrete distributions on a shared support."""

    support: np.ndarray
    p: np.ndarray
    q: np.ndarray

    def __post_init__(self):
        support = np.asarray(self.support, dtype=np.float64)
        p = np.asarray(self.p, dtype=np.float64)
        q = np.asarray(self.q, dtype=np.float64)
        if not (support.shape == p.shape == q.shape) or support.ndim != 1:
            raise ValueError("support, p, q must be 1-D arrays of equal length")
        if (p < 0).any() or (q < 0).any():
            raise ValueError("p and q must be nonnegative")
        for name, v in (("p", p), ("q", q)):
            if abs(v.sum() - 1.0) > 1e-9:
                raise ValueError(f"{name} must sum to 1 within 1e-9")
        object.__setattr__(self, "support", support)
        object.__setattr__(self, "p", p)
        object.__setattr__(self, "q", q)


def _as_tensor(values) -> torch.Tensor:
    t = torch.as_tensor(values)
    return t.double() if not t.is_floating_point() else t


def gan_generator_loss_nonsaturating(on_fake) -> torch.Tensor:
    """Non-saturating generator loss -mean(log D(G(z), e))."""
    on_fake = _as_tensor(on_fake)
    if (on_fake <= 0).any() or (on_fake >= 1).any():
        raise ValueError("discriminator outputs must lie strictly inside (0, 1)")
    return -torch.log(on_fake).mean()


def gan_cls_discriminator_loss(c: CriticOutputs) -> torch.Tensor:
    """Matching-aware discriminator loss for the probability-head family.

    Real matching pairs are pushed toward 1; generated pairs and real images
    paired with wrong captions share the fake label, each at half weight.
    """
    c.require_probabilities()
    real_term = -torch.log(c.on_real_matched).mean()
    fake_term = torch.log(1.0 - c.on_fake).mean()
    mismatch_term = torch.log(1.0 - c.on_real_mismatched).mean()
    return real_term - 0.5 * (fake_term + mismatch_term)


def wgan_cls_critic_loss(
    c: CriticOutputs, alpha: float, lam: float, penalty
) -> torch.Tensor:
    """Conditional Wasserstein critic loss.

    The critic estimates two distances at once: matched-real versus generated
    and matched-real versus mismatched-real, the latter weighted by ``alpha``.
    ``penalty`` is the precomputed Lipschitz penalty, weighted by ``lam``.
    """
    if alpha < 0 or lam < 0:
        raise ValueError("alpha and lam must be nonnegative")
    return (
        c.on_fake.mean()
        + alpha * c.on_real_mismatched.mean()
        - (1.0 + alpha) * c.on_real_matched.mean()
        + lam * penalty
    )


def wgan_cls_generator_loss(on_fake, kl_term, rho: float) -> torch.Tensor:
    """Wasserstein generator loss -mean(D) plus the weighted conditioning KL."""
    on_fake = _as_tensor(on_fake)
    if float(torch.as_tensor(kl_term).detach()) < 0:
        raise ValueError("kl_term must be nonnegative")
    return -on_fake.mean() + rho * kl_term


def lipschitz_penalty_lp(norms_x, norms_e) -> torch.Tensor:
    """One-sided Lipschitz penalty: only gradient norms above one are
    penalized, separately for the image input and the embedding input."""
    norms_x = _as_tensor(norms_x)
    norms_e = _as_tensor(norms_e)
    if (norms_x < 0).any() or (norms_e < 0).any():
        raise ValueError("gradient norms must be nonnegative")
    return (
        torch.clamp(norms_x - 1.0, min=0.0) ** 2
        + torch.clamp(norms_e - 1.0, min=0.0) ** 2
    ).mean()


def gradient_penalty_gp(norms) -> torch.Tensor:
    """Two-sided penalty pulling gradient norms toward one."""
    norms = _as_tensor(norms)
    if (norms < 0).any():
        raise ValueError("gradient norms must be nonnegative")
    return ((norms - 1.0) ** 2).mean()


def interpolate_real_fake(real, fake, t) -> torch.Tensor:
    """Rowwise convex combination t * fake + (1 - t) * real."""
    real = _as_tensor(real)
    fake = _as_tensor(fake)
    t = _as_tensor(t)
    if real.shape != fake.shape:
        raise ValueError("real and fake batches must share a shape")
    if t.ndim != 1 or t.shape[0] != real.shape[0]:
        raise ValueError("one interpolation factor per batch row required")
    if (t < 0).any() or (t > 1).any():
        raise ValueError("interpolation factors must lie in [0, 1]")
    t = t.reshape(-1, *([1] * (real.ndim - 1)))
    return t * fake + (1.0 - t) * real


def lsgan_losses(
    c: CriticOutputs, a: float, b: float, cc: float, conditional: bool
):
    """Least-squares critic and generator losses with labels ``a`` (fake),
    ``b`` (real) and ``cc`` (generator target). The conditional form also
    pushes real images with mismatching captions toward the fake label."""
    critic_loss = ((c.on_real_matched - b) ** 2).mean() + (
        (c.on_fake - a) ** 2
    ).mean()
    if conditional:
        critic_loss = critic_loss + ((c.on_real_mismatched - a) ** 2).mean()
    generator_loss = ((c.on_fake - cc) ** 2).mean()
    return critic_loss, generator_loss


def critic_gradient_norms(critic_fn, images: torch.Tensor, embeddings: torch.Tensor):
    """Per-sample Euclidean norms of the critic gradient with respect to its
    image and embedding inputs, evaluated with graph retention so the result
    can itself be differentiated.

    A small epsilon inside the square root keeps the norm differentiable at
    zero gradient.
    """
    images = images.detach().requires_grad_(True)
    embeddings = embeddings.detach().requires_grad_(True)
    scores = critic_fn(images, embeddings)
    grad_x, grad_e = torch.autograd.grad(
        outputs=scores,
        inputs=(images, embeddings),
        grad_outputs=torch.ones_like(scores),
        create_graph=True,
        retain_graph=True,
    )
    norms_x = torch.sqrt(grad_x.flatten(1).pow(2).sum(dim=1) + GRAD_NORM_EPS)
    norms_e = torch.sqrt(grad_e.flatten(1).pow(2).sum(dim=1) + GRAD_NORM_EPS)
    return norms_x, norms_e


# ---------------------------------------------------------------------------
# Discrete theory oracles
# ---------------------------------------------------------------------------


def optimal_discriminator_discrete(d: DiscreteDistributionPair) -> np.ndarray:
    """The pointwise optimal discriminator p / (p + q) on a discrete pair."""
    total = d.p + d.q
    if (total <= 0).any():
        raise ValueError("support points with p = q = 0 are not allowed")
    return d.p / total


def value_function_discrete(d: DiscreteDistributionPair, discriminator) -> float:
    """Two-player payoff sum(p log D) + sum(q log(1 - D)).

    Uses the 0 * log 0 = 0 convention, so D may touch 0 or 1 only where the
    corresponding mass vanishes.
    """
    dd = np.asarray(discriminator, dtype=np.float64)
    if dd.shape != d.p.shape:
        raise ValueError("discriminator vector must match the support size")
    if (dd < 0).any() or (dd > 1).any():
        raise ValueError("discriminator values must lie in [0, 1]")
    if ((dd == 0) & (d.p > 0)).any():
        raise ValueError("D = 0 on a point with real mass gives -inf value")
    if ((dd == 1) & (d.q > 0)).any():
        raise ValueError("D = 1 on a point with generated mass gives -inf value")
    value = 0.0
    for pi, qi, di in zip(d.p, d.q, dd):
        if pi > 0:
            value += pi * np.log(di)
        if qi > 0:
            value += qi * np.log(1.0 - di)
    return float(value)


def jensen_shannon_divergence(p, q) -> float:
    """JSD(p || q) = 0.5 KL(p || m) + 0.5 KL(q || m) with m the midpoint."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    m = 0.5 * (p + q)

    def _kl(a, b):
        mask = a > 0
        return float(np.sum(a[mask] * np.log(a[mask] / b[mask])))

    return 0.5 * _kl(p, m) + 0.5 * _kl(q, m)


def discrete_wasserstein_1d(d: DiscreteDistributionPair) -> float:
    """Exact 1-D earth mover's distance via the CDF-difference formula.

    Requires the support to be sorted ascending; serves as the primal oracle
    for critic-based dual estimates.
    """
    if (np.diff(d.support) <= 0).any():
        raise ValueError("support must be sorted strictly ascending")
    cdf_gap = np.cumsum(d.p - d.q)[:-1]
    return float(np.sum(np.abs(cdf_gap) * np.diff(d.support)))
