"""Conditioning pipeline: compression of raw caption embeddings and the
conditioning-augmentation head (reparametrized Gaussian sampling with a KL
regularizer toward the standard normal).

All operations are pure functions of tensors (plus small stateless modules),
safe to call from any number of threads.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

LEAKY_SLOPE = 0.2

KL_STANDARD_TO_MODEL = "standard-to-model"
KL_MODEL_TO_STANDARD = "model-to-standard"
KL_DIRECTIONS = (KL_STANDARD_TO_MODEL, KL_MODEL_TO_STANDARD)


@dataclass(frozen=True)
class AugmentedEmbedding:
    """A reparametrized conditioning vector with its Gaussian parameters.

    ``sample == mu + sigma * epsilon`` holds exactly, elementwise, and
    ``sigma`` is strictly positive.
    """

    sample: torch.Tensor
    mu: torch.Tensor
    sigma: torch.Tensor
    epsilon: torch.Tensor


def compress_embedding(values: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor):
    """Affine map followed by a leaky ReLU with slope 0.2.

    ``values`` has trailing dimension N_phi, ``weight`` is N_c x N_phi and
    ``bias`` is N_c, mirroring ``torch.nn.Linear`` conventions.
    """
    values = torch.as_tensor(values)
    if values.shape[-1] != weight.shape[1]:
        raise ValueError(
            f"embedding dim {values.shape[-1]} does not match weight input dim "
            f"{weight.shape[1]}"
        )
    if bias.shape[-1] != weight.shape[0]:
        raise ValueError("bias dimension does not match weight output dim")
    return torch.nn.functional.leaky_relu(
        values @ weight.T + bias, negative_slope=LEAKY_SLOPE
    )


class EmbeddingCompressor(nn.Module):
    """Fully connected compression of a raw caption embedding to N_c."""

    def __init__(self, embedding_dim: int, compressed_dim: int):
        super().__init__()
        self.fc = nn.Linear(embedding_dim, compressed_dim)

    def forward(self, values: torch.Tensor) -> torch.Tensor:
        return compress_embedding(values, self.fc.weight, self.fc.bias)


def augment_embedding(
    mu: torch.Tensor, sigma: torch.Tensor, epsilon: torch.Tensor
) -> AugmentedEmbedding:
    """Reparametrized sample ``mu + sigma * epsilon`` retaining all parts.

    Gradients flow to ``mu`` and ``sigma``; ``epsilon`` is treated as data
    and never receives a gradient.
    """
    if not torch.isfinite(epsilon).all():
        raise ValueError("epsilon must be finite")
    if epsilon.shape[-1] != mu.shape[-1]:
        raise ValueError("epsilon dimension does not match mu")
    if (sigma <= 0).any():
        raise ValueError("sigma must be strictly positive")
    epsilon = epsilon.detach()
    return AugmentedEmbedding(
        sample=mu + sigma * epsilon, mu=mu, sigma=sigma, epsilon=epsilon
    )


class ConditioningAugmenter(nn.Module):
    """Learned Gaussian around a caption embedding.

    Two fully connected heads with leaky ReLU activations produce the mean
    and the raw log-variance; the standard deviation is ``exp(0.5 * raw)``,
    which keeps it strictly positive.
    """

    def __init__(self, embedding_dim: int, compressed_dim: int):
        super().__init__()
        self.mu_head = nn.Linear(embedding_dim, compressed_dim)
        self.logvar_head = nn.Linear(embedding_dim, compressed_dim)
        self.compressed_dim = compressed_dim

    def forward(
        self, values: torch.Tensor, epsilon: torch.Tensor | None = None
    ) -> AugmentedEmbedding:
        """Sample an augmented conditioning vector.

        Passing ``epsilon=None`` draws fresh standard-normal noise; passing
        zeros yields the deterministic mean embedding used at evaluation time.
        """
        mu = torch.nn.functional.leaky_relu(
            self.mu_head(values), negative_slope=LEAKY_SLOPE
        )
        logvar = torch.nn.functional.leaky_relu(
            self.logvar_head(values), negative_slope=LEAKY_SLOPE
        )
        sigma = torch.exp(0.5 * logvar)
        if epsilon is None:
            epsilon = torch.randn_like(mu)
        return augment_embedding(mu, sigma, epsilon)

    def mean_embedding(self, values: torch.Tensor) -> torch.Tensor:
        """Deterministic conditioning (noise set to zero)."""
        return self.forward(values, epsilon=torch.zeros(
            (*values.shape[:-1], self.compressed_dim),
            dtype=values.dtype, device=values.device,
        )).sample


def ca_kl_regularizer(
    mu: torch.Tensor,
    sigma: torch.Tensor,
    direction: str = KL_STANDARD_TO_MODEL,
) -> torch.Tensor:
    """Closed-form KL divergence between the standard normal and the diagonal
    Gaussian N(mu, diag(sigma^2)).

    The default direction treats the standard normal as the reference
    distribution: 0.5 * sum_i [log sigma_i^2 + (1 + mu_i^2) / sigma_i^2 - 1].
    ``model-to-standard`` selects the reverse divergence
    0.5 * sum_i [mu_i^2 + sigma_i^2 - 1 - log sigma_i^2]. Both are
    nonnegative and vanish exactly at mu = 0, sigma = 1.

    Batched inputs (..., N_c) reduce over the last axis and return the mean
    over leading axes.
    """
    mu = torch.as_tensor(mu)
    sigma = torch.as_tensor(sigma)
    if (sigma <= 0).any():
        raise ValueError("sigma must be strictly positive")
    log_var = 2.0 * torch.log(sigma)
    if direction == KL_STANDARD_TO_MODEL:
        per_dim = log_var + (1.0 + mu**2) / sigma**2 - 1.0
    elif direction == KL_MODEL_TO_STANDARD:
        per_dim = mu**2 + sigma**2 - 1.0 - log_var
    else:
        raise ValueError(f"unknown KL direction {direction!r}")
    return 0.5 * per_dim.sum(dim=-1).mean()
