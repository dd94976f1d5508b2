"""Classifier and generator heads plus the label-distribution bookkeeping.

Both live in representation space: classifiers map a representation to two
logits, generators map (noise, label) pairs to synthetic representations.
Client-side D1 heads share one architecture so the server can average
them; D2 heads vary in width to diversify decision boundaries.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import List, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .layers import uniform_init_

D2_WIDTH_CYCLE = (32, 48, 64)


def d2_hidden_width(client_id: int) -> int:
    return D2_WIDTH_CYCLE[client_id % len(D2_WIDTH_CYCLE)]


class Classifier(nn.Module):
    """MLP over representations; hidden_dims=[] degenerates to one linear."""

    def __init__(self, in_dim: int, hidden_dims: Sequence[int] = (64,),
                 num_classes: int = 2,
                 generator: Optional[torch.Generator] = None):
        super().__init__()
        dims = [in_dim] + list(hidden_dims) + [num_classes]
        layers: List[nn.Module] = []
        for i in range(len(dims) - 1):
            layers.append(nn.Linear(dims[i], dims[i + 1]))
            if i < len(dims) - 2:
                layers.append(nn.ReLU())
        self.net = nn.Sequential(*layers)
        if generator is not None:
            uniform_init_(self, generator)

    def forward(self, r: torch.Tensor) -> torch.Tensor:
        return self.net(r)


class ConditionalGenerator(nn.Module):
    """Three FC layers with batch norm and ReLU, conditioned on the label.

    Emits vectors in representation space, the same space the classifiers
    consume, so pseudo samples can stand in for backbone outputs directly.
    """

    def __init__(self, noise_dim: int = 16, out_dim: int = 32,
                 hidden_dim: int = 64, num_classes: int = 2,
                 generator: Optional[torch.Generator] = None):
        super().__init__()
        self.noise_dim = noise_dim
        self.num_classes = num_classes
        self.net = nn.Sequential(
            nn.Linear(noise_dim + num_classes, hidden_dim),
            nn.BatchNorm1d(hidden_dim),
            nn.ReLU(),
            nn.Linear(hidden_dim, hidden_dim),
            nn.BatchNorm1d(hidden_dim),
            nn.ReLU(),
            nn.Linear(hidden_dim, out_dim),
        )
        if generator is not None:
            uniform_init_(self, generator)

    def forward(self, z: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
        onehot = F.one_hot(y, self.num_classes).to(z.dtype)
        return self.net(torch.cat([z, onehot], dim=1))


def sample_noise(n: int, noise_dim: int,
                 generator: Optional[torch.Generator] = None) -> torch.Tensor:
    return torch.randn(n, noise_dim, generator=generator,
                       dtype=torch.get_default_dtype())


def kl_divergence(p: torch.Tensor, q: torch.Tensor, eps: float = 1e-12) -> torch.Tensor:
    """Row-wise KL(p || q) between probability rows, clamped at eps."""
    p = p.clamp(min=eps)
    q = q.clamp(min=eps)
    return (p * (p.log() - q.log())).sum(dim=-1)


def softmax_kl(logits_p: torch.Tensor, logits_q: torch.Tensor) -> torch.Tensor:
    """Row-wise KL between the softmaxes of two logit matrices."""
    log_p = F.log_softmax(logits_p, dim=-1)
    log_q = F.log_softmax(logits_q, dim=-1)
    return (log_p.exp() * (log_p - log_q)).sum(dim=-1)


@dataclass
class LabelDistribution:
    """Global label marginal and per-client share of each label."""

    counts: np.ndarray          # (K, C) client label counts
    marginal: np.ndarray        # (C,) global p(y)
    client_weights: np.ndarray  # (K, C) column-normalized shares

    def sample_labels(self, n: int,
                      generator: Optional[torch.Generator] = None) -> torch.Tensor:
        probs = torch.as_tensor(self.marginal, dtype=torch.get_default_dtype())
        return torch.multinomial(probs, n, replacement=True, generator=generator)


def estimate_label_distribution(label_counts: np.ndarray) -> LabelDistribution:
    """Turn a (K, C) label-count matrix into sampling weights.

    client_weights[:, y] is each client's share of the label-y training
    nodes; a label held by no client falls back to uniform shares with a
    warning.
    """
    counts = np.asarray(label_counts, dtype=np.float64)
    if counts.ndim != 2 or counts.shape[0] < 1:
        raise ValueError("label_counts must be a (K, C) matrix")
    if (counts < 0).any():
        raise ValueError("label counts must be nonnegative")
    totals = counts.sum(axis=0)
    weights = np.empty_like(counts)
    for y in range(counts.shape[1]):
        if totals[y] == 0:
            warnings.warn(f"no client holds label {y}; using uniform weights")
            weights[:, y] = 1.0 / counts.shape[0]
        else:
            weights[:, y] = counts[:, y] / totals[y]
    grand = counts.sum()
    if grand == 0:
        raise ValueError("label counts are all zero")
    return LabelDistribution(counts=counts.astype(np.int64),
                             marginal=totals / grand,
                             client_weights=weights)
