"""Shared torch building blocks: seeded init and neighbor aggregation."""

from __future__ import annotations

import math
from typing import Optional

import numpy as np
import torch
from torch import nn


def to_tensor(array) -> torch.Tensor:
    return torch.as_tensor(np.asarray(array), dtype=torch.get_default_dtype())


def uniform_init_(module: nn.Module, generator: Optional[torch.Generator] = None,
                  gain: float = 1.0) -> nn.Module:
    """Re-sample every Linear the way torch does by default, but from an
    explicit generator so construction is reproducible across processes.

    `gain` scales the U(-1/sqrt(fan_in), 1/sqrt(fan_in)) bound.  The default
    shrinks activations roughly by sqrt(3) per layer in deep ReLU stacks;
    passing sqrt(6) gives the Kaiming magnitude that keeps them stable.
    """
    for m in module.modules():
        if isinstance(m, nn.Linear):
            bound = gain / math.sqrt(m.in_features)
            with torch.no_grad():
                m.weight.uniform_(-bound, bound, generator=generator)
                if m.bias is not None:
                    m.bias.uniform_(-bound, bound, generator=generator)
        elif isinstance(m, nn.BatchNorm1d):
            m.reset_running_stats()
            with torch.no_grad():
                m.weight.fill_(1.0)
                m.bias.fill_(0.0)
    return module


def edges_to_arcs(edges: np.ndarray) -> torch.Tensor:
    """Expand undirected (M, 2) edges into a (2, 2M) directed arc list."""
    if edges.size == 0:
        return torch.zeros((2, 0), dtype=torch.long)
    e = torch.as_tensor(np.asarray(edges), dtype=torch.long)
    return torch.cat([e.t(), e.flip(1).t()], dim=1)


def aggregate_neighbors(h: torch.Tensor, arcs: torch.Tensor, mode: str = "mean",
                        weights: Optional[torch.Tensor] = None) -> torch.Tensor:
    """Per-node aggregate of incoming messages h[src] along arcs src -> dst.

    Nodes with no incoming arcs get a zero row.  `weights` (one scalar per
    arc) scales messages and, for mean, the normalizer as well.
    """
    n = h.shape[0]
    out = torch.zeros_like(h)
    if arcs.numel() == 0:
        return out
    src, dst = arcs[0], arcs[1]
    msgs = h[src]
    if mode == "max":
        if weights is not None:
            raise ValueError("weighted aggregation is only defined for sum/mean")
        return out.index_reduce_(0, dst, msgs, "amax", include_self=False)
    if weights is not None:
        msgs = msgs * weights.unsqueeze(-1)
    out.index_add_(0, dst, msgs)
    if mode == "sum":
        return out
    if mode == "mean":
        if weights is None:
            norm = torch.zeros(n, dtype=h.dtype).index_add_(
                0, dst, torch.ones(len(dst), dtype=h.dtype))
        else:
            norm = torch.zeros(n, dtype=h.dtype).index_add_(0, dst, weights)
        return out / norm.clamp(min=1e-12).unsqueeze(-1)
    raise ValueError(f"unknown aggregator '{mode}'")
