"""Adaptive message-passing backbone.

Each node decides, per round of propagation, whether to transmit to and
receive from its neighbors.  Two GraphSAGE-style action networks emit
per-node action distributions over {transmit, withhold}; Gumbel-Softmax
turns them into (optionally hard) gates; an edge survives when both its
endpoints transmit.  A GIN-style environment network propagates over the
surviving edges and a linear head projects node states into the
representation space shared with the generators and classifiers.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Tuple

import torch
from torch import nn

from .layers import aggregate_neighbors, uniform_init_

TRANSMIT, WITHHOLD = 0, 1
NUM_ACTIONS = 2


@dataclass
class BackboneConfig:
    feature_dim: int = 0
    hidden_dim: int = 64
    representation_dim: int = 32
    num_layers: int = 2
    layer_norm_eps: float = 1e-5
    temperature: float = 1.0
    hard_sampling: bool = True
    action_aggregator: str = "mean"
    # mean keeps hidden magnitudes independent of how many edges the gates
    # keep; "sum" recovers the classic GIN update
    env_aggregator: str = "mean"
    # False propagates over the raw adjacency, skipping the learned gates
    adaptive: bool = True


def layer_norm(x: torch.Tensor, gain: torch.Tensor, bias: torch.Tensor,
               eps: float = 1e-5) -> torch.Tensor:
    """Row-wise standardization with learnable gain and bias.

    Uses the biased variance; eps is added to the standard deviation so a
    constant row maps exactly to the bias.
    """
    mean = x.mean(dim=-1, keepdim=True)
    var = x.var(dim=-1, unbiased=False, keepdim=True)
    return gain * (x - mean) / (torch.sqrt(var) + eps) + bias


def gumbel_softmax(probs: torch.Tensor, temperature: float = 1.0,
                   generator: Optional[torch.Generator] = None,
                   hard: bool = True,
                   noise: Optional[torch.Tensor] = None) -> torch.Tensor:
    """Sample relaxed one-hot vectors from probability rows.

    With hard=True the forward value is the exact one-hot argmax of the
    perturbed logits and the gradient flows through the soft relaxation
    (straight-through).  `noise` injects pre-drawn Gumbel noise; otherwise
    it is sampled from `generator`.
    """
    log_p = torch.log(probs.clamp(min=1e-12))
    if noise is None:
        u = torch.rand(probs.shape, generator=generator, dtype=probs.dtype)
        noise = -torch.log(-torch.log(u.clamp(min=1e-20)))
    soft = torch.softmax((log_p + noise) / temperature, dim=-1)
    if not hard:
        return soft
    index = soft.argmax(dim=-1, keepdim=True)
    one_hot = torch.zeros_like(soft).scatter_(-1, index, 1.0)
    return (one_hot - soft).detach() + soft


def edge_weights(gate_out: torch.Tensor, gate_in: torch.Tensor,
                 arcs: torch.Tensor) -> torch.Tensor:
    """Arc weight: source's transmit gate times target's receive gate."""
    return gate_out[arcs[0], TRANSMIT] * gate_in[arcs[1], TRANSMIT]


def prune_adjacency(arcs: torch.Tensor, weights: torch.Tensor
                    ) -> Tuple[torch.Tensor, torch.Tensor]:
    """Drop arcs whose weight is zero; kept weights stay differentiable."""
    keep = weights > 0
    return arcs[:, keep], weights[keep]


class SageLayer(nn.Module):
    def __init__(self, in_dim: int, out_dim: int, aggregator: str = "mean"):
        super().__init__()
        self.self_lin = nn.Linear(in_dim, out_dim)
        self.neigh_lin = nn.Linear(in_dim, out_dim, bias=False)
        self.aggregator = aggregator

    def forward(self, h, arcs):
        neigh = aggregate_neighbors(h, arcs, self.aggregator)
        return self.self_lin(h) + self.neigh_lin(neigh)


class SageActionNet(nn.Module):
    """Stacked SAGE layers ending in a softmax over the action space."""

    def __init__(self, in_dim: int, hidden_dim: int = 64, num_layers: int = 2,
                 aggregator: str = "mean"):
        super().__init__()
        dims = [in_dim] + [hidden_dim] * (num_layers - 1) + [NUM_ACTIONS]
        self.layers = nn.ModuleList(
            SageLayer(dims[i], dims[i + 1], aggregator) for i in range(num_layers))

    def forward(self, h, arcs):
        for i, layer in enumerate(self.layers):
            h = layer(h, arcs)
            if i < len(self.layers) - 1:
                h = torch.relu(h)
        return torch.softmax(h, dim=-1)


class GinLayer(nn.Module):
    def __init__(self, in_dim: int, out_dim: int, aggregator: str = "sum"):
        super().__init__()
        self.eps_mix = nn.Parameter(torch.zeros(()))
        self.mlp = nn.Sequential(
            nn.Linear(in_dim, out_dim), nn.ReLU(), nn.Linear(out_dim, out_dim))
        self.aggregator = aggregator

    def forward(self, h, arcs, arc_weights=None):
        neigh = aggregate_neighbors(h, arcs, self.aggregator, arc_weights)
        return self.mlp((1.0 + self.eps_mix) * h + neigh)


class GinEnvNet(nn.Module):
    """Environment network: GIN layers over the surviving adjacency."""

    def __init__(self, in_dim: int, hidden_dim: int = 64, num_layers: int = 2,
                 aggregator: str = "sum"):
        super().__init__()
        dims = [in_dim] + [hidden_dim] * num_layers
        self.layers = nn.ModuleList(
            GinLayer(dims[i], dims[i + 1], aggregator) for i in range(num_layers))

    def forward(self, h, arcs, arc_weights=None):
        for i, layer in enumerate(self.layers):
            h = layer(h, arcs, arc_weights)
            if i < len(self.layers) - 1:
                h = torch.relu(h)
        return h


class AdaptiveBackbone(nn.Module):
    def __init__(self, config: BackboneConfig,
                 generator: Optional[torch.Generator] = None):
        super().__init__()
        self.config = config
        d = config.feature_dim
        self.ln_gain = nn.Parameter(torch.ones(d))
        self.ln_bias = nn.Parameter(torch.zeros(d))
        self.action_in = SageActionNet(d, config.hidden_dim, config.num_layers,
                                       config.action_aggregator)
        self.action_out = SageActionNet(d, config.hidden_dim, config.num_layers,
                                        config.action_aggregator)
        self.env = GinEnvNet(d, config.hidden_dim, config.num_layers,
                             config.env_aggregator)
        self.proj_hidden = nn.Linear(config.hidden_dim, config.representation_dim)
        self.proj_out = nn.Linear(config.representation_dim, config.representation_dim)
        if generator is not None:
            # six Linears sit between input and representation, so default
            # init shrinks activations below useful scale; see uniform_init_
            uniform_init_(self, generator, gain=math.sqrt(6.0))

    def normalize(self, x: torch.Tensor) -> torch.Tensor:
        return layer_norm(x, self.ln_gain, self.ln_bias, self.config.layer_norm_eps)

    def action_probs(self, h: torch.Tensor, arcs: torch.Tensor
                     ) -> Tuple[torch.Tensor, torch.Tensor]:
        """Per-node receive and transmit distributions from normalized input."""
        return self.action_in(h, arcs), self.action_out(h, arcs)

    def project(self, hidden: torch.Tensor) -> torch.Tensor:
        return self.proj_out(self.proj_hidden(hidden))

    def forward(self, x: torch.Tensor, arcs: torch.Tensor,
                generator: Optional[torch.Generator] = None,
                gate_noise: Optional[Tuple[torch.Tensor, torch.Tensor]] = None,
                hard: Optional[bool] = None,
                adaptive: Optional[bool] = None,
                pin_transmit: bool = False) -> torch.Tensor:
        """Features to representations.

        adaptive=False (or pin_transmit=True) propagates over the raw
        adjacency; otherwise edges are gated by straight-through samples of
        the two action networks, so gradients reach them even with hard
        sampling.  adaptive=None defers to the config flag.
        """
        h = self.normalize(x)
        use_adaptive = self.config.adaptive if adaptive is None else adaptive
        if not use_adaptive or pin_transmit:
            hidden = self.env(h, arcs)
        else:
            use_hard = self.config.hard_sampling if hard is None else hard
            p_in, p_out = self.action_probs(h, arcs)
            noise_out, noise_in = gate_noise if gate_noise is not None else (None, None)
            gate_out = gumbel_softmax(p_out, self.config.temperature, generator,
                                      use_hard, noise_out)
            gate_in = gumbel_softmax(p_in, self.config.temperature, generator,
                                     use_hard, noise_in)
            w = edge_weights(gate_out, gate_in, arcs)
            kept_arcs, kept_w = prune_adjacency(arcs, w)
            hidden = self.env(h, kept_arcs, kept_w)
        return self.project(hidden)
