"""Neuron-level masked aggregation of client backbone updates.

The server keeps one raw mask row per client, the same length as the
flattened backbone parameter vector.  Coordinate-wise softmax across the
client axis turns raw rows into nonnegative weights that sum to one at
every parameter position.  Each round the masks take one gradient step
against the cross-entropy of generator-synthesized samples pushed through
the aggregated projection sub-layer and the global classifier; that is
the only path by which the aggregated vector receives gradient.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .models import ConditionalGenerator, LabelDistribution, sample_noise

log = logging.getLogger(__name__)


@dataclass
class AggregationConfig:
    eta_mask: float = 1e-2
    batch_size: int = 256


@dataclass
class AggregationResult:
    new_global: torch.Tensor
    raw_masks: torch.Tensor
    mask_loss: Optional[float]


def flatten_params(module: nn.Module) -> torch.Tensor:
    return nn.utils.parameters_to_vector(module.parameters()).detach().clone()


def load_flat_params(module: nn.Module, flat: torch.Tensor) -> None:
    first = next(module.parameters())
    nn.utils.vector_to_parameters(flat.to(first.dtype), module.parameters())


def parameter_layout(module: nn.Module) -> Dict[str, Tuple[int, torch.Size]]:
    """Name -> (offset, shape) in the flattened parameter vector."""
    layout: Dict[str, Tuple[int, torch.Size]] = {}
    offset = 0
    for name, p in module.named_parameters():
        layout[name] = (offset, p.shape)
        offset += p.numel()
    return layout


def init_masks(num_clients: int, num_params: int) -> torch.Tensor:
    """Raw masks start at one everywhere, so normalization yields 1/K."""
    return torch.ones(num_clients, num_params,
                      dtype=torch.get_default_dtype())


def normalize_masks(raw: torch.Tensor) -> torch.Tensor:
    """Coordinate-wise softmax across clients: nonnegative, columns sum to 1."""
    return torch.softmax(raw, dim=0)


def aggregate(prev_flat: torch.Tensor, client_flats: torch.Tensor,
              snapshot_flats: torch.Tensor, masks: torch.Tensor) -> torch.Tensor:
    """prev + sum_k (client_k - snapshot_k) * mask_k, all flat vectors."""
    if client_flats.shape != snapshot_flats.shape or client_flats.shape != masks.shape:
        raise ValueError("client, snapshot, and mask shapes must match")
    if client_flats.shape[1] != prev_flat.shape[0]:
        raise ValueError("flattened parameter lengths disagree")
    return prev_flat + ((client_flats - snapshot_flats) * masks).sum(dim=0)


def aggregate_classifier(global_classifier: nn.Module,
                         client_classifiers: Sequence[nn.Module]) -> None:
    """Overwrite the global classifier with the unweighted client mean."""
    if not client_classifiers:
        raise ValueError("need at least one client classifier")
    target = dict(global_classifier.named_parameters())
    stacks: Dict[str, List[torch.Tensor]] = {name: [] for name in target}
    for clf in client_classifiers:
        params = dict(clf.named_parameters())
        if params.keys() != target.keys():
            raise ValueError("classifier parameter sets do not match")
        for name, p in params.items():
            if p.shape != target[name].shape:
                raise ValueError(f"shape mismatch for '{name}'")
            stacks[name].append(p.detach())
    with torch.no_grad():
        for name, tensors in stacks.items():
            target[name].copy_(torch.stack(tensors).mean(dim=0))


def projection_slice(flat: torch.Tensor,
                     layout: Dict[str, Tuple[int, torch.Size]]
                     ) -> Tuple[torch.Tensor, torch.Tensor]:
    """Extract the final projection sub-layer (weight, bias) views."""
    off_w, shape_w = layout["proj_out.weight"]
    off_b, shape_b = layout["proj_out.bias"]
    w = flat[off_w:off_w + shape_w.numel()].view(shape_w)
    b = flat[off_b:off_b + shape_b.numel()].view(shape_b)
    return w, b


def mask_loss(flat: torch.Tensor, layout: Dict[str, Tuple[int, torch.Size]],
              classifier: nn.Module, x_tilde: torch.Tensor,
              y: torch.Tensor) -> torch.Tensor:
    """Mean cross-entropy of synthetic representations classified after the
    aggregated projection sub-layer; differentiable w.r.t. `flat`."""
    w, b = projection_slice(flat, layout)
    logits = classifier(x_tilde @ w.t() + b)
    return F.cross_entropy(logits, y)


def update_masks(raw: torch.Tensor, grad: torch.Tensor,
                 eta_mask: float) -> torch.Tensor:
    """One descent step on the raw masks; skipped when the gradient is not
    finite so a bad round cannot poison the mask state."""
    if not torch.all(torch.isfinite(grad)):
        log.warning("non-finite mask gradient; skipping mask update")
        return raw
    return raw - eta_mask * grad


def mask_layer_means(raw: torch.Tensor,
                     layout: Dict[str, Tuple[int, torch.Size]]) -> Dict[str, np.ndarray]:
    """Per-layer mean normalized weight for each client, for inspection."""
    normalized = normalize_masks(raw)
    means = {}
    for name, (offset, shape) in layout.items():
        n = int(np.prod(shape))
        means[name] = normalized[:, offset:offset + n].mean(dim=1).numpy()
    return means


def aggregate_round(prev_flat: torch.Tensor, client_flats: torch.Tensor,
                    snapshot_flats: torch.Tensor, raw_masks: torch.Tensor,
                    layout: Dict[str, Tuple[int, torch.Size]],
                    generator_net: ConditionalGenerator,
                    classifier: nn.Module, label_dist: LabelDistribution,
                    config: AggregationConfig,
                    generator: Optional[torch.Generator] = None
                    ) -> AggregationResult:
    """One server aggregation barrier: synthesize a batch, take one mask
    step against its classification loss, then aggregate with the updated
    masks."""
    generator_net.eval()
    with torch.no_grad():
        y = label_dist.sample_labels(config.batch_size, generator)
        z = sample_noise(config.batch_size, generator_net.noise_dim, generator)
        x_tilde = generator_net(z, y)

    raw = raw_masks.detach().clone().requires_grad_(True)
    candidate = aggregate(prev_flat, client_flats, snapshot_flats,
                          normalize_masks(raw))
    loss = mask_loss(candidate, layout, classifier, x_tilde, y)
    grad = torch.autograd.grad(loss, raw)[0]
    new_raw = update_masks(raw.detach(), grad, config.eta_mask)

    with torch.no_grad():
        new_global = aggregate(prev_flat, client_flats, snapshot_flats,
                               normalize_masks(new_raw))
    return AggregationResult(new_global=new_global, raw_masks=new_raw,
                             mask_loss=float(loss.detach()))
