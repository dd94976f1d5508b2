"""Shared test utilities: central finite differences for gradient checks."""

from __future__ import annotations

from typing import Callable, Iterable, List

import torch


def finite_diff_grads(loss_fn: Callable[[], float], params: Iterable[torch.Tensor],
                      step: float = 1e-4) -> List[torch.Tensor]:
    """Central-difference gradient of a re-evaluable scalar loss.

    loss_fn must be deterministic (fix all noise) and must read the live
    parameter tensors each call.
    """
    grads = []
    for p in params:
        grad = torch.zeros_like(p)
        flat, gflat = p.data.view(-1), grad.view(-1)
        for i in range(flat.numel()):
            orig = flat[i].item()
            flat[i] = orig + step
            hi = float(torch.as_tensor(loss_fn()).detach())
            flat[i] = orig - step
            lo = float(torch.as_tensor(loss_fn()).detach())
            flat[i] = orig
            gflat[i] = (hi - lo) / (2.0 * step)
        grads.append(grad)
    return grads


def assert_grads_close(analytic: Iterable[torch.Tensor],
                       numeric: Iterable[torch.Tensor],
                       rtol: float = 1e-3, atol: float = 1e-6) -> None:
    for a, n in zip(analytic, numeric):
        a = torch.zeros_like(n) if a is None else a
        diff = (a - n).abs()
        bound = atol + rtol * torch.maximum(a.abs(), n.abs())
        worst = (diff - bound).max().item()
        assert worst <= 0, f"gradient mismatch: worst excess {worst:.3e}"


def analytic_grads(loss: torch.Tensor, params: Iterable[torch.Tensor]
                   ) -> List[torch.Tensor]:
    return list(torch.autograd.grad(loss, list(params), allow_unused=True))


def tiny_config():
    """Small synthetic experiment that runs in a couple of seconds."""
    from fedsim.config import ExperimentConfig

    config = ExperimentConfig()
    config.run.num_clients = 3
    config.run.rounds = 2
    config.run.alpha = 1.0
    config.run.master_seed = 7
    config.synthetic.nodes_per_class = 80
    config.synthetic.feature_dim = 8
    config.client.local_epochs = 1
    config.client.batch_size = 32
    config.distill.steps = 5
    config.aggregation.batch_size = 16
    config.agent.warmup_rounds = 1
    config.agent.updates_per_round = 2
    return config
