"""Server-side generator distillation against uploaded client heads.

The server holds no data.  The uploaded client classifiers act as frozen
teachers: the global generator learns to emit representations that the
teachers label confidently, while the global classifier is pulled toward
the teacher ensemble on exactly those synthetic samples.  Each teacher's
vote on a sample is scaled by that client's share of the sample's label,
so clients that actually hold a class dominate its synthetic curriculum.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional, Sequence

import torch
import torch.nn.functional as F
from torch import nn

from .client import frozen
from .models import ConditionalGenerator, LabelDistribution, sample_noise, softmax_kl


@dataclass
class ServerDistillConfig:
    steps: int = 50
    batch_size: int = 64
    learning_rate: float = 1e-3
    weight_decay: float = 1e-4
    # when False the global classifier is a fixed KL anchor and only the
    # generator trains
    update_classifier: bool = True


@dataclass
class ExperienceSet:
    """One generator batch: noise, sampled labels, synthetic representations."""

    z: torch.Tensor
    y: torch.Tensor
    x_tilde: torch.Tensor


def draw_experience(generator_net: ConditionalGenerator,
                    label_dist: LabelDistribution, batch_size: int,
                    generator: Optional[torch.Generator] = None) -> ExperienceSet:
    """Sample labels from the global marginal, noise from N(0, 1), and run
    the generator; x_tilde keeps its graph so the loss can train it."""
    y = label_dist.sample_labels(batch_size, generator)
    z = sample_noise(batch_size, generator_net.noise_dim, generator)
    return ExperienceSet(z=z, y=y, x_tilde=generator_net(z, y))


def global_generator_loss(global_classifier: nn.Module,
                          client_classifiers: Sequence[nn.Module],
                          label_dist: LabelDistribution,
                          batch: ExperienceSet) -> torch.Tensor:
    """Client-averaged, label-share-weighted distillation objective.

    Per sample and teacher k this is
        alpha[k, y] * (KL(teacher_k || global) + CE(teacher_k, y))
    reduced by the mean over the batch and the mean over teachers.
    """
    if not client_classifiers:
        raise ValueError("need at least one client classifier")
    logits_glo = global_classifier(batch.x_tilde)
    weights = torch.as_tensor(label_dist.client_weights,
                              dtype=batch.x_tilde.dtype)
    total = batch.x_tilde.new_zeros(())
    for k, teacher in enumerate(client_classifiers):
        logits_k = teacher(batch.x_tilde)
        per_sample = (softmax_kl(logits_k, logits_glo)
                      + F.cross_entropy(logits_k, batch.y, reduction="none"))
        total = total + (weights[k, batch.y] * per_sample).mean()
    return total / len(client_classifiers)


def train_global_generator(generator_net: ConditionalGenerator,
                           global_classifier: nn.Module,
                           client_classifiers: Sequence[nn.Module],
                           label_dist: LabelDistribution,
                           config: ServerDistillConfig,
                           generator: Optional[torch.Generator] = None
                           ) -> List[float]:
    """Run config.steps Adam iterations on fresh batches; returns the loss
    history.  Raises if the loss goes non-finite instead of training on."""
    if config.steps == 0:
        return []
    params = list(generator_net.parameters())
    if config.update_classifier:
        params += list(global_classifier.parameters())
    opt = torch.optim.Adam(params, lr=config.learning_rate,
                           weight_decay=config.weight_decay)
    history: List[float] = []
    generator_net.train()
    with frozen(*client_classifiers):
        for step in range(config.steps):
            batch = draw_experience(generator_net, label_dist,
                                    config.batch_size, generator)
            loss = global_generator_loss(global_classifier, client_classifiers,
                                         label_dist, batch)
            if not torch.isfinite(loss):
                raise RuntimeError(
                    f"non-finite distillation loss at step {step}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            history.append(float(loss.detach()))
    generator_net.eval()
    return history
