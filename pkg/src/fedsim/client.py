"""Client-side training: three stages per communication round.

Stage 1 trains the two classifiers against real representations and
pseudo representations from the downloaded global generator, with an
adversarial push that keeps their decision boundaries apart.  Stage 2
trains the backbone under frozen classifiers, pulling representations
toward the global backbone and away from the previous round's snapshot.
Stage 3 trains the local generator to fool the frozen classifiers while
keeping its outputs diverse.  Each stage gets a fresh optimizer; only its
own parameter group changes.
"""

from __future__ import annotations

import copy
import warnings
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Dict, Iterator, Optional, Tuple

import numpy as np
import torch
import torch.nn.functional as F

from .backbone import AdaptiveBackbone
from .layers import edges_to_arcs, to_tensor
from .models import (Classifier, ConditionalGenerator, LabelDistribution,
                     d2_hidden_width, sample_noise, softmax_kl)
from .seeding import derive_seed, torch_generator


@dataclass
class ClientHyper:
    local_epochs: int = 5
    batch_size: int = 64
    learning_rate: float = 1e-3
    weight_decay: float = 1e-4
    alpha_dis: float = 1.0
    gamma_adv: float = 0.5
    mu_con: float = 0.5
    tau_con: float = 0.5
    noise_dim: int = 16
    probe_size: int = 64


@dataclass
class ClientState:
    client_id: int
    features: torch.Tensor
    arcs: torch.Tensor
    labels: torch.Tensor
    backbone: AdaptiveBackbone
    d1: Classifier
    d2: Classifier
    generator: ConditionalGenerator
    snapshot: AdaptiveBackbone
    probe_indices: torch.Tensor

    @property
    def num_nodes(self) -> int:
        return int(self.features.shape[0])


@dataclass
class ClientRoundMetrics:
    client_id: int
    stage1_loss: float
    stage2_loss: float
    stage3_loss: float
    local_accuracy: float
    pooled_repr: np.ndarray
    pred_dist: np.ndarray
    loss_scalar: float
    num_nodes: int


@dataclass
class DownloadedGlobals:
    backbone: AdaptiveBackbone
    classifier: Classifier
    generator: ConditionalGenerator
    # global label marginal from the label-statistics exchange; None falls
    # back to a uniform draw over the two classes
    label_dist: Optional[LabelDistribution] = None


@contextmanager
def frozen(*modules: torch.nn.Module):
    """Temporarily stop gradient accumulation into the given modules."""
    saved = []
    for m in modules:
        for p in m.parameters():
            saved.append((p, p.requires_grad))
            p.requires_grad_(False)
    try:
        yield
    finally:
        for p, flag in saved:
            p.requires_grad_(flag)


def init_client(client_id: int, features, edges, labels,
                global_backbone: AdaptiveBackbone,
                global_classifier: Classifier,
                hyper: ClientHyper, master_seed: int,
                generator_hidden: int = 64) -> ClientState:
    """Set up a client: shared D1 init, width-cycled D2, own generator."""
    feats = to_tensor(features)
    label_t = torch.as_tensor(np.asarray(labels), dtype=torch.long)
    d_r = global_backbone.config.representation_dim
    d2 = Classifier(d_r, [d2_hidden_width(client_id)],
                    generator=torch_generator(master_seed, "d2", client_id))
    gen_k = ConditionalGenerator(
        hyper.noise_dim, d_r, generator_hidden,
        generator=torch_generator(master_seed, "localgen", client_id))
    n = feats.shape[0]
    probe_perm = torch.randperm(
        n, generator=torch_generator(master_seed, "probe", client_id))
    return ClientState(
        client_id=client_id,
        features=feats,
        arcs=edges_to_arcs(np.asarray(edges)),
        labels=label_t,
        backbone=copy.deepcopy(global_backbone),
        d1=copy.deepcopy(global_classifier),
        d2=d2,
        generator=gen_k,
        snapshot=copy.deepcopy(global_backbone),
        probe_indices=probe_perm[:min(hyper.probe_size, n)],
    )


# --------------------------------------------------------------------- losses

def distill_loss(d: Classifier, real_repr: torch.Tensor,
                 pseudo_repr: torch.Tensor) -> torch.Tensor:
    """Mean KL between the classifier's beliefs on real and pseudo inputs."""
    if real_repr.shape[0] != pseudo_repr.shape[0]:
        raise ValueError("real and pseudo batches must be aligned")
    return softmax_kl(d(real_repr), d(pseudo_repr)).mean()


def adversarial_loss(d1: Classifier, d2: Classifier,
                     repr_batch: torch.Tensor) -> torch.Tensor:
    """Mean KL between the two classifiers' beliefs on the same inputs."""
    return softmax_kl(d1(repr_batch), d2(repr_batch)).mean()


def stage1_loss(d1, d2, repr_batch, labels, pseudo_pair, pseudo_balance,
                balance_labels, pseudo_local,
                hyper: ClientHyper) -> Tuple[torch.Tensor, Dict[str, float]]:
    """Classifier objective: classify real and label-rebalancing samples
    well, stay close to the global generator's virtual space, and disagree
    with each other on real data while agreeing on local pseudo data.

    pseudo_pair shares the real batch's labels and feeds the distillation
    terms; pseudo_balance carries labels drawn from the global marginal so
    skewed shards still see both classes.
    """
    cls = (F.cross_entropy(d1(repr_batch), labels)
           + F.cross_entropy(d2(repr_batch), labels)
           + F.cross_entropy(d1(pseudo_balance), balance_labels)
           + F.cross_entropy(d2(pseudo_balance), balance_labels))
    dis1 = distill_loss(d1, repr_batch, pseudo_pair)
    dis2 = distill_loss(d2, repr_batch, pseudo_pair)
    adv = adversarial_loss(d1, d2, repr_batch)
    advg = adversarial_loss(d1, d2, pseudo_local)
    total = cls + hyper.alpha_dis * (dis1 + dis2) + hyper.gamma_adv * (advg - adv)
    parts = {"cls": float(cls.detach()), "dis1": float(dis1.detach()),
             "dis2": float(dis2.detach()), "adv": float(adv.detach()),
             "advg": float(advg.detach())}
    return total, parts


def contrastive_loss(r: torch.Tensor, r_glo: torch.Tensor, r_pre: torch.Tensor,
                     tau: float) -> torch.Tensor:
    """Per-sample InfoNCE with the global representation as the positive
    and the previous-round representation as the negative."""
    for name, t in (("r", r), ("r_glo", r_glo), ("r_pre", r_pre)):
        if (t.norm(dim=-1) < 1e-12).any():
            warnings.warn(f"zero-norm rows in {name}; cosine treated as 0")
    sim_glo = F.cosine_similarity(r, r_glo, dim=-1)
    sim_pre = F.cosine_similarity(r, r_pre, dim=-1)
    logits = torch.stack([sim_glo, sim_pre], dim=1) / tau
    target = torch.zeros(r.shape[0], dtype=torch.long)
    return F.cross_entropy(logits, target, reduction="none")


def stage2_loss(d1, d2, repr_batch, r_glo, r_pre, labels,
                hyper: ClientHyper) -> Tuple[torch.Tensor, Dict[str, float]]:
    """Backbone objective under frozen classifiers."""
    cls = (F.cross_entropy(d1(repr_batch), labels)
           + F.cross_entropy(d2(repr_batch), labels))
    adv = adversarial_loss(d1, d2, repr_batch)
    con = contrastive_loss(repr_batch, r_glo, r_pre, hyper.tau_con).mean()
    total = cls + hyper.gamma_adv * adv + hyper.mu_con * con
    return total, {"cls": float(cls.detach()), "adv": float(adv.detach()),
                   "con": float(con.detach())}


def diversity_loss(x_tilde: torch.Tensor, z: torch.Tensor) -> torch.Tensor:
    """exp of minus the mean product of pairwise output and noise
    distances; 1 when the generator collapses, smaller when spread."""
    if x_tilde.shape[0] < 2:
        raise ValueError("diversity needs at least 2 samples")
    dx = _pairwise_distances(x_tilde)
    dz = _pairwise_distances(z)
    return torch.exp(-(dx * dz).mean())


def _pairwise_distances(x: torch.Tensor) -> torch.Tensor:
    sq = (x * x).sum(dim=1)
    d2 = (sq.unsqueeze(0) + sq.unsqueeze(1) - 2.0 * (x @ x.t())).clamp(min=0.0)
    return torch.sqrt(d2 + 1e-24)


def stage3_loss(d1, d2, x_tilde, z, labels) -> Tuple[torch.Tensor, Dict[str, float]]:
    """Local generator objective: convince D1, provoke disagreement with
    D2, and keep samples spread out."""
    cls = F.cross_entropy(d1(x_tilde), labels)
    advg = adversarial_loss(d1, d2, x_tilde)
    var = diversity_loss(x_tilde, z)
    total = cls - advg + var
    return total, {"cls": float(cls.detach()), "advg": float(advg.detach()),
                   "var": float(var.detach())}


# ---------------------------------------------------------------- round loop

def _batches(n: int, batch_size: int, generator: torch.Generator) -> Iterator[torch.Tensor]:
    perm = torch.randperm(n, generator=generator)
    for i in range(0, n, batch_size):
        yield perm[i:i + batch_size]


def _adam(params, hyper: ClientHyper):
    return torch.optim.Adam(params, lr=hyper.learning_rate,
                            weight_decay=hyper.weight_decay)


def _balance_labels(globals_: DownloadedGlobals, n: int,
                    generator: torch.Generator) -> torch.Tensor:
    if globals_.label_dist is not None:
        return globals_.label_dist.sample_labels(n, generator)
    return torch.randint(2, (n,), generator=generator)


def run_stage1(state: ClientState, globals_: DownloadedGlobals,
               hyper: ClientHyper, generator: torch.Generator) -> float:
    opt = _adam(list(state.d1.parameters()) + list(state.d2.parameters()), hyper)
    state.generator.eval()
    globals_.generator.eval()
    losses = []
    for _ in range(hyper.local_epochs):
        with torch.no_grad():
            full_repr = state.backbone(state.features, state.arcs, generator=generator)
        for batch in _batches(state.num_nodes, hyper.batch_size, generator):
            r = full_repr[batch]
            y = state.labels[batch]
            with torch.no_grad():
                z = sample_noise(len(batch), hyper.noise_dim, generator)
                pseudo_pair = globals_.generator(z, y)
                y_bal = _balance_labels(globals_, len(batch), generator)
                z2 = sample_noise(len(batch), hyper.noise_dim, generator)
                pseudo_balance = globals_.generator(z2, y_bal)
                z3 = sample_noise(len(batch), hyper.noise_dim, generator)
                pseudo_local = state.generator(z3, y)
            total, _ = stage1_loss(state.d1, state.d2, r, y, pseudo_pair,
                                   pseudo_balance, y_bal, pseudo_local, hyper)
            opt.zero_grad()
            total.backward()
            opt.step()
            losses.append(float(total.detach()))
    return float(np.mean(losses))


def run_stage2(state: ClientState, globals_: DownloadedGlobals,
               hyper: ClientHyper, generator: torch.Generator) -> Tuple[float, float]:
    opt = _adam(state.backbone.parameters(), hyper)
    losses, last_epoch = [], []
    for _ in range(hyper.local_epochs):
        # both reference models see the same gate noise so that identical
        # parameters yield identical reference representations
        ref_seed = int(torch.randint(1 << 31, (1,), generator=generator))
        with torch.no_grad():
            ref_gen = torch.Generator()
            ref_gen.manual_seed(ref_seed)
            glo_full = globals_.backbone(state.features, state.arcs, generator=ref_gen)
            ref_gen.manual_seed(ref_seed)
            pre_full = state.snapshot(state.features, state.arcs, generator=ref_gen)
        last_epoch = []
        for batch in _batches(state.num_nodes, hyper.batch_size, generator):
            r = state.backbone(state.features, state.arcs, generator=generator)[batch]
            with frozen(state.d1, state.d2):
                total, _ = stage2_loss(state.d1, state.d2, r,
                                       glo_full[batch], pre_full[batch],
                                       state.labels[batch], hyper)
            opt.zero_grad()
            total.backward()
            opt.step()
            losses.append(float(total.detach()))
            last_epoch.append(float(total.detach()))
    return float(np.mean(losses)), float(np.mean(last_epoch))


def run_stage3(state: ClientState, hyper: ClientHyper,
               generator: torch.Generator) -> float:
    opt = _adam(state.generator.parameters(), hyper)
    state.generator.train()
    steps_per_epoch = max(1, -(-state.num_nodes // hyper.batch_size))
    losses = []
    for _ in range(hyper.local_epochs):
        for _ in range(steps_per_epoch):
            n = max(2, hyper.batch_size)
            z = sample_noise(n, hyper.noise_dim, generator)
            y = torch.randint(2, (n,), generator=generator)
            x_tilde = state.generator(z, y)
            with frozen(state.d1, state.d2):
                total, _ = stage3_loss(state.d1, state.d2, x_tilde, z, y)
            opt.zero_grad()
            total.backward()
            opt.step()
            losses.append(float(total.detach()))
    state.generator.eval()
    return float(np.mean(losses))


def run_local_round(state: ClientState, globals_: DownloadedGlobals,
                    hyper: ClientHyper, generator: torch.Generator
                    ) -> Tuple[ClientState, ClientRoundMetrics]:
    """Run the three stages and collect the scalars the server needs."""
    if hyper.local_epochs < 1:
        raise ValueError("local_epochs must be at least 1")
    s1 = run_stage1(state, globals_, hyper, generator)
    s2, loss_scalar = run_stage2(state, globals_, hyper, generator)
    s3 = run_stage3(state, hyper, generator)

    with torch.no_grad():
        full_repr = state.backbone(state.features, state.arcs, generator=generator)
        logits = state.d1(full_repr)
        acc = float((logits.argmax(dim=1) == state.labels).double().mean())
        probe_repr = full_repr[state.probe_indices]
        pooled = probe_repr.mean(dim=0).double().numpy()
        pred_dist = torch.softmax(logits[state.probe_indices], dim=-1)
        pred_dist = pred_dist.mean(dim=0).double().numpy()

    metrics = ClientRoundMetrics(
        client_id=state.client_id,
        stage1_loss=s1, stage2_loss=s2, stage3_loss=s3,
        local_accuracy=acc,
        pooled_repr=pooled, pred_dist=pred_dist,
        loss_scalar=loss_scalar,
        num_nodes=state.num_nodes)
    return state, metrics
