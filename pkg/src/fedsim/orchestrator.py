"""Round loop for the federated simulation.

One object owns the global models, the clients, the masks, and the
momentum controller, and advances them a communication round at a time.
The averaging baselines reuse the same machinery with a single-loss
local trainer, so paired comparisons differ only in the update rule.
"""

from __future__ import annotations

import copy
import time
from dataclasses import dataclass, replace
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn.functional as F
from sklearn.metrics import f1_score

from .aggregation import (aggregate, aggregate_classifier, aggregate_round,
                          flatten_params, init_masks, load_flat_params,
                          normalize_masks, parameter_layout)
from .backbone import AdaptiveBackbone
from .client import (ClientState, DownloadedGlobals, _batches, init_client,
                     run_local_round)
from .config import ExperimentConfig
from .data import (GraphDataset, PartitionSpec, _induced_subgraph,
                   dirichlet_partition, generate_synthetic_bot_graph,
                   label_histogram, load_dataset, stratified_split)
from .distill import train_global_generator
from .layers import edges_to_arcs, to_tensor
from .models import Classifier, ConditionalGenerator, estimate_label_distribution
from .rl import (DdqnAgent, Transition, apply_client_update, build_state,
                 compute_reward, momentum_values)
from .seeding import torch_generator

UploadTransform = Callable[[int, int, torch.Tensor], torch.Tensor]


@dataclass
class RoundRecord:
    round_index: int
    accuracy: float
    macro_f1: float
    client_losses: Dict[str, Dict[str, float]]
    wall_clock_s: float
    action: Optional[List[float]] = None
    reward: Optional[float] = None
    mask_loss: Optional[float] = None
    distill_loss: Optional[float] = None
    consistency: Optional[float] = None

    def to_json_dict(self) -> Dict[str, Any]:
        out: Dict[str, Any] = {
            "t": self.round_index,
            "acc": self.accuracy,
            "f1": self.macro_f1,
            "losses": self.client_losses,
        }
        if self.action is not None:
            out["action"] = self.action
        if self.reward is not None:
            out["reward"] = self.reward
        if self.mask_loss is not None:
            out["mask_loss"] = self.mask_loss
        if self.distill_loss is not None:
            out["distill_loss"] = self.distill_loss
        if self.consistency is not None:
            out["consistency"] = self.consistency
        out["wall_clock_s"] = self.wall_clock_s
        return out


@dataclass
class RunSummary:
    best_accuracy: float
    best_f1: float
    rounds_to_target: Optional[int]
    final_consistency: Optional[float]

    def to_json_dict(self) -> Dict[str, Any]:
        reached: Any = self.rounds_to_target
        return {
            "best_accuracy": self.best_accuracy,
            "best_f1": self.best_f1,
            "rounds_to_target": "unreached" if reached is None else reached,
            "final_consistency": self.final_consistency,
        }


def rounds_to_target(records: Sequence[RoundRecord],
                     target: float) -> Optional[int]:
    """First round whose validation accuracy meets the target, else None."""
    if not records:
        raise ValueError("need at least one round record")
    for rec in records:
        if rec.accuracy >= target:
            return rec.round_index
    return None


def feature_consistency_score(client_reprs: Sequence[torch.Tensor],
                              labels: torch.Tensor) -> float:
    """Cross-client dispersion of class centroids on a shared probe set,
    normalized by the mean within-client class separation.  Zero when all
    clients embed the probe identically; lower is more consistent."""
    if len(client_reprs) < 2:
        raise ValueError("need representations from at least 2 clients")
    labels = torch.as_tensor(labels, dtype=torch.long)
    classes = torch.unique(labels)
    if classes.numel() < 2:
        raise ValueError("probe set must contain both classes")
    centroids = []
    for rep in client_reprs:
        centroids.append(torch.stack(
            [rep[labels == c].mean(dim=0) for c in classes]))
    stacked = torch.stack(centroids)          # (K, C, d)
    k = stacked.shape[0]
    cross_terms = []
    for a in range(k):
        for b in range(a + 1, k):
            cross_terms.append(
                torch.linalg.norm(stacked[a] - stacked[b], dim=1).mean())
    cross = torch.stack(cross_terms).mean()
    intra = torch.linalg.norm(stacked[:, 0] - stacked[:, 1], dim=1).mean()
    return float(cross / intra.clamp_min(1e-12))


def build_dataset(config: ExperimentConfig) -> GraphDataset:
    run = config.run
    if run.dataset_path:
        dataset = load_dataset(run.dataset_path, run.edge_path or None)
        if dataset.split is None:
            dataset = stratified_split(dataset, seed=run.master_seed)
        return dataset
    raw = generate_synthetic_bot_graph(config.synthetic, seed=run.master_seed)
    return stratified_split(raw, seed=run.master_seed)


def _plain_local_round(state: ClientState, config: ExperimentConfig,
                       mu_prox: float,
                       generator: torch.Generator) -> Dict[str, float]:
    """Single-loss local training for the averaging baselines.  A positive
    mu_prox adds the proximal pull toward the downloaded parameters."""
    hyper = config.client
    params = list(state.backbone.parameters()) + list(state.d1.parameters())
    anchors = [p.detach().clone() for p in params]
    opt = torch.optim.Adam(params, lr=hyper.learning_rate,
                           weight_decay=hyper.weight_decay)
    state.backbone.train()
    state.d1.train()
    losses: List[float] = []
    for _ in range(hyper.local_epochs):
        for batch in _batches(state.num_nodes, hyper.batch_size, generator):
            rep = state.backbone(state.features, state.arcs, generator=generator)
            loss = F.cross_entropy(state.d1(rep[batch]), state.labels[batch])
            if mu_prox != 0.0:
                prox = sum((p - a).square().sum()
                           for p, a in zip(params, anchors))
                loss = loss + 0.5 * mu_prox * prox
            opt.zero_grad()
            loss.backward()
            opt.step()
            losses.append(float(loss.detach()))
    state.backbone.eval()
    state.d1.eval()
    with torch.no_grad():
        rep = state.backbone(state.features, state.arcs, generator=generator)
        acc = float((state.d1(rep).argmax(dim=1) == state.labels)
                    .double().mean())
    return {"cls": float(np.mean(losses)), "acc": acc}


class FederatedRun:
    """Owns all server and client state; `round()` advances one barrier."""

    def __init__(self, config: ExperimentConfig,
                 dataset: Optional[GraphDataset] = None,
                 upload_transform: Optional[UploadTransform] = None):
        config.validate()
        self.config = config
        run = config.run
        seed = run.master_seed
        self.upload_transform = upload_transform

        self.dataset = dataset if dataset is not None else build_dataset(config)
        self.features_t = to_tensor(self.dataset.features)
        self.arcs_t = edges_to_arcs(self.dataset.edges)

        self.shards = dirichlet_partition(
            self.dataset, PartitionSpec(run.num_clients, run.alpha, seed))
        self.label_dist = estimate_label_distribution(
            label_histogram(self.shards))

        backbone_cfg = replace(config.backbone,
                               feature_dim=self.dataset.feature_dim,
                               adaptive=not run.disable_adaptive_mp)
        d_r = backbone_cfg.representation_dim
        self.global_backbone = AdaptiveBackbone(
            backbone_cfg, torch_generator(seed, "backbone"))
        self.global_d1 = Classifier(
            d_r, (64,), generator=torch_generator(seed, "classifier"))
        self.global_gen = ConditionalGenerator(
            config.client.noise_dim, d_r, 64,
            generator=torch_generator(seed, "generator"))

        self.clients: List[ClientState] = []
        for shard in self.shards:
            feats = self.dataset.features[shard.node_indices]
            labels = self.dataset.labels[shard.node_indices]
            self.clients.append(init_client(
                shard.client_id, feats, shard.edges, labels,
                self.global_backbone, self.global_d1, config.client, seed))

        self.layout = parameter_layout(self.global_backbone)
        num_params = flatten_params(self.global_backbone).numel()
        self.raw_masks = init_masks(run.num_clients, num_params)

        self.is_fedrio = run.method == "fedrio"
        self.use_rl = self.is_fedrio and not run.disable_rl
        self.agent: Optional[DdqnAgent] = None
        if self.use_rl:
            state_dim = run.num_clients * (d_r + 3)
            self.agent = DdqnAgent(state_dim, run.num_clients, config.agent,
                                   config.reward,
                                   torch_generator(seed, "agent"))

        self._probe = self._build_probe(seed)
        self.prev_state: Optional[np.ndarray] = None
        self.records: List[RoundRecord] = []
        self.last_uploads: Optional[torch.Tensor] = None
        self.last_snapshots: Optional[torch.Tensor] = None
        self.t = 0

    def _build_probe(self, seed: int,
                     per_class: int = 32) -> Tuple[torch.Tensor, torch.Tensor,
                                                   torch.Tensor]:
        """Fixed stratified node sample all clients embed each round."""
        rng = np.random.default_rng(seed + 1)
        val = self.dataset.indices("val")
        picks = []
        for cls in (0, 1):
            members = val[self.dataset.labels[val] == cls]
            members = rng.permutation(members)
            picks.append(members[:per_class])
        nodes = np.sort(np.concatenate(picks))
        feats = to_tensor(self.dataset.features[nodes])
        arcs = edges_to_arcs(_induced_subgraph(self.dataset, nodes))
        labels = torch.as_tensor(self.dataset.labels[nodes], dtype=torch.long)
        return feats, arcs, labels

    # ------------------------------------------------------------- measurement

    def evaluate(self, split: str = "val",
                 round_index: int = 0) -> Tuple[float, float]:
        """Accuracy and macro F1 of the global model on a dataset split."""
        idx = torch.as_tensor(self.dataset.indices(split), dtype=torch.long)
        gen = torch_generator(self.config.run.master_seed, "eval", split,
                              round_index)
        self.global_backbone.eval()
        self.global_d1.eval()
        with torch.no_grad():
            rep = self.global_backbone(self.features_t, self.arcs_t,
                                       generator=gen)
            pred = self.global_d1(rep[idx]).argmax(dim=1).numpy()
        truth = self.dataset.labels[idx.numpy()]
        acc = float(np.mean(pred == truth))
        f1 = float(f1_score(truth, pred, average="macro", zero_division=0))
        return acc, f1

    def _embed_probe(self, round_index: int) -> List[torch.Tensor]:
        """Embed the shared probe with every client backbone under shared
        gate noise, so the gates cannot explain cross-client differences."""
        feats, arcs, _ = self._probe
        gen = torch_generator(self.config.run.master_seed, "probe",
                              round_index)
        n = feats.shape[0]
        noise = (torch.rand(n, 2, generator=gen),
                 torch.rand(n, 2, generator=gen))
        reprs = []
        with torch.no_grad():
            for client in self.clients:
                client.backbone.eval()
                reprs.append(client.backbone(feats, arcs, gate_noise=noise))
        return reprs

    def consistency_score(self, round_index: int) -> float:
        return feature_consistency_score(self._embed_probe(round_index),
                                         self._probe[2])

    def client_mask_means(self) -> np.ndarray:
        """Mean normalized mask weight per client."""
        return normalize_masks(self.raw_masks).mean(dim=1).numpy()

    # ------------------------------------------------------------------ rounds

    def _choose_momenta(self, t: int) -> Tuple[Optional[np.ndarray], List[float]]:
        if not self.use_rl:
            return None, [1.0] * self.config.run.num_clients
        assert self.agent is not None
        indices = self.agent.act(
            self.prev_state, t - 1,
            torch_generator(self.config.run.master_seed, "act", t))
        return indices, momentum_values(indices).tolist()

    def _collect_uploads(self, t: int) -> torch.Tensor:
        flats = []
        for client in self.clients:
            flat = flatten_params(client.backbone)
            if self.upload_transform is not None:
                flat = self.upload_transform(client.client_id, t, flat)
            flats.append(flat)
        return torch.stack(flats)

    def _fedrio_round(self, t: int) -> RoundRecord:
        run = self.config.run
        seed = run.master_seed
        action_idx, momenta = self._choose_momenta(t)

        snapshots = []
        for client, m in zip(self.clients, momenta):
            apply_client_update(client.backbone, self.global_backbone, m)
            apply_client_update(client.d1, self.global_d1, m)
            client.snapshot.load_state_dict(client.backbone.state_dict())
            snapshots.append(flatten_params(client.backbone))
        snapshot_flats = torch.stack(snapshots)
        self.last_snapshots = snapshot_flats

        globals_ = DownloadedGlobals(self.global_backbone, self.global_d1,
                                     self.global_gen, self.label_dist)
        reports = []
        losses: Dict[str, Dict[str, float]] = {}
        for client in self.clients:
            _, metrics = run_local_round(
                client, globals_, self.config.client,
                torch_generator(seed, "client", client.client_id, t))
            reports.append(metrics)
            losses[str(client.client_id)] = {
                "stage1": metrics.stage1_loss,
                "stage2": metrics.stage2_loss,
                "stage3": metrics.stage3_loss,
                "acc": metrics.local_accuracy,
            }

        uploads = self._collect_uploads(t)
        self.last_uploads = uploads
        prev_flat = flatten_params(self.global_backbone)
        mask_loss_value: Optional[float] = None
        if run.disable_masks:
            uniform = normalize_masks(
                torch.zeros_like(self.raw_masks))
            new_global = aggregate(prev_flat, uploads, snapshot_flats, uniform)
        else:
            result = aggregate_round(
                prev_flat, uploads, snapshot_flats, self.raw_masks,
                self.layout, self.global_gen, self.global_d1,
                self.label_dist, self.config.aggregation,
                torch_generator(seed, "masks", t))
            self.raw_masks = result.raw_masks
            new_global = result.new_global
            mask_loss_value = result.mask_loss
        load_flat_params(self.global_backbone, new_global)
        aggregate_classifier(self.global_d1, [c.d1 for c in self.clients])

        distill_loss_value: Optional[float] = None
        if self.config.distill.steps > 0:
            history = train_global_generator(
                self.global_gen, self.global_d1,
                [c.d1 for c in self.clients], self.label_dist,
                self.config.distill, torch_generator(seed, "distill", t))
            if history:
                distill_loss_value = history[-1]

        acc, f1 = self.evaluate("val", t)
        consistency = self.consistency_score(t)

        reward_value: Optional[float] = None
        if self.use_rl:
            assert self.agent is not None and action_idx is not None
            state_t = build_state(reports, run.num_clients)
            reward_value = compute_reward(acc, self.config.reward)
            if self.prev_state is not None:
                self.agent.observe(Transition(
                    self.prev_state, np.asarray(action_idx), reward_value,
                    state_t, terminal=(t == run.rounds)))
            self.agent.learn(self.config.agent.updates_per_round,
                             torch_generator(seed, "learn", t))
            self.prev_state = state_t

        return RoundRecord(
            round_index=t, accuracy=acc, macro_f1=f1, client_losses=losses,
            wall_clock_s=0.0,
            action=momenta if self.use_rl else None,
            reward=reward_value, mask_loss=mask_loss_value,
            distill_loss=distill_loss_value, consistency=consistency)

    def _baseline_round(self, t: int) -> RoundRecord:
        run = self.config.run
        seed = run.master_seed
        mu = run.mu_prox if run.method == "fedprox" else 0.0

        losses: Dict[str, Dict[str, float]] = {}
        for client in self.clients:
            apply_client_update(client.backbone, self.global_backbone, 1.0)
            apply_client_update(client.d1, self.global_d1, 1.0)
            losses[str(client.client_id)] = _plain_local_round(
                client, self.config, mu,
                torch_generator(seed, "client", client.client_id, t))

        uploads = self._collect_uploads(t)
        self.last_uploads = uploads
        load_flat_params(self.global_backbone, uploads.mean(dim=0))
        aggregate_classifier(self.global_d1, [c.d1 for c in self.clients])

        acc, f1 = self.evaluate("val", t)
        consistency = self.consistency_score(t)
        return RoundRecord(
            round_index=t, accuracy=acc, macro_f1=f1, client_losses=losses,
            wall_clock_s=0.0, consistency=consistency)

    def round(self) -> RoundRecord:
        """Advance one communication round and append its record."""
        t = self.t + 1
        started = time.perf_counter()
        if self.is_fedrio:
            record = self._fedrio_round(t)
        else:
            record = self._baseline_round(t)
        record.wall_clock_s = time.perf_counter() - started
        self.t = t
        self.records.append(record)
        return record

    def run(self, sink: Optional[Callable[[RoundRecord], None]] = None
            ) -> Tuple[RunSummary, List[RoundRecord]]:
        """Run all configured rounds, streaming records to `sink`."""
        for _ in range(self.config.run.rounds):
            record = self.round()
            if sink is not None:
                sink(record)
        return self.summary(), self.records

    def summary(self) -> RunSummary:
        if not self.records:
            raise ValueError("no rounds have run yet")
        best_acc = max(r.accuracy for r in self.records)
        best_f1 = max(r.macro_f1 for r in self.records)
        reach = rounds_to_target(self.records,
                                 self.config.reward.target_accuracy)
        return RunSummary(
            best_accuracy=best_acc, best_f1=best_f1, rounds_to_target=reach,
            final_consistency=self.records[-1].consistency)

    def state_dict(self) -> Dict[str, Any]:
        """Checkpoint payload: server models plus client backbones."""
        return {
            "round": self.t,
            "backbone": self.global_backbone.state_dict(),
            "classifier": self.global_d1.state_dict(),
            "generator": self.global_gen.state_dict(),
            "raw_masks": self.raw_masks,
            "client_backbones": [c.backbone.state_dict()
                                 for c in self.clients],
        }

    def load_state(self, payload: Dict[str, Any]) -> None:
        self.t = int(payload["round"])
        self.global_backbone.load_state_dict(payload["backbone"])
        self.global_d1.load_state_dict(payload["classifier"])
        self.global_gen.load_state_dict(payload["generator"])
        self.raw_masks = payload["raw_masks"]
        for client, sd in zip(self.clients, payload["client_backbones"]):
            client.backbone.load_state_dict(sd)

    def probe_representations(self) -> Tuple[Dict[int, np.ndarray],
                                             np.ndarray]:
        """Each client's embedding of the shared probe set, plus labels."""
        reprs = self._embed_probe(self.t)
        out = {c.client_id: r.numpy()
               for c, r in zip(self.clients, reprs)}
        return out, self._probe[2].numpy()


def run_experiment(config: ExperimentConfig,
                   sink: Optional[Callable[[RoundRecord], None]] = None
                   ) -> Tuple[RunSummary, List[RoundRecord], FederatedRun]:
    """Build a run from config, execute it, and return everything."""
    sim = FederatedRun(config)
    summary, records = sim.run(sink)
    return summary, records, sim
