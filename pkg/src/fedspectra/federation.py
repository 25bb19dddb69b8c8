"""Round orchestration: local training, aggregation barrier, redistribution.

Clients train for `comm_interval` local epochs between aggregation events;
the server merges uploads with either plain weighted averaging or the
frequency-domain rule, optionally excluding batch-norm entries. Clients
may train on a thread pool; per-client RNG streams and a fixed aggregation
order keep results independent of scheduling.
"""

from __future__ import annotations

import csv
import json
import logging
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from . import cto, fmmt, metrics
from .datasynth import ClientPartition, augment
from .errors import CongruenceError, ConfigError, DomainError
from .nn import LrSchedule, Network, backward, build_network, cross_entropy, sgd_step
from .spectral import CfaSchedule, cfa_aggregate, schedule_threshold
from .tensors import ParamEntry, ParameterSet, require_all_congruent

logger = logging.getLogger(__name__)

AGGREGATORS = ("fedavg", "cfa")
DOMAIN_MODES = ("complex", "amplitude_phase")

METRICS_HEADER = [
    "round",
    "epoch",
    "client_id",
    "model",
    "split",
    "accuracy",
    "macro_f1",
    "macro_auc",
    "loss",
]


@dataclass
class FederationConfig:
    num_clients: int = 4
    comm_interval: int = 10
    total_epochs: int = 300
    aggregator: str = "cfa"
    cfa: CfaSchedule = field(default_factory=CfaSchedule)
    lambda1: float = 0.6
    lambda2: float = 0.8
    batch_size: int = 20
    lr: LrSchedule = field(default_factory=LrSchedule)
    fedprox_mu: float = 0.0
    fedbn_exclude_bn: bool = False
    cto_enabled: bool = True
    seed: int = 0
    domain_mode: str = "complex"
    arch: str = "smallcnn"
    refine_trains_deputy: bool = True
    augment: bool = True
    save_checkpoints: bool = True

    def validate(self) -> None:
        if self.num_clients < 1:
            raise ConfigError("num_clients must be >= 1")
        if self.comm_interval < 1 or self.total_epochs < self.comm_interval:
            raise ConfigError("need total_epochs >= comm_interval >= 1")
        if self.total_epochs % self.comm_interval != 0:
            raise ConfigError("comm_interval must divide total_epochs")
        if self.aggregator not in AGGREGATORS:
            raise ConfigError(f"aggregator must be one of {AGGREGATORS}")
        if self.domain_mode not in DOMAIN_MODES:
            raise ConfigError(f"domain_mode must be one of {DOMAIN_MODES}")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be positive")
        if not (0.0 <= self.lambda1 <= self.lambda2 <= 1.0):
            raise ConfigError("need 0 <= lambda1 <= lambda2 <= 1")
        if self.fedprox_mu < 0:
            raise ConfigError("fedprox_mu must be nonnegative")


@dataclass
class MetricsRecord:
    round: int
    epoch: int
    client_id: int
    model: str
    split: str
    accuracy: float
    macro_f1: float
    macro_auc: float
    loss: float

    def row(self) -> List[str]:
        fmt = lambda v: f"{v:.12g}"
        return [
            str(self.round),
            str(self.epoch),
            str(self.client_id),
            self.model,
            self.split,
            fmt(self.accuracy),
            fmt(self.macro_f1),
            fmt(self.macro_auc),
            fmt(self.loss),
        ]


@dataclass
class RoundReport:
    round: int
    epoch: int
    s_threshold: Optional[float]
    records: List[MetricsRecord]
    agg_seconds: float


# ---------------------------------------------------------------------------
# Aggregation primitives


def fedavg_aggregate(
    sets: Sequence[ParameterSet], weights: Sequence[float]
) -> ParameterSet:
    """Weighted element-wise mean; weights normalized to sum 1."""
    require_all_congruent(sets)
    if len(weights) != len(sets):
        raise DomainError("one weight per parameter set required")
    w = np.asarray(weights, dtype=np.float64)
    if np.any(w <= 0):
        raise DomainError("weights must be positive")
    w = w / w.sum()
    out = sets[0].copy()
    for idx in range(len(out)):
        acc = np.zeros_like(out.entries[idx].tensor)
        for wk, s in zip(w, sets):
            acc += wk * s.entries[idx].tensor
        out.entries[idx].tensor = acc
    return out


def fedbn_filter(ps: ParameterSet) -> Tuple[ParameterSet, ParameterSet]:
    """Partition into (shared, retained): batch-norm entries stay local."""
    shared = [e.copy() for e in ps.entries if not e.is_batchnorm]
    retained = [e.copy() for e in ps.entries if e.is_batchnorm]
    return ParameterSet(shared), ParameterSet(retained)


def _merge_retained(
    template: ParameterSet, shared: ParameterSet, retained: ParameterSet
) -> ParameterSet:
    """Reassemble a full set in template order from the two partitions."""
    shared_names = set(shared.names())
    entries = []
    for e in template.entries:
        src = shared if e.name in shared_names else retained
        entries.append(src.get(e.name).copy())
    return ParameterSet(entries)


# ---------------------------------------------------------------------------
# Client runtimes


@dataclass
class _BaselineClient:
    client_id: int
    model: Network
    data: ClientPartition
    last_received: Optional[ParameterSet] = None


@dataclass
class _ClientRuntime:
    client_id: int
    rng: np.random.Generator
    cto_state: Optional[cto.ClientState] = None
    baseline: Optional[_BaselineClient] = None

    @property
    def data(self) -> ClientPartition:
        holder = self.cto_state if self.cto_state is not None else self.baseline
        return holder.data

    def upload(self) -> ParameterSet:
        if self.cto_state is not None:
            return self.cto_state.deputy.parameters()
        return self.baseline.model.parameters()

    def receive(self, ps: ParameterSet) -> None:
        if self.cto_state is not None:
            cto.on_receive(self.cto_state, ps)
        else:
            self.baseline.model.import_parameters(ps)
            self.baseline.last_received = ps.copy()

    def models(self) -> Dict[str, Network]:
        if self.cto_state is not None:
            return {
                "deputy": self.cto_state.deputy,
                "personalized": self.cto_state.personalized,
            }
        return {"model": self.baseline.model}


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start : start + batch_size]


def client_local_epoch(
    runtime: _ClientRuntime, epoch: int, cfg: FederationConfig
) -> Optional[dict]:
    """Train one local epoch; returns the guard event for CTO clients."""
    train = runtime.data.train
    n = len(train)
    if n == 0:
        raise DomainError(f"client {runtime.client_id} has no training data")
    for idx in _batches(n, cfg.batch_size, runtime.rng):
        images = train.images[idx]
        labels = train.labels[idx]
        if cfg.augment:
            images = np.stack([augment(im, runtime.rng) for im in images])
        if runtime.cto_state is not None:
            cto.train_batch(
                runtime.cto_state, images, labels, epoch, cfg.lr, cfg.fedprox_mu
            )
        else:
            client = runtime.baseline
            grads, _ = backward(client.model, images, labels)
            prox = None
            if cfg.fedprox_mu > 0 and client.last_received is not None:
                prox = (cfg.fedprox_mu, client.last_received)
            sgd_step(client.model, grads, epoch, cfg.lr, prox=prox)

    if runtime.cto_state is None:
        return None
    state = runtime.cto_state
    phase_from = state.phase.value
    phi_c, phi_q = cto.evaluate(state, "val")
    phase_to = cto.maybe_advance(state, phi_c, phi_q).value
    return {
        "type": "guard",
        "epoch": epoch + 1,
        "client_id": runtime.client_id,
        "phase_from": phase_from,
        "phase_to": phase_to,
        "phi_c": round(phi_c, 12),
        "phi_q": round(phi_q, 12),
    }


# ---------------------------------------------------------------------------
# Experiment loop


def _init_clients(
    cfg: FederationConfig, partitions: Sequence[ClientPartition], classes: int
) -> List[_ClientRuntime]:
    sample = partitions[0].train.images
    channels, height, width = sample.shape[1:]
    init_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 1]))
    base = build_network(cfg.arch, channels, height, width, classes, init_rng)
    base_params = base.parameters()

    runtimes = []
    for part in partitions:
        rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 2, part.client_id]))
        if cfg.cto_enabled:
            q = build_network(cfg.arch, channels, height, width, classes, init_rng)
            c = build_network(cfg.arch, channels, height, width, classes, init_rng)
            q.import_parameters(base_params)
            c.import_parameters(base_params)
            state = cto.ClientState(
                client_id=part.client_id,
                personalized=q,
                deputy=c,
                data=part,
                lambda1=cfg.lambda1,
                lambda2=cfg.lambda2,
                refine_trains_deputy=cfg.refine_trains_deputy,
            )
            runtimes.append(_ClientRuntime(part.client_id, rng, cto_state=state))
        else:
            model = build_network(cfg.arch, channels, height, width, classes, init_rng)
            model.import_parameters(base_params)
            runtimes.append(
                _ClientRuntime(
                    part.client_id,
                    rng,
                    baseline=_BaselineClient(part.client_id, model, part),
                )
            )
    return runtimes


def _aggregate(
    cfg: FederationConfig, uploads: List[ParameterSet], weights: List[int], s: float
) -> List[ParameterSet]:
    """Produce one new parameter set per client (identical under fedavg)."""
    if cfg.fedbn_exclude_bn:
        parts = [fedbn_filter(u) for u in uploads]
        shared_sets = [p[0] for p in parts]
        retained_sets = [p[1] for p in parts]
    else:
        shared_sets = uploads
        retained_sets = None

    if len(shared_sets[0]) == 0:
        merged = [u.copy() for u in uploads]  # everything retained: no-op
        return merged

    if cfg.aggregator == "fedavg":
        mean = fedavg_aggregate(shared_sets, weights)
        shared_out = [mean.copy() for _ in uploads]
    else:
        shared_out = cfa_aggregate(shared_sets, s, cfg.domain_mode)

    if retained_sets is None:
        return shared_out
    return [
        _merge_retained(uploads[k], shared_out[k], retained_sets[k])
        for k in range(len(uploads))
    ]


def _evaluate_round(
    runtime: _ClientRuntime, round_idx: int, epoch: int, classes: int
) -> List[MetricsRecord]:
    records = []
    for model_name, net in runtime.models().items():
        for split in ("val", "test"):
            data = runtime.data.split(split)
            if len(data) == 0:
                continue
            probs = net.forward(data.images)
            preds = probs.argmax(axis=1)
            cm = metrics.confusion_matrix(data.labels, preds, classes)
            try:
                auc = metrics.macro_auc(probs, data.labels)
            except DomainError:
                auc = float("nan")
            records.append(
                MetricsRecord(
                    round=round_idx,
                    epoch=epoch,
                    client_id=runtime.client_id,
                    model=model_name,
                    split=split,
                    accuracy=metrics.accuracy(cm),
                    macro_f1=metrics.macro_f1(cm),
                    macro_auc=auc,
                    loss=cross_entropy(probs, data.labels),
                )
            )
    return records


def _max_workers(n_clients: int) -> int:
    raw = os.environ.get("FEDSPECTRA_THREADS", "0")
    try:
        cap = int(raw)
    except ValueError:
        raise ConfigError(f"FEDSPECTRA_THREADS must be an integer, got {raw!r}")
    if cap < 0:
        raise ConfigError("FEDSPECTRA_THREADS must be >= 0")
    if cap == 0:
        cap = min(n_clients, os.cpu_count() or 1)
    return max(1, min(cap, n_clients))


def _write_checkpoint(out_dir: Path, round_idx: int, runtime: _ClientRuntime) -> None:
    for model_name, net in runtime.models().items():
        cdir = (
            out_dir
            / "checkpoints"
            / f"round_{round_idx:03d}"
            / f"client_{runtime.client_id}"
            / model_name
        )
        cdir.mkdir(parents=True, exist_ok=True)
        rows = []
        for entry in net.parameters():
            fname = f"{entry.name}.fmmt"
            fmmt.write_tensor(cdir / fname, entry.tensor)
            rows.append(
                (entry.name, entry.kind, str(entry.is_batchnorm).lower(), fname)
            )
        with open(cdir / "manifest.csv", "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["name", "kind", "is_batchnorm", "filename"])
            writer.writerows(rows)


def run_experiment(
    cfg: FederationConfig,
    partitions: Sequence[ClientPartition],
    out_dir=None,
    classes: Optional[int] = None,
) -> List[RoundReport]:
    """Run the full federated training loop; write artifacts if out_dir set."""
    cfg.validate()
    if len(partitions) != cfg.num_clients:
        raise ConfigError(
            f"{len(partitions)} partitions for num_clients={cfg.num_clients}"
        )
    if classes is None:
        classes = (
            int(
                max(
                    max(p.split(s).labels.max() for s in ("train", "val", "test") if len(p.split(s)))
                    for p in partitions
                )
            )
            + 1
        )
    if cfg.augment:
        sample = partitions[0].train.images
        if sample.shape[-1] != sample.shape[-2]:
            raise ConfigError("augmentation requires square images")

    runtimes = _init_clients(cfg, partitions, classes)
    weights = [len(p.train) for p in partitions]
    workers = _max_workers(cfg.num_clients)
    events: List[dict] = []
    reports: List[RoundReport] = []

    pool = ThreadPoolExecutor(max_workers=workers) if workers > 1 else None
    try:
        for epoch in range(cfg.total_epochs):
            if pool is not None:
                epoch_events = list(
                    pool.map(
                        lambda rt: client_local_epoch(rt, epoch, cfg), runtimes
                    )
                )
            else:
                epoch_events = [
                    client_local_epoch(rt, epoch, cfg) for rt in runtimes
                ]
            events.extend(ev for ev in epoch_events if ev is not None)

            if (epoch + 1) % cfg.comm_interval != 0:
                continue
            round_idx = (epoch + 1) // cfg.comm_interval
            s = (
                schedule_threshold(cfg.cfa, epoch + 1)
                if cfg.aggregator == "cfa"
                else None
            )
            t0 = time.perf_counter()
            uploads = [rt.upload() for rt in runtimes]
            new_sets = _aggregate(cfg, uploads, weights, s if s is not None else 0.0)
            agg_seconds = time.perf_counter() - t0
            for rt, ps in zip(runtimes, new_sets):
                rt.receive(ps)
            events.append(
                {
                    "type": "aggregation",
                    "round": round_idx,
                    "epoch": epoch + 1,
                    "s": None if s is None else round(s, 12),
                }
            )
            records = []
            for rt in runtimes:
                records.extend(_evaluate_round(rt, round_idx, epoch + 1, classes))
            reports.append(RoundReport(round_idx, epoch + 1, s, records, agg_seconds))
            if out_dir is not None and cfg.save_checkpoints:
                for rt in runtimes:
                    _write_checkpoint(Path(out_dir), round_idx, rt)
    finally:
        if pool is not None:
            pool.shutdown()

    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        with open(out_dir / "metrics.csv", "w", newline="\n") as f:
            writer = csv.writer(f, lineterminator="\n")
            writer.writerow(METRICS_HEADER)
            for report in reports:
                for rec in report.records:
                    writer.writerow(rec.row())
        with open(out_dir / "events.jsonl", "w", newline="\n") as f:
            for ev in events:
                f.write(json.dumps(ev, separators=(",", ":")) + "\n")
    return reports
