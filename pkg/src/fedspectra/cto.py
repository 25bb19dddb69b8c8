"""Per-client three-phase knowledge-transfer state machine.

Each client keeps a personalized model q and a deputy model c. The deputy
receives the server aggregate; the phases control who teaches whom:

  retrieve    q teaches c (c recovers from the aggregation shock)
  reciprocate mutual distillation between q and c
  refine      c teaches q (global knowledge lands in the personalized model)

Advancement is gated on validation performance: retrieve -> reciprocate
when phi(c) >= lambda1 * phi(q), reciprocate -> refine when
phi(c) >= lambda2 * phi(q). Receiving fresh server parameters resets the
machine to retrieve. The personalized model is never overwritten by the
server.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Callable, Optional, Tuple

import numpy as np

from . import metrics
from .datasynth import ClientPartition
from .errors import DomainError
from .nn import LrSchedule, Network, backward, cross_entropy, kl_divergence, sgd_step
from .tensors import ParameterSet


class CtoPhase(enum.Enum):
    RETRIEVE = "retrieve"
    RECIPROCATE = "reciprocate"
    REFINE = "refine"


_ORDER = [CtoPhase.RETRIEVE, CtoPhase.RECIPROCATE, CtoPhase.REFINE]


@dataclass
class ClientState:
    client_id: int
    personalized: Network  # model q: private, never replaced by the server
    deputy: Network  # model c: receives server aggregates
    data: ClientPartition
    lambda1: float = 0.6
    lambda2: float = 0.8
    phase: CtoPhase = CtoPhase.RETRIEVE
    epoch: int = 0
    refine_trains_deputy: bool = True
    last_received: Optional[ParameterSet] = None
    best_val: float = -1.0
    best_params: Optional[ParameterSet] = None

    def __post_init__(self):
        if not (0.0 <= self.lambda1 <= self.lambda2 <= 1.0):
            raise DomainError(
                f"need 0 <= lambda1 <= lambda2 <= 1, got "
                f"({self.lambda1}, {self.lambda2})"
            )
        self.personalized.parameters().require_congruent(self.deputy.parameters())


def on_receive(state: ClientState, aggregated: ParameterSet) -> None:
    """Install server parameters into the deputy and reset to retrieve."""
    state.deputy.parameters().require_congruent(aggregated)
    state.deputy.import_parameters(aggregated)
    state.last_received = aggregated.copy()
    state.phase = CtoPhase.RETRIEVE


def train_batch(
    state: ClientState,
    batch: np.ndarray,
    labels,
    epoch: int,
    lr_sch: LrSchedule,
    fedprox_mu: float = 0.0,
) -> Tuple[float, float]:
    """One phase-dependent update on both models; returns (loss_q, loss_c).

    Teacher distributions are taken before either model updates and are
    constants during differentiation. The optional proximal term anchors
    the deputy to the last received server parameters.
    """
    q, c = state.personalized, state.deputy
    q_teacher = q.forward(batch, train=False)
    c_teacher = c.forward(batch, train=False)
    prox = None
    if fedprox_mu > 0.0 and state.last_received is not None:
        prox = (fedprox_mu, state.last_received)

    if state.phase is CtoPhase.RETRIEVE:
        grads_q, probs_q = backward(q, batch, labels)
        sgd_step(q, grads_q, epoch, lr_sch)
        loss_q = cross_entropy(probs_q, labels)

        grads_c, probs_c = backward(c, batch, labels, teacher_probs=q_teacher)
        sgd_step(c, grads_c, epoch, lr_sch, prox=prox)
        loss_c = cross_entropy(probs_c, labels) + kl_divergence(q_teacher, probs_c)

    elif state.phase is CtoPhase.RECIPROCATE:
        grads_c, probs_c = backward(c, batch, labels, teacher_probs=q_teacher)
        sgd_step(c, grads_c, epoch, lr_sch, prox=prox)
        loss_c = cross_entropy(probs_c, labels) + kl_divergence(q_teacher, probs_c)

        grads_q, probs_q = backward(q, batch, labels, teacher_probs=c_teacher)
        sgd_step(q, grads_q, epoch, lr_sch)
        loss_q = cross_entropy(probs_q, labels) + kl_divergence(c_teacher, probs_q)

    else:  # REFINE
        grads_q, probs_q = backward(q, batch, labels, teacher_probs=c_teacher)
        sgd_step(q, grads_q, epoch, lr_sch)
        loss_q = cross_entropy(probs_q, labels) + kl_divergence(c_teacher, probs_q)

        if state.refine_trains_deputy:
            grads_c, probs_c = backward(c, batch, labels)
            sgd_step(c, grads_c, epoch, lr_sch, prox=prox)
            loss_c = cross_entropy(probs_c, labels)
        else:
            loss_c = cross_entropy(c_teacher, labels)

    return loss_q, loss_c


def maybe_advance(state: ClientState, phi_c: float, phi_q: float) -> CtoPhase:
    """Advance at most one phase if the guard for the next phase holds.

    Phases never regress within a communication interval.
    """
    if state.phase is CtoPhase.RETRIEVE and phi_c >= state.lambda1 * phi_q:
        state.phase = CtoPhase.RECIPROCATE
    elif state.phase is CtoPhase.RECIPROCATE and phi_c >= state.lambda2 * phi_q:
        state.phase = CtoPhase.REFINE
    return state.phase


def evaluate(state: ClientState, split: str) -> Tuple[float, float]:
    """Macro-F1 of deputy and personalized models on the given split.

    Tracks the best-so-far personalized parameters by validation score.
    """
    data = state.data.split(split)
    if len(data) == 0:
        raise DomainError(f"split {split!r} of client {state.client_id} is empty")
    classes = state.personalized.forward(data.images[:1]).shape[1]
    phis = []
    for model in (state.deputy, state.personalized):
        probs = model.forward(data.images)
        preds = probs.argmax(axis=1)
        cm = metrics.confusion_matrix(data.labels, preds, classes)
        phis.append(metrics.macro_f1(cm))
    phi_c, phi_q = phis
    if split == "val" and phi_q > state.best_val:
        state.best_val = phi_q
        state.best_params = state.personalized.parameters()
    return phi_c, phi_q
