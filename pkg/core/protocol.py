"""
The K-passive + 1-active split-learning loop.

Each round: passive parties send forward embeddings H_k, the active party sums
them, runs its passport-obfuscated head, updates itself and fans the gradient
dL/dH back out; passive parties then finish the chain rule locally.
"""
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np
from loguru import logger

from config.experiment_config import TrainingConfig
from core.errors import AlignmentError, ProtocolError, ShapeMismatchError
from core.losses import cross_entropy_loss
from core.network import backward, forward
from core.optimizer import sgd_step
from core.parties import ActiveParty, BatchScheduler, PassiveParty
from core.transport import BackwardGradient, FaultInjector, ForwardEmbedding, Transport
from core.tensor import Tensor
from security.defenses import apply_tensor_defense


@dataclass
class TrainingHistory:
    losses: List[float] = field(default_factory=list)
    accuracies: List[Tuple[int, float]] = field(default_factory=list)
    rounds: int = 0
    wall_time_s: float = 0.0

    @property
    def final_accuracy(self) -> Optional[float]:
        return self.accuracies[-1][1] if self.accuracies else None


def align_records(id_lists: Sequence[Sequence[int]]) -> List[int]:
    """ID-intersection stub standing in for PSI: the sorted common ids."""
    if not id_lists:
        raise AlignmentError("no id lists to align")
    for k, ids in enumerate(id_lists):
        if len(set(ids)) != len(ids):
            raise AlignmentError(f"party {k} has duplicate record ids")
    common = set(id_lists[0])
    for ids in id_lists[1:]:
        common &= set(ids)
    if not common:
        raise AlignmentError("empty record intersection")
    return sorted(common)


def align_parties(passives: Sequence[PassiveParty], active: ActiveParty) -> List[int]:
    ordering = align_records([p.record_ids for p in passives] + [active.record_ids])
    for party in passives:
        party.reindex(ordering)
    active.reindex(ordering)
    logger.info(f"[Protocol] aligned {len(ordering)} records across {len(passives) + 1} parties")
    return ordering


def passive_forward(party: PassiveParty, batch: Sequence[int], round: int,
                    transport: Optional[Transport] = None) -> ForwardEmbedding:
    if round <= party.last_round or round in party.traces:
        raise ProtocolError("round replay", party=party.id, round=round)
    batch = np.asarray(batch, dtype=np.int64)
    if batch.size == 0 or batch.min() < 0 or batch.max() >= len(party.features):
        raise ProtocolError(f"batch indices outside [0, {len(party.features)})", party=party.id, round=round)
    keys = party.training_keys(len(batch))
    trace = forward(party.model, party.features[batch], keys)
    H = apply_tensor_defense(trace.output, party.defense, party.rng, boundary="embeddings")
    party.traces[round] = trace
    party.last_round = round
    message = ForwardEmbedding(party=party.id, round=round, batch=tuple(int(i) for i in batch), H=H)
    if transport is not None:
        transport.send(message)
    return message


def active_step(active: ActiveParty, embeddings: Sequence[ForwardEmbedding], lr: float, weight_decay: float = 0.0,
                labels: Optional[Sequence[int]] = None,
                transport: Optional[Transport] = None) -> Tuple[float, List[BackwardGradient]]:
    """Sum fusion, obfuscated head, local update of omega; returns dL/dH_k for every party."""
    by_party = {m.party: m for m in embeddings}
    for pid in active.party_ids:
        if pid not in by_party:
            round_hint = embeddings[0].round if embeddings else None
            raise ProtocolError("missing forward embedding", party=pid, round=round_hint)
    if len(by_party) != len(embeddings) or set(by_party) != set(active.party_ids):
        raise ProtocolError(f"unexpected embedding senders {sorted(by_party)}", party=active.id)
    ordered = [by_party[pid] for pid in active.party_ids]
    first = ordered[0]
    for msg in ordered[1:]:
        if msg.round != first.round or msg.batch != first.batch:
            raise ProtocolError("embeddings disagree on round or batch", party=msg.party, round=msg.round)
        if msg.H.shape != first.H.shape:
            raise ShapeMismatchError("embedding shapes differ across parties", expected=first.H.shape, actual=msg.H.shape)
    if first.round <= active.last_round:
        raise ProtocolError("round replay", party=active.id, round=first.round)

    H = ordered[0].H
    for msg in ordered[1:]:
        H = H + msg.H
    y = active.labels[list(first.batch)] if labels is None else np.asarray(labels, dtype=np.int64)
    keys = active.training_keys(len(first.batch))
    trace = forward(active.model, H, keys)
    loss, logit_grad = cross_entropy_loss(trace.output, y)
    grads = backward(active.model, trace, logit_grad)
    sgd_step(active.model, grads, lr, weight_decay)
    active.last_round = first.round

    replies = []
    for msg in ordered:
        g = apply_tensor_defense(grads.input_gradient, active.defense, active.rng, boundary="gradients")
        reply = BackwardGradient(party=msg.party, round=msg.round, grad=g)
        if transport is not None:
            transport.send(reply)
        replies.append(reply)
    return loss, replies


def passive_update(party: PassiveParty, grad: BackwardGradient, lr: float, weight_decay: float = 0.0):
    """theta_k <- theta_k - lr * [dL/dH_k][dH_k/dtheta_k] through the retained round trace."""
    if grad.party != party.id:
        raise ProtocolError(f"gradient addressed to {grad.party}", party=party.id, round=grad.round)
    trace = party.traces.pop(grad.round, None)
    if trace is None:
        raise ProtocolError("no retained trace for this round", party=party.id, round=grad.round)
    if grad.grad.shape != trace.output.shape:
        raise ShapeMismatchError("backward gradient", expected=trace.output.shape, actual=grad.grad.shape)
    sgd_step(party.model, backward(party.model, trace, grad.grad), lr, weight_decay)


def predict(passives: Sequence[PassiveParty], active: ActiveParty, shards: Sequence[Tensor],
            batch_size: int = 256) -> np.ndarray:
    """Inference path: passports drawn per the slot's inference mode, no traces retained."""
    n = len(shards[0])
    preds = []
    for start in range(0, n, batch_size):
        stop = min(n, start + batch_size)
        H = None
        for party, shard in zip(passives, shards):
            h = forward(party.model, shard[start:stop], party.inference_keys(stop - start)).output
            H = h if H is None else H + h
        logits = forward(active.model, H, active.inference_keys(stop - start)).output
        preds.append(np.argmax(logits, axis=1))
    return np.concatenate(preds) if preds else np.zeros(0, dtype=np.int64)


def evaluate(passives: Sequence[PassiveParty], active: ActiveParty, shards: Sequence[Tensor],
             labels: Sequence[int], batch_size: int = 256) -> float:
    labels = np.asarray(labels, dtype=np.int64)
    if any(len(s) != len(labels) for s in shards):
        raise AlignmentError("test shards are not aligned with the test labels")
    if len(labels) == 0:
        return 0.0
    return float(np.mean(predict(passives, active, shards, batch_size) == labels))


def total_rounds(config: TrainingConfig, n: int) -> int:
    if config.rounds is not None:
        return config.rounds
    return config.epochs * -(-n // config.batch_size)


def train(config: TrainingConfig, passives: Sequence[PassiveParty], active: ActiveParty,
          test: Optional[Tuple[Sequence[Tensor], Sequence[int]]] = None,
          transport: Optional[Transport] = None) -> TrainingHistory:
    """Runs the three-step loop for the configured number of rounds."""
    n = len(active.labels)
    if len(passives) != len(active.party_ids) or any(len(p.features) != n for p in passives):
        raise AlignmentError("parties are not aligned; call align_parties first")
    scheduler = BatchScheduler(n, config.batch_size, config.seed)
    if transport is None:
        injector = FaultInjector(np.random.default_rng([config.seed, 0xFA17])) if config.fault_injection else None
        transport = Transport([p.id for p in passives], fault_injector=injector)
    rounds = total_rounds(config, n)
    per_epoch = scheduler.rounds_per_epoch
    history = TrainingHistory()
    started = time.perf_counter()
    pool = ThreadPoolExecutor(max_workers=len(passives)) if config.threaded_parties else None
    logger.info(f"[Protocol] training {rounds} rounds (K={len(passives)}, batch={config.batch_size}, "
                f"lr={config.lr}, threaded={config.threaded_parties})")
    try:
        for rnd, batch in scheduler.rounds(rounds):
            if pool is not None:
                list(pool.map(lambda p: passive_forward(p, batch, rnd, transport), passives))
            else:
                for party in passives:
                    passive_forward(party, batch, rnd, transport)
            embeddings = transport.collect_embeddings(rnd, timeout=60.0 if pool is not None else 0.0)
            loss, _ = active_step(active, embeddings, config.lr, config.weight_decay, transport=transport)

            def finish(party: PassiveParty):
                passive_update(party, transport.receive_gradient(party.id, rnd, timeout=60.0),
                               config.lr, config.weight_decay)

            if pool is not None:
                list(pool.map(finish, passives))
            else:
                for party in passives:
                    finish(party)
            history.losses.append(loss)
            history.rounds = rnd + 1
            logger.debug(f"[Protocol] round {rnd} loss={loss:.5f}")

            interval = config.eval_every or per_epoch
            if test is not None and (rnd + 1) % interval == 0:
                acc = evaluate(passives, active, test[0], test[1])
                history.accuracies.append((rnd + 1, acc))
                logger.info(f"[Protocol] round {rnd + 1}/{rounds} loss={loss:.4f} test_acc={acc:.4f}")
    finally:
        if pool is not None:
            pool.shutdown(wait=True)
    if test is not None and (not history.accuracies or history.accuracies[-1][0] != history.rounds):
        history.accuracies.append((history.rounds, evaluate(passives, active, test[0], test[1])))
    history.wall_time_s = time.perf_counter() - started
    if not transport.verify_log():
        raise ProtocolError("transport log violates the round ordering")
    logger.success(f"[Protocol] training finished: {history.rounds} rounds in {history.wall_time_s:.1f}s, "
                   f"final acc={history.final_accuracy}")
    return history
