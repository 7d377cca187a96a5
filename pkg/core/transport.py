"""
In-process message transport between the passive parties and the active party.

Ordered, exactly-once delivery per (sender, round). A BackwardGradient for a
round is only accepted once every passive party's ForwardEmbedding of that
round has arrived. Per-round bookkeeping lives only while a round is open: once
the K-th gradient of a round goes out its order is audited and the entry dropped,
leaving counters behind.
"""
import threading
from collections import deque
from dataclasses import dataclass
from typing import Deque, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from loguru import logger

from core.errors import ProtocolError
from core.tensor import Tensor

ACTIVE_ID = "active"


@dataclass(frozen=True)
class ForwardEmbedding:
    party: str
    round: int
    batch: Tuple[int, ...]
    H: Tensor


@dataclass(frozen=True)
class BackwardGradient:
    party: str
    round: int
    grad: Tensor


Message = Union[ForwardEmbedding, BackwardGradient]


class FaultInjector:
    """Reorders in-flight messages of an inbox. Off unless a run asks for it."""

    def __init__(self, rng: np.random.Generator, reorder_prob: float = 0.5):
        self.rng = rng
        self.reorder_prob = reorder_prob

    def perturb(self, inbox: Deque[Message]):
        if len(inbox) > 1 and self.rng.random() < self.reorder_prob:
            items = list(inbox)
            self.rng.shuffle(items)
            inbox.clear()
            inbox.extend(items)


class Transport:
    def __init__(self, party_ids: Sequence[str], fault_injector: Optional[FaultInjector] = None):
        if len(set(party_ids)) != len(party_ids) or ACTIVE_ID in party_ids:
            raise ProtocolError(f"invalid passive party ids {list(party_ids)}")
        self.party_ids = list(party_ids)
        self.fault_injector = fault_injector
        self.inboxes: Dict[str, Deque[Message]] = {pid: deque() for pid in [ACTIVE_ID, *party_ids]}
        self._open: Dict[int, List[str]] = {}
        self._embedded: Dict[int, Dict[str, Tuple[int, ...]]] = {}
        self._grads_sent: Dict[int, set] = {}
        self._closed_through = -1
        self.rounds_closed = 0
        self.messages = 0
        self.disordered: List[int] = []
        self._lock = threading.Condition()

    def send(self, message: Message):
        with self._lock:
            if isinstance(message, ForwardEmbedding):
                self._accept_embedding(message)
                recipient, kind = ACTIVE_ID, "forward"
            elif isinstance(message, BackwardGradient):
                self._accept_gradient(message)
                recipient, kind = message.party, "backward"
            else:
                raise ProtocolError(f"unknown message type {type(message).__name__}")
            inbox = self.inboxes[recipient]
            inbox.append(message)
            if self.fault_injector is not None:
                self.fault_injector.perturb(inbox)
            self.messages += 1
            self._open.setdefault(message.round, []).append(kind)
            if kind == "backward" and len(self._grads_sent[message.round]) == len(self.party_ids):
                self._close(message.round)
            self._lock.notify_all()

    def _close(self, rnd: int):
        kinds = self._open.pop(rnd)
        del self._embedded[rnd], self._grads_sent[rnd]
        k = len(self.party_ids)
        if kinds != ["forward"] * k + ["backward"] * k:
            logger.error(f"[Transport] round {rnd} log out of order: {kinds}")
            self.disordered.append(rnd)
        self._closed_through = max(self._closed_through, rnd)
        self.rounds_closed += 1

    @property
    def open_rounds(self) -> List[int]:
        return sorted(self._open)

    def _accept_embedding(self, msg: ForwardEmbedding):
        if msg.party not in self.party_ids:
            raise ProtocolError("embedding from unknown party", party=msg.party, round=msg.round)
        if msg.round <= self._closed_through and msg.round not in self._embedded:
            raise ProtocolError("embedding for a closed round", party=msg.party, round=msg.round)
        seen = self._embedded.setdefault(msg.round, {})
        if msg.party in seen:
            raise ProtocolError("duplicate forward embedding", party=msg.party, round=msg.round)
        if self._grads_sent.get(msg.round):
            raise ProtocolError("embedding after the round's gradients were sent", party=msg.party, round=msg.round)
        seen[msg.party] = msg.batch

    def _accept_gradient(self, msg: BackwardGradient):
        seen = self._embedded.get(msg.round, {})
        missing = [pid for pid in self.party_ids if pid not in seen]
        if missing:
            raise ProtocolError(f"gradient before all embeddings arrived (missing {missing})",
                                party=msg.party, round=msg.round)
        sent = self._grads_sent.setdefault(msg.round, set())
        if msg.party in sent:
            raise ProtocolError("duplicate backward gradient", party=msg.party, round=msg.round)
        sent.add(msg.party)

    def collect_embeddings(self, round: int, timeout: Optional[float] = None) -> List[ForwardEmbedding]:
        """Blocks until all K embeddings of `round` are in the active inbox; returns them in party order."""
        with self._lock:
            ready = self._lock.wait_for(
                lambda: {m.party for m in self.inboxes[ACTIVE_ID] if m.round == round} >= set(self.party_ids),
                timeout=timeout,
            )
            if not ready:
                present = sorted({m.party for m in self.inboxes[ACTIVE_ID] if m.round == round})
                missing = [pid for pid in self.party_ids if pid not in present]
                raise ProtocolError(f"missing embedding from {missing}", party=missing[0] if missing else None, round=round)
            inbox = self.inboxes[ACTIVE_ID]
            taken = [m for m in inbox if m.round == round]
            rest = [m for m in inbox if m.round != round]
            inbox.clear()
            inbox.extend(rest)
        order = {pid: i for i, pid in enumerate(self.party_ids)}
        return sorted(taken, key=lambda m: order[m.party])

    def receive_gradient(self, party: str, round: int, timeout: Optional[float] = None) -> BackwardGradient:
        with self._lock:
            inbox = self.inboxes[party]
            ready = self._lock.wait_for(lambda: any(m.round == round for m in inbox), timeout=timeout)
            if not ready:
                raise ProtocolError("no backward gradient delivered", party=party, round=round)
            msg = next(m for m in inbox if m.round == round)
            inbox.remove(msg)
            return msg

    def verify_log(self) -> bool:
        """Every closed round carried exactly K embeddings, then exactly K gradients, and none is left half-open."""
        with self._lock:
            if self._open:
                logger.error(f"[Transport] rounds still open: {self.open_rounds}")
                return False
            return not self.disordered
