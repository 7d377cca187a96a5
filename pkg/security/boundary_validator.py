from typing import Iterable, List, Sequence

import numpy as np
from loguru import logger

from core.parties import ActiveParty, PassiveParty


class BoundaryValidator:
    """
    State inspection of the parties after (or during) a run.
    The active party must never hold raw passive features; passive parties
    must never hold labels or the active party's passport material.
    """

    @staticmethod
    def _arrays(obj, depth: int = 0) -> Iterable[np.ndarray]:
        if depth > 8:
            return
        if isinstance(obj, np.ndarray):
            yield obj
        elif isinstance(obj, dict):
            for v in obj.values():
                yield from BoundaryValidator._arrays(v, depth + 1)
        elif isinstance(obj, (list, tuple)):
            for v in obj:
                yield from BoundaryValidator._arrays(v, depth + 1)
        elif hasattr(obj, "__dict__") and not isinstance(obj, np.random.Generator):
            for v in vars(obj).values():
                yield from BoundaryValidator._arrays(v, depth + 1)

    @staticmethod
    def _holds(arrays: Iterable[np.ndarray], secret: np.ndarray) -> bool:
        for arr in arrays:
            if arr is secret or (arr.shape == secret.shape and arr.dtype == secret.dtype and np.array_equal(arr, secret)):
                return True
        return False

    @staticmethod
    def violations(passives: Sequence[PassiveParty], active: ActiveParty) -> List[str]:
        found = []
        active_arrays = list(BoundaryValidator._arrays(active))
        for party in passives:
            if BoundaryValidator._holds(active_arrays, party.features):
                found.append(f"active party holds raw features of {party.id}")
            passive_arrays = list(BoundaryValidator._arrays(party))
            if BoundaryValidator._holds(passive_arrays, active.labels):
                found.append(f"{party.id} holds the labels")
            for sampler in active.samplers.values():
                if sampler.last_key is not None and any(
                        BoundaryValidator._holds(passive_arrays, s)
                        for s in (sampler.last_key.s_gamma, sampler.last_key.s_beta)):
                    found.append(f"{party.id} holds the active passport")
                if BoundaryValidator._holds(passive_arrays, sampler.channel_means):
                    found.append(f"{party.id} holds the active passport means")
        return found

    @staticmethod
    def validate(passives: Sequence[PassiveParty], active: ActiveParty) -> bool:
        """Returns True if no party crosses the information boundary."""
        found = BoundaryValidator.violations(passives, active)
        for v in found:
            logger.error(f"[Boundary] violation: {v}")
        if not found:
            logger.info(f"[Boundary] validation passed for {len(passives)} passive parties + active")
        return not found
