"""
Checkpoint format.

<name>.npz       shareable: every parameter array as "<party>/<layer>/<param>",
                 plus "__meta__" holding a JSON document (format version,
                 architecture, shapes, defense spec). No passport material.
<name>.keys.npz  owner-only (0600): passport channel means and last keys as
                 "<party>/<slot>/<field>".
"""
import json
import os
from pathlib import Path
from typing import Any, Dict, Sequence, Tuple

import numpy as np
from loguru import logger

from core.errors import ConfigError
from core.parties import ActiveParty, PassiveParty
from core.passport import PassportKey

FORMAT_VERSION = 1


def _parties(passives: Sequence[PassiveParty], active: ActiveParty):
    return [*passives, active]


def save_checkpoint(path: str, passives: Sequence[PassiveParty], active: ActiveParty,
                    meta: Dict[str, Any]) -> Tuple[Path, Path]:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arrays: Dict[str, np.ndarray] = {}
    shapes: Dict[str, list] = {}
    for party in _parties(passives, active):
        for i, name, value in party.model.parameters():
            key = f"{party.id}/{i}/{name}"
            arrays[key] = value
            shapes[key] = list(value.shape)
    document = {
        "format_version": FORMAT_VERSION,
        "parties": [p.id for p in passives],
        "models": {p.id: p.model.describe() for p in _parties(passives, active)},
        "shapes": shapes,
        **meta,
    }
    arrays["__meta__"] = np.array(json.dumps(document, sort_keys=True))
    archive = path.with_suffix(".npz")
    np.savez(archive, **arrays)

    secrets: Dict[str, np.ndarray] = {}
    for party in _parties(passives, active):
        for slot, sampler in party.samplers.items():
            prefix = f"{party.id}/{slot}"
            secrets[f"{prefix}/channel_means"] = sampler.channel_means
            if sampler.last_key is not None:
                secrets[f"{prefix}/s_gamma"] = sampler.last_key.s_gamma
                secrets[f"{prefix}/s_beta"] = sampler.last_key.s_beta
                secrets[f"{prefix}/per_sample"] = np.array(sampler.last_key.per_sample)
    keys_path = archive.with_name(archive.stem + ".keys.npz")
    with open(os.open(keys_path, os.O_WRONLY | os.O_CREAT | os.O_TRUNC, 0o600), "wb") as f:
        np.savez(f, **secrets)
    os.chmod(keys_path, 0o600)
    logger.info(f"[Checkpoint] saved {archive} ({len(shapes)} arrays) and owner-only {keys_path.name}")
    return archive, keys_path


def read_checkpoint(path: str) -> Tuple[Dict[str, Any], Dict[str, np.ndarray]]:
    archive = Path(path).with_suffix(".npz")
    if not archive.exists():
        raise ConfigError(f"checkpoint not found: {archive}")
    with np.load(archive, allow_pickle=False) as data:
        meta = json.loads(str(data["__meta__"]))
        params = {k: data[k] for k in data.files if k != "__meta__"}
    if meta.get("format_version") != FORMAT_VERSION:
        raise ConfigError(f"unsupported checkpoint format {meta.get('format_version')}")
    return meta, params


def restore_parties(path: str, passives: Sequence[PassiveParty], active: ActiveParty,
                    with_keys: bool = True) -> Dict[str, Any]:
    """Loads parameters (and, for the owner, passport material) into freshly built parties."""
    meta, params = read_checkpoint(path)
    for party in _parties(passives, active):
        for i, name, value in party.model.parameters():
            key = f"{party.id}/{i}/{name}"
            if key not in params or params[key].shape != value.shape:
                raise ConfigError(f"checkpoint does not match the model at {key}")
            value[...] = params[key]
    keys_path = Path(path).with_suffix(".npz")
    keys_path = keys_path.with_name(keys_path.stem + ".keys.npz")
    if with_keys and keys_path.exists():
        with np.load(keys_path, allow_pickle=False) as secrets:
            for party in _parties(passives, active):
                for slot, sampler in party.samplers.items():
                    prefix = f"{party.id}/{slot}"
                    if f"{prefix}/channel_means" in secrets.files:
                        sampler.channel_means = secrets[f"{prefix}/channel_means"]
                    if f"{prefix}/s_gamma" in secrets.files:
                        sampler.last_key = PassportKey(secrets[f"{prefix}/s_gamma"], secrets[f"{prefix}/s_beta"],
                                                       tuple(sampler.channel_means.tolist()),
                                                       per_sample=bool(secrets[f"{prefix}/per_sample"]))
    logger.info(f"[Checkpoint] restored {len(params)} arrays from {path}")
    return meta
