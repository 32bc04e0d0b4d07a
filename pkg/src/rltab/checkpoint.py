"""Checkpoint and artifact persistence.

A checkpoint is a single JSON document holding the vocabulary, the policy,
value and reference parameter stores, optionally the discriminator ensemble,
and a metadata block. Arrays are stored as base64 of little-endian float64
bytes so that a save/load round trip is bit-exact.
"""

from __future__ import annotations

import base64
import json
import os
import tempfile
from pathlib import Path
from typing import Optional

import numpy as np

from .discriminators import DiscriminatorEnsemble
from .errors import ConfigError
from .neural import ParamStore, ScorerSpec
from .policy import PolicyState
from .serializer import TokenVocabulary

FORMAT_VERSION = 1


def atomic_write(path, data) -> Path:
    """Write text or bytes to ``path`` through a temp file and rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = data.encode("utf-8") if isinstance(data, str) else data
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def dumps(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def encode_array(a) -> dict:
    a = np.ascontiguousarray(np.asarray(a, dtype="<f8"))
    return {"shape": list(a.shape), "data": base64.b64encode(a.tobytes()).decode("ascii")}


def decode_array(obj: dict) -> np.ndarray:
    raw = base64.b64decode(obj["data"])
    return np.frombuffer(raw, dtype="<f8").reshape(obj["shape"]).astype(np.float64)


def store_to_json(store: ParamStore) -> dict:
    state = store.state()
    out = {"step": state["step"]}
    for key in ("params", "buffers", "exp_avg", "exp_avg_sq"):
        out[key] = {k: encode_array(v) for k, v in state[key].items()}
    return out


def store_from_json(obj: dict) -> ParamStore:
    state = {"step": obj.get("step", 0)}
    for key in ("params", "buffers", "exp_avg", "exp_avg_sq"):
        state[key] = {k: decode_array(v) for k, v in obj.get(key, {}).items()}
    return ParamStore.from_state(state)


def spec_to_json(spec: ScorerSpec) -> dict:
    return spec.to_json()


def spec_from_json(obj: dict) -> ScorerSpec:
    return ScorerSpec.from_json(obj)


def policy_to_json(policy: PolicyState) -> dict:
    return {
        "spec": spec_to_json(policy.spec),
        "value_spec": spec_to_json(policy.value_spec),
        "theta": store_to_json(policy.theta),
        "phi": store_to_json(policy.phi),
        "ref": store_to_json(policy.ref),
        "vocab": policy.vocab.to_json(),
        "temperature": policy.temperature,
        "seed": policy.seed,
    }


def policy_from_json(obj: dict) -> PolicyState:
    ref = store_from_json(obj["ref"])
    for p in ref.params.values():
        p.requires_grad_(False)
    return PolicyState(
        spec_from_json(obj["spec"]),
        store_from_json(obj["theta"]),
        spec_from_json(obj["value_spec"]),
        store_from_json(obj["phi"]),
        ref,
        TokenVocabulary.from_json(obj["vocab"]),
        float(obj["temperature"]),
        int(obj["seed"]),
    )


def ensemble_to_json(ens: DiscriminatorEnsemble) -> dict:
    return {
        "specs": {k: spec_to_json(s) for k, s in ens.specs.items()},
        "store": store_to_json(ens.store),
        "pairs": [list(p) for p in ens.pairs],
        "mu": ens.mu,
        "lam": ens.lam,
    }


def ensemble_from_json(obj: dict) -> DiscriminatorEnsemble:
    return DiscriminatorEnsemble(
        {k: spec_from_json(s) for k, s in obj["specs"].items()},
        store_from_json(obj["store"]),
        [tuple(p) for p in obj["pairs"]],
        {k: float(v) for k, v in obj["mu"].items()},
        {k: float(v) for k, v in obj["lam"].items()},
    )


def save_checkpoint(path, policy: PolicyState, ensemble: Optional[DiscriminatorEnsemble] = None,
                    meta: Optional[dict] = None) -> Path:
    doc = {
        "format_version": FORMAT_VERSION,
        "meta": meta or {},
        "policy": policy_to_json(policy),
        "ensemble": None if ensemble is None else ensemble_to_json(ensemble),
    }
    return atomic_write(path, dumps(doc))


def load_checkpoint(path):
    """Return ``(policy, ensemble_or_None, meta)``."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"{path}: checkpoint not found")
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    if doc.get("format_version") != FORMAT_VERSION:
        raise ConfigError(f"{path}: unsupported checkpoint version {doc.get('format_version')!r}")
    ens = doc.get("ensemble")
    return (policy_from_json(doc["policy"]),
            None if ens is None else ensemble_from_json(ens),
            doc.get("meta", {}))
