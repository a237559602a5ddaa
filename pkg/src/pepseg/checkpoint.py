"""Flat parameter blob + JSON manifest (name -> shape, dtype, byte offset).

Layout of a checkpoint directory::

    params.bin      concatenated little-endian tensor bytes in manifest order
    manifest.json   {"format", "config", "sha256", "tensors": [{name, shape, dtype, offset, nbytes}]}
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np
import torch

from .config import ConfigError, RunConfig
from .model import PEPModel

FORMAT = "pepseg-flat-v1"


class CheckpointError(RuntimeError):
    pass


def save_checkpoint(model: PEPModel, cfg: RunConfig, directory: str | Path) -> Path:
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    entries, blobs, offset = [], [], 0
    for name, tensor in model.state_dict().items():
        arr = tensor.detach().cpu().contiguous().numpy()
        arr = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        raw = arr.tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "dtype": arr.dtype.str,
                        "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    payload = b"".join(blobs)
    (out / "params.bin").write_bytes(payload)
    manifest = {"format": FORMAT, "config": cfg.to_dict(),
                "sha256": hashlib.sha256(payload).hexdigest(), "tensors": entries}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1))
    return out


def load_checkpoint(directory: str | Path) -> tuple[PEPModel, RunConfig]:
    d = Path(directory)
    try:
        manifest = json.loads((d / "manifest.json").read_text())
        payload = (d / "params.bin").read_bytes()
    except FileNotFoundError as exc:
        raise CheckpointError(f"incomplete checkpoint at {d}: {exc.filename} missing") from exc
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"corrupt checkpoint manifest in {d}: {exc}") from exc
    if not isinstance(manifest, dict) or manifest.get("format") != FORMAT:
        raise CheckpointError(f"checkpoint manifest integrity error in {d}: unknown format")
    if hashlib.sha256(payload).hexdigest() != manifest.get("sha256"):
        raise CheckpointError(f"checkpoint integrity error in {d}: params.bin checksum mismatch")
    try:
        cfg = RunConfig.from_dict(manifest["config"])
    except (ConfigError, KeyError) as exc:
        raise CheckpointError(f"checkpoint manifest integrity error in {d}: {exc}") from exc

    model = PEPModel(cfg.model)
    expected = model.state_dict()
    state = {}
    try:
        for e in manifest["tensors"]:
            start, n = int(e["offset"]), int(e["nbytes"])
            if start < 0 or start + n > len(payload):
                raise CheckpointError(f"tensor {e['name']} exceeds params.bin")
            arr = np.frombuffer(payload[start:start + n], dtype=np.dtype(e["dtype"]))
            state[e["name"]] = torch.from_numpy(arr.reshape(e["shape"]).copy())
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"checkpoint manifest integrity error in {d}: {exc}") from exc
    if set(state) != set(expected):
        missing = sorted(set(expected) - set(state))
        extra = sorted(set(state) - set(expected))
        raise CheckpointError(f"checkpoint tensors do not match model (missing {missing}, extra {extra})")
    for name, t in state.items():
        if tuple(t.shape) != tuple(expected[name].shape):
            raise CheckpointError(f"shape mismatch for {name}: {tuple(t.shape)}")
    model.load_state_dict(state)
    model.eval()
    return model, cfg
