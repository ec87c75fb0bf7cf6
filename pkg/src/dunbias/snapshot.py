"""Model snapshots: flat little-endian float64 dump plus a JSON manifest."""

from __future__ import annotations

import dataclasses
import json
from pathlib import Path

import numpy as np

from .dun import DepthPosterior, DunModel
from .mcdo import McdoModel
from .network import NetworkConfig, build
from .numerics import Tensor


def _arrays(model) -> dict[str, np.ndarray]:
    arrays = model.params.state_arrays()
    if isinstance(model, DunModel):
        arrays["logits"] = model.logits.data.copy()
        arrays["prior"] = model.prior.log_probs.copy()
    return arrays


def save_model(model, directory: str | Path, seed: int | None = None, extra: dict | None = None) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    arrays = _arrays(model)
    entries, offset, chunks = [], 0, []
    for name, arr in arrays.items():
        flat = np.ascontiguousarray(arr, dtype="<f8").ravel()
        entries.append({"name": name, "shape": list(np.shape(arr)), "offset": offset, "size": int(flat.size)})
        offset += flat.size
        chunks.append(flat)
    (directory / "params.bin").write_bytes(np.concatenate(chunks).tobytes() if chunks else b"")
    manifest = {
        "kind": "dun" if isinstance(model, DunModel) else "mcdo",
        "network": dataclasses.asdict(model.params.config),
        "n_mc_samples": getattr(model, "n_mc_samples", None),
        "seed": seed,
        "arrays": entries,
        "extra": extra or {},
    }
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return directory


def load_model(directory: str | Path):
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    flat = np.frombuffer((directory / "params.bin").read_bytes(), dtype="<f8")
    arrays = {
        e["name"]: flat[e["offset"]:e["offset"] + e["size"]].reshape(e["shape"]).astype(np.float64)
        for e in manifest["arrays"]
    }
    cfg = NetworkConfig(**manifest["network"])
    params = build(cfg, np.random.default_rng(0))
    params.load_state_arrays(arrays)
    if manifest["kind"] == "dun":
        return DunModel(params=params, logits=Tensor(arrays["logits"], requires_grad=True),
                        prior=DepthPosterior(arrays["prior"]))
    return McdoModel(params=params, n_mc_samples=manifest["n_mc_samples"])


