"""Checkpoint directories: a JSON manifest plus raw little-endian float32 parameter blobs.

``manifest.json`` records the model config, the training step, the data
statistics and every parameter's name and shape in blob order. ``params.f32``
holds the raw weights; ``ema.f32`` (when present) the averaged weights used
for evaluation.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .datagen import FieldStats
from .model import ModelConfig, Tokenizer, build_model

FORMAT = "phaedra-checkpoint"
VERSION = 1


class CheckpointError(ValueError):
    pass


def _blob(state: dict[str, np.ndarray], names: list[str]) -> bytes:
    return b"".join(np.ascontiguousarray(state[n], dtype="<f4").tobytes() for n in names)


def save_checkpoint(
    root: str | Path,
    model: Tokenizer,
    step: int,
    stats: FieldStats | None = None,
    ema_state: dict[str, np.ndarray] | None = None,
    extra: dict | None = None,
) -> Path:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    named = list(model.named_parameters())
    names = [n for n, _ in named]
    manifest = {
        "format": FORMAT,
        "version": VERSION,
        "config": model.config.to_dict(),
        "step": int(step),
        "stats": None if stats is None else {"mu": stats.mu, "sigma_g": stats.sigma_g},
        "parameters": [{"name": n, "shape": list(p.shape)} for n, p in named],
        "dtype": "<f4",
        "blobs": {"params": "params.f32"} | ({"ema": "ema.f32"} if ema_state is not None else {}),
        "extra": extra or {},
    }
    (root / "params.f32").write_bytes(_blob(model.state_dict(), names))
    if ema_state is not None:
        (root / "ema.f32").write_bytes(_blob(ema_state, names))
    (root / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return root


def read_manifest(root: str | Path) -> dict:
    path = Path(root) / "manifest.json"
    if not path.is_file():
        raise CheckpointError(f"no checkpoint manifest at {path}")
    try:
        m = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise CheckpointError(f"malformed checkpoint manifest: {e}") from e
    if m.get("format") != FORMAT or m.get("version") != VERSION:
        raise CheckpointError("not a supported checkpoint")
    return m


def _read_blob(path: Path, params: list[dict]) -> dict[str, np.ndarray]:
    raw = path.read_bytes()
    total = sum(int(np.prod(p["shape"])) for p in params)
    if len(raw) != 4 * total:
        raise CheckpointError(f"{path.name}: expected {4 * total} bytes, found {len(raw)}")
    flat = np.frombuffer(raw, dtype="<f4")
    out, off = {}, 0
    for p in params:
        size = int(np.prod(p["shape"]))
        out[p["name"]] = flat[off : off + size].reshape(p["shape"]).astype(np.float32)
        off += size
    return out


def load_checkpoint(root: str | Path, weights: str = "ema") -> tuple[Tokenizer, dict]:
    """Rebuild the model; ``weights`` is ``ema`` (falls back to raw if absent) or ``params``."""
    root = Path(root)
    m = read_manifest(root)
    model = build_model(ModelConfig.from_dict(m["config"]))
    blobs = m["blobs"]
    key = weights if weights in blobs else "params"
    state = _read_blob(root / blobs[key], m["parameters"])
    model.load_state_dict(state)
    return model, m


def checkpoint_stats(manifest: dict) -> FieldStats:
    s = manifest.get("stats")
    if not s:
        raise CheckpointError("checkpoint carries no normalization statistics")
    return FieldStats(s["mu"], s["sigma_g"])
