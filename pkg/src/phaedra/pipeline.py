"""Batched tokenization, reconstruction and evaluation of physical-unit samples."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from .datagen import FieldStats, denormalize, normalize
from .metrics import BoundCheck, MetricsReport, error_bound_check, evaluate_batch
from .model import TokenizedSample, Tokenizer
from .quantizers import TokenGrid


def _chunks(n: int, batch: int) -> Iterator[slice]:
    for s in range(0, n, batch):
        yield slice(s, min(s + batch, n))


def tokenize(model: Tokenizer, samples: np.ndarray, stats: FieldStats, batch: int = 32) -> list[TokenGrid]:
    """Token grids (one per stream, ``N x h x w`` each) for physical-unit samples."""
    if model.variant == "continuous":
        raise ValueError("the continuous variant produces no tokens")
    x = normalize(np.asarray(samples, dtype=np.float32), stats)
    parts: dict[str, list[np.ndarray]] = {n: [] for n in model.stream_names}
    for sl in _chunks(x.shape[0], batch):
        enc = model.encode(x[sl])
        for name in model.stream_names:
            parts[name].append(enc.tokens[name].indices)
    specs = model.config.stream_specs
    return [
        TokenGrid(np.concatenate(parts[n]), specs[n].codebook_size, specs[n]) for n in model.stream_names
    ]


def detokenize(model: Tokenizer, grids: list[TokenGrid], stats: FieldStats, batch: int = 32) -> np.ndarray:
    """Physical-unit reconstructions from batched token grids."""
    from .model import tokens_from_list

    n = grids[0].indices.shape[0] if grids else 0
    h = model.config.latent_resolution
    out = []
    for sl in _chunks(n, batch):
        sub = [TokenGrid(g.indices[sl], g.vocab_size, g.spec) for g in grids]
        sample = tokens_from_list(model, sub)
        sample.latent_shape = (h, h)
        out.append(model.decode(sample))
    rec = np.concatenate(out) if out else np.empty((0, 1, model.config.input_resolution, model.config.input_resolution))
    return denormalize(rec.astype(np.float32), stats)


def reconstruct(model: Tokenizer, samples: np.ndarray, stats: FieldStats, batch: int = 32) -> np.ndarray:
    x = normalize(np.asarray(samples, dtype=np.float32), stats)
    out = [model.reconstruct(x[sl]) for sl in _chunks(x.shape[0], batch)]
    return denormalize(np.concatenate(out).astype(np.float32), stats)


def evaluate(
    model: Tokenizer, samples: np.ndarray, stats: FieldStats, batch: int = 32, reconstruction: np.ndarray | None = None
) -> tuple[MetricsReport, np.ndarray]:
    """Metrics of the model's reconstructions (or of a given ``reconstruction``) against ``samples``."""
    truth = np.asarray(samples, dtype=np.float32)
    grids = None
    if reconstruction is None:
        if model.variant == "continuous":
            reconstruction = reconstruct(model, truth, stats, batch)
        else:
            grids = tokenize(model, truth, stats, batch)
            reconstruction = detokenize(model, grids, stats, batch)
    report = evaluate_batch(truth, reconstruction, stats.sigma_g, None if grids is None else dict(zip(model.stream_names, grids)))
    return report, reconstruction


def bound_checks(model: Tokenizer, samples: np.ndarray, stats: FieldStats, batch: int = 32) -> list[BoundCheck]:
    """Discretization-bound check for every evaluation batch (normalized units)."""
    x = normalize(np.asarray(samples, dtype=np.float32), stats)
    out = []
    for sl in _chunks(x.shape[0], batch):
        quant, cont = model.reconstruct_pair(x[sl])
        out.append(error_bound_check(x[sl], cont, quant))
    return out


def encode_samples(model: Tokenizer, samples: np.ndarray, stats: FieldStats) -> TokenizedSample:
    return model.encode(normalize(np.asarray(samples, dtype=np.float32), stats))
