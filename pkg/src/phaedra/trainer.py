"""Optimizers, weight averaging and the training loop."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .checkpoint import save_checkpoint
from .datagen import Dataset, FieldStats, normalize
from .model import ModelConfig, Tokenizer, build_model
from .tensor import NonFiniteError


class TrainingDiverged(RuntimeError):
    """A loss or gradient became non-finite."""


# ---------------------------------------------------------------- optimizers


@dataclass
class OptimizerState:
    kind: str = "ademamix"
    lr: float = 1e-4
    beta1: float = 0.5
    beta2: float = 0.9
    beta3: float = 0.99
    alpha: float = 2.0
    weight_decay: float = 0.01
    eps: float = 1e-8
    step: int = 0
    m1: list[np.ndarray] = field(default_factory=list)
    m2: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)

    @classmethod
    def ademamix(cls, params: Sequence[np.ndarray], **kw) -> "OptimizerState":
        s = cls(kind="ademamix", **kw)
        s.init(params)
        return s

    @classmethod
    def adam(cls, params: Sequence[np.ndarray], lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, **kw) -> "OptimizerState":
        s = cls(kind="adam", lr=lr, beta1=beta1, beta2=beta2, **kw)
        s.init(params)
        return s

    def init(self, params: Sequence[np.ndarray]) -> None:
        self.m1 = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.m2 = [np.zeros_like(p) for p in params] if self.kind == "ademamix" else []

    def hyperparameters(self) -> dict:
        d = asdict(self)
        for k in ("m1", "m2", "v", "step"):
            d.pop(k)
        return d


def _check_grads(grads: Sequence[np.ndarray]) -> None:
    for i, g in enumerate(grads):
        if not np.isfinite(g).all():
            raise TrainingDiverged(f"non-finite gradient in parameter {i}")


def _check_state(state: OptimizerState, params, grads) -> None:
    if len(params) != len(grads) or len(params) != len(state.m1):
        raise ValueError("parameter, gradient and state counts differ")
    for p, g in zip(params, grads):
        if p.shape != g.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {p.shape}")


def ademamix_step(state: OptimizerState, params: Sequence[np.ndarray], grads: Sequence[np.ndarray], lr: float | None = None) -> None:
    """One AdEMAMix update of ``params`` in place.

    A fast and a slow gradient average are mixed, ``(m1_hat + alpha*m2) /
    (sqrt(v_hat) + eps)``, with bias correction on the fast average and the
    second moment only, followed by decoupled weight decay.
    """
    _check_state(state, params, grads)
    _check_grads(grads)
    lr = state.lr if lr is None else lr
    state.step += 1
    t = state.step
    b1, b2, b3 = state.beta1, state.beta2, state.beta3
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for p, g, m1, m2, v in zip(params, grads, state.m1, state.m2, state.v):
        m1 *= b1
        m1 += (1.0 - b1) * g
        m2 *= b3
        m2 += (1.0 - b3) * g
        v *= b2
        v += (1.0 - b2) * g * g
        update = (m1 / c1 + state.alpha * m2) / (np.sqrt(v / c2) + state.eps)
        p -= (lr * (update + state.weight_decay * p)).astype(p.dtype, copy=False)


def adam_step(state: OptimizerState, params: Sequence[np.ndarray], grads: Sequence[np.ndarray], lr: float | None = None) -> None:
    """One bias-corrected Adam update with decoupled weight decay, in place."""
    _check_state(state, params, grads)
    _check_grads(grads)
    lr = state.lr if lr is None else lr
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for p, g, m, v in zip(params, grads, state.m1, state.v):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        update = (m / c1) / (np.sqrt(v / c2) + state.eps)
        p -= (lr * (update + state.weight_decay * p)).astype(p.dtype, copy=False)


def optimizer_step(state: OptimizerState, params, grads, lr: float | None = None) -> None:
    if state.kind == "ademamix":
        ademamix_step(state, params, grads, lr)
    elif state.kind == "adam":
        adam_step(state, params, grads, lr)
    else:
        raise ValueError(f"unknown optimizer {state.kind!r}")


def ema_update(shadow: Sequence[np.ndarray], params: Sequence[np.ndarray], decay: float = 0.999) -> Sequence[np.ndarray]:
    """``shadow <- decay*shadow + (1-decay)*params`` in place; returns ``shadow``."""
    if len(shadow) != len(params):
        raise ValueError("shadow and parameter counts differ")
    if not 0.0 <= decay <= 1.0:
        raise ValueError("decay must lie in [0, 1]")
    for s, p in zip(shadow, params):
        if s.shape != p.shape:
            raise ValueError(f"shadow shape {s.shape} does not match parameter {p.shape}")
        s *= decay
        s += (1.0 - decay) * p
    return shadow


class EmaTracker:
    """Averaged weights with a short warm-up.

    The effective decay is ``min(decay, (1 + n) / (10 + n))`` after ``n``
    updates, so early averages are not dominated by the initialization.
    """

    def __init__(self, params: Sequence[np.ndarray], decay: float = 0.999, warmup: bool = True):
        self.decay = decay
        self.warmup = warmup
        self.updates = 0
        self.shadow = [np.array(p, copy=True) for p in params]

    def current_decay(self) -> float:
        if not self.warmup:
            return self.decay
        return min(self.decay, (1 + self.updates) / (10 + self.updates))

    def update(self, params: Sequence[np.ndarray]) -> None:
        ema_update(self.shadow, params, self.current_decay())
        self.updates += 1


def warmup_lr(base_lr: float, step: int, warmup_steps: int) -> float:
    """Learning rate for the 1-indexed update ``step``: linear ramp, then constant."""
    if warmup_steps > 0 and step < warmup_steps:
        return base_lr * step / warmup_steps
    return base_lr


# ---------------------------------------------------------------- training loop


@dataclass
class TrainConfig:
    steps: int = 2000
    batch_size: int = 4
    optimizer: str = "adam"
    lr: float | None = None
    warmup_steps: int = 250
    weight_decay: float = 0.01
    ema_decay: float = 0.999
    checkpoint_every: int = 500
    seed: int = 0

    def __post_init__(self):
        if self.steps < 0 or self.batch_size < 1:
            raise ValueError("steps must be >= 0 and batch_size >= 1")
        if self.optimizer not in ("adam", "ademamix"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")

    @property
    def base_lr(self) -> float:
        if self.lr is not None:
            return self.lr
        return 1e-4 if self.optimizer == "ademamix" else 1e-3


@dataclass
class TrainResult:
    model: Tokenizer
    ema: EmaTracker
    log: list[dict]
    checkpoints: list[Path]

    def ema_model(self) -> Tokenizer:
        m = build_model(self.model.config)
        m.load_state_dict(dict(zip([n for n, _ in self.model.named_parameters()], self.ema.shadow)))
        return m


def _batches(n: int, batch: int, rng: np.random.Generator):
    """Endless stream of index batches drawn epoch by epoch from fresh permutations."""
    while True:
        perm = rng.permutation(n)
        for s in range(0, n - batch + 1, batch):
            yield np.sort(perm[s : s + batch])


def train(
    model_config: ModelConfig,
    train_data: np.ndarray,
    stats: FieldStats,
    cfg: TrainConfig,
    out_dir: str | Path | None = None,
    log_fn: Callable[[dict], None] | None = None,
) -> TrainResult:
    """Train on physical-unit samples ``N x 1 x H x W``; normalization uses ``stats``.

    Writes ``train_log.jsonl`` and checkpoints every ``checkpoint_every``
    steps plus ``final`` when ``out_dir`` is given.
    """
    if train_data.shape[0] < cfg.batch_size:
        raise ValueError(f"training split has {train_data.shape[0]} samples, fewer than one batch")
    r = model_config.input_resolution
    if train_data.shape[1:] != (model_config.in_channels, r, r):
        raise ValueError(f"training samples {train_data.shape[1:]} do not match the model input {r}x{r}")
    data = normalize(np.asarray(train_data, dtype=np.float32), stats)
    model = build_model(model_config)
    params = model.parameters()
    arrays = [p.data for p in params]
    if cfg.optimizer == "ademamix":
        opt = OptimizerState.ademamix(arrays, lr=cfg.base_lr, weight_decay=cfg.weight_decay)
    else:
        opt = OptimizerState.adam(arrays, lr=cfg.base_lr, weight_decay=cfg.weight_decay)
    ema = EmaTracker(arrays, cfg.ema_decay)
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([cfg.seed, 0x7A11])))
    batches = _batches(data.shape[0], cfg.batch_size, rng)
    out = Path(out_dir) if out_dir is not None else None
    log: list[dict] = []
    ckpts: list[Path] = []
    log_file = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        log_file = open(out / "train_log.jsonl", "w")

    def names_state(values):
        return dict(zip([n for n, _ in model.named_parameters()], values))

    try:
        for step in range(1, cfg.steps + 1):
            x = data[next(batches)]
            lr = warmup_lr(cfg.base_lr, step, cfg.warmup_steps)
            try:
                _, terms = model.forward_train(x)
                loss = terms["total"]
                if not math.isfinite(float(loss.data)):
                    raise NonFiniteError("loss")
                grads = T.grad(loss, params)
                optimizer_step(opt, arrays, grads, lr)
            except (NonFiniteError, TrainingDiverged) as e:
                raise TrainingDiverged(f"training diverged at step {step}: {e}") from e
            ema.update(arrays)
            rec = {
                "step": step,
                "lr": lr,
                "loss_total": float(terms["total"].data),
                "loss_rec": float(terms["rec"].data),
                "loss_commit_mu": float(terms["commit_mu"].data),
                "loss_commit_alpha": float(terms["commit_alpha"].data),
            }
            log.append(rec)
            if log_file is not None:
                log_file.write(json.dumps(rec) + "\n")
            if log_fn is not None:
                log_fn(rec)
            if out is not None and cfg.checkpoint_every and step % cfg.checkpoint_every == 0 and step != cfg.steps:
                ckpts.append(
                    save_checkpoint(out / f"step_{step:06d}", model, step, stats, names_state(ema.shadow), {"train": asdict(cfg)})
                )
        if out is not None:
            ckpts.append(save_checkpoint(out / "final", model, cfg.steps, stats, names_state(ema.shadow), {"train": asdict(cfg)}))
    finally:
        if log_file is not None:
            log_file.close()
    return TrainResult(model, ema, log, ckpts)


def train_on_dataset(model_config: ModelConfig, dataset: Dataset, cfg: TrainConfig, out_dir=None, log_fn=None) -> TrainResult:
    return train(model_config, dataset.split("train"), dataset.stats, cfg, out_dir, log_fn)


def train_paired(
    base: ModelConfig, variants: Sequence[str], train_data: np.ndarray, stats: FieldStats, cfg: TrainConfig
) -> dict[str, TrainResult]:
    """Train several variants with identical seed, initialization stream and batch order."""
    return {v: train(base.with_variant(v), train_data, stats, cfg) for v in variants}
