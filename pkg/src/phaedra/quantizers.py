"""Discrete bottlenecks: finite scalar quantization, nearest-neighbour VQ,
the morphology/amplitude split, and the token wire format.

FSQ maps every latent channel through ``tanh(scale * z)`` onto a fixed
lattice with ``L`` points spread evenly over ``[-1, 1]``. Channels with an
even number of levels are rounded on a half-shifted grid so that all ``L``
points are reachable. A code position is the lattice point's rank in
``0..L-1``; positions of all channels are packed into a single mixed-radix
index, channel 0 most significant.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import BinaryIO, Sequence

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor

MAGIC = b"PHTK"
WIRE_VERSION = 1

MORPHOLOGY_LEVELS = (5, 4, 4, 3, 3, 3, 2, 2)
AMPLITUDE_LEVELS = (1024,)
ABLATION_LEVELS = (4, 4, 4, 4, 4)


class TokenFormatError(ValueError):
    """A token file is malformed or does not match the expected layout."""


@dataclass(frozen=True)
class QuantizerSpec:
    levels: tuple[int, ...]
    scale: float = 1.0

    def __post_init__(self):
        levels = tuple(int(v) for v in self.levels)
        if not levels or any(v < 2 for v in levels):
            raise ValueError(f"every FSQ level must be >= 2, got {self.levels}")
        if not self.scale > 0:
            raise ValueError(f"scale must be positive, got {self.scale}")
        object.__setattr__(self, "levels", levels)
        object.__setattr__(self, "scale", float(self.scale))

    @property
    def dim(self) -> int:
        return len(self.levels)

    @property
    def codebook_size(self) -> int:
        return int(np.prod(self.levels, dtype=np.int64))

    @property
    def half_widths(self) -> np.ndarray:
        return (np.asarray(self.levels, dtype=np.float64) - 1.0) / 2.0


MORPHOLOGY_SPEC = QuantizerSpec(MORPHOLOGY_LEVELS, 10.0)
AMPLITUDE_SPEC = QuantizerSpec(AMPLITUDE_LEVELS, 0.1)
ABLATION_SPEC = QuantizerSpec(ABLATION_LEVELS, 10.0)


@dataclass
class TokenGrid:
    """Integer code indices on a (possibly batched) ``h x w`` latent grid."""

    indices: np.ndarray
    vocab_size: int
    spec: QuantizerSpec | None = None
    values: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        self.indices = np.asarray(self.indices, dtype=np.int64)
        if self.spec is not None and self.vocab_size != self.spec.codebook_size:
            raise ValueError("vocab_size disagrees with the quantizer spec")
        if self.indices.size and (self.indices.min() < 0 or self.indices.max() >= self.vocab_size):
            raise IndexError(f"token index outside [0, {self.vocab_size})")

    @property
    def shape(self) -> tuple[int, ...]:
        return self.indices.shape


# ---------------------------------------------------------------- index packing


def round_half_away(x: np.ndarray) -> np.ndarray:
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def pack_index(codes, levels: Sequence[int]) -> np.ndarray | int:
    """Mixed-radix index of per-channel code positions (last axis = channel)."""
    codes = np.asarray(codes, dtype=np.int64)
    lv = np.asarray(levels, dtype=np.int64)
    if codes.shape[-1] != lv.size:
        raise ShapeError(f"expected {lv.size} code positions, got {codes.shape[-1]}")
    if np.any(codes < 0) or np.any(codes >= lv):
        raise ValueError("code position outside its level range")
    idx = np.zeros(codes.shape[:-1], dtype=np.int64)
    for i in range(lv.size):
        idx = idx * lv[i] + codes[..., i]
    return int(idx) if idx.ndim == 0 else idx


def unpack_index(index, levels: Sequence[int]) -> np.ndarray:
    """Inverse of :func:`pack_index`; appends a channel axis."""
    idx = np.asarray(index, dtype=np.int64)
    lv = np.asarray(levels, dtype=np.int64)
    if np.any(idx < 0) or np.any(idx >= np.prod(lv)):
        raise IndexError("index outside the codebook")
    out = np.empty(idx.shape + (lv.size,), dtype=np.int64)
    rem = idx.copy()
    for i in range(lv.size - 1, -1, -1):
        out[..., i] = rem % lv[i]
        rem //= lv[i]
    return out


# ---------------------------------------------------------------- FSQ


def _channel_last(a: np.ndarray) -> np.ndarray:
    return np.moveaxis(a, -3, -1)


def _channel_first(a: np.ndarray) -> np.ndarray:
    return np.moveaxis(a, -1, -3)


def fsq_positions(z: np.ndarray, spec: QuantizerSpec) -> np.ndarray:
    """Per-channel code positions of a ``d x h x w`` latent (channel-last result)."""
    z = np.asarray(z, dtype=np.float64)
    if z.ndim < 3 or z.shape[-3] != spec.dim:
        raise ShapeError(f"latent has shape {z.shape}, expected {spec.dim} channels on axis -3")
    if not np.isfinite(z).all():
        raise T.NonFiniteError("non-finite latent passed to the quantizer")
    hw = spec.half_widths
    even = (np.asarray(spec.levels) % 2) == 0
    v = hw * np.tanh(spec.scale * _channel_last(z))
    code = np.where(even, round_half_away(v + 0.5) - 0.5, round_half_away(v))
    pos = np.rint(code + hw).astype(np.int64)
    return np.clip(pos, 0, np.asarray(spec.levels) - 1)


def positions_to_values(pos: np.ndarray, spec: QuantizerSpec, dtype=np.float64) -> np.ndarray:
    hw = spec.half_widths
    return _channel_first(((pos - hw) / hw).astype(dtype))


def fsq_quantize(z, spec: QuantizerSpec) -> tuple[np.ndarray, TokenGrid]:
    """Quantize a latent onto the FSQ lattice.

    Returns the normalized code values (same shape as ``z``, in [-1, 1]) and
    the packed token grid.
    """
    data = z.data if isinstance(z, Tensor) else np.asarray(z)
    dtype = data.dtype if data.dtype.kind == "f" else np.float64
    pos = fsq_positions(data, spec)
    values = positions_to_values(pos, spec, dtype)
    return values, TokenGrid(pack_index(pos, spec.levels), spec.codebook_size, spec, values)


def fsq_dequantize(tokens: TokenGrid, dtype=np.float64) -> np.ndarray:
    if tokens.spec is None:
        raise ValueError("token grid carries no FSQ spec")
    pos = unpack_index(tokens.indices, tokens.spec.levels)
    return positions_to_values(pos, tokens.spec, dtype)


def fsq_requantize(values: np.ndarray, spec: QuantizerSpec) -> TokenGrid:
    """Tokens of already-quantized values, read directly on the lattice."""
    v = _channel_last(np.asarray(values, dtype=np.float64))
    hw = spec.half_widths
    pos = np.clip(round_half_away(v * hw + hw).astype(np.int64), 0, np.asarray(spec.levels) - 1)
    return TokenGrid(pack_index(pos, spec.levels), spec.codebook_size, spec)


def fsq_preimage(tokens: TokenGrid) -> np.ndarray:
    """A latent whose quantization reproduces ``tokens``.

    Interior lattice points map to their own location; the two outermost
    points are pulled a quarter step inward so that ``atanh`` stays finite.
    """
    spec = tokens.spec
    hw = spec.half_widths
    code = unpack_index(tokens.indices, spec.levels) - hw
    code = np.clip(code, -hw + 0.25, hw - 0.25)
    return _channel_first(np.arctanh(code / hw) / spec.scale)


class FSQ:
    """One FSQ stream acting on tensors during training."""

    def __init__(self, spec: QuantizerSpec):
        self.spec = spec

    def bound(self, z: Tensor) -> Tensor:
        """Continuous counterpart of the emitted values: ``tanh(scale * z)``."""
        return T.tanh(T.scale(z, self.spec.scale))

    def __call__(self, z: Tensor) -> tuple[Tensor, np.ndarray, TokenGrid]:
        values, tokens = fsq_quantize(z, self.spec)
        return self.bound(z), values, tokens


# ---------------------------------------------------------------- VQ


@dataclass
class VqCodebook:
    entries: np.ndarray

    def __post_init__(self):
        self.entries = np.asarray(self.entries, dtype=np.float64)
        if self.entries.ndim != 2 or self.entries.shape[0] == 0:
            raise ValueError("codebook must be a non-empty K x C array")
        if not np.isfinite(self.entries).all():
            raise ValueError("codebook entries must be finite")

    @property
    def size(self) -> int:
        return self.entries.shape[0]


def vq_quantize(z, codebook: VqCodebook) -> tuple[np.ndarray, TokenGrid]:
    """Replace every spatial vector by its nearest entry; ties go to the lowest index."""
    data = z.data if isinstance(z, Tensor) else np.asarray(z, dtype=np.float64)
    if codebook.size == 0:
        raise ValueError("empty codebook")
    if data.ndim < 3 or data.shape[-3] != codebook.entries.shape[1]:
        raise ShapeError(f"latent {data.shape} does not match codebook width {codebook.entries.shape[1]}")
    zl = _channel_last(data).astype(np.float64)
    flat = zl.reshape(-1, zl.shape[-1])
    e = codebook.entries
    # accumulate channel by channel so every distance is summed in the same order
    dist = np.zeros((flat.shape[0], e.shape[0]))
    for c in range(e.shape[1]):
        d = flat[:, c : c + 1] - e[None, :, c]
        dist += d * d
    idx = np.argmin(dist, axis=1).reshape(zl.shape[:-1])
    values = _channel_first(e[idx]).astype(data.dtype if data.dtype.kind == "f" else np.float64)
    return values, TokenGrid(idx, codebook.size, None, values)


# ---------------------------------------------------------------- gradient plumbing


def straight_through(continuous: Tensor, quantized) -> Tensor:
    """Forward value of ``quantized`` with the gradient routed to ``continuous``."""
    q = quantized if isinstance(quantized, Tensor) else Tensor(np.asarray(quantized, dtype=continuous.dtype))
    if q.shape != continuous.shape:
        raise ShapeError(f"straight_through: shapes {continuous.shape} and {q.shape} differ")

    def back(g):
        return (g, np.zeros_like(g) if q.requires_grad else None)

    return T.record(q.data.astype(continuous.dtype, copy=True), (continuous, q), back, "straight_through")


def commitment_loss(z: Tensor, z_hat, beta: float = 1.0) -> Tensor:
    """``beta * mean((z - sg[z_hat])**2)``; no gradient reaches ``z_hat``."""
    target = z_hat.data if isinstance(z_hat, Tensor) else np.asarray(z_hat)
    if target.shape != z.shape:
        raise ShapeError(f"commitment_loss: shapes {z.shape} and {target.shape} differ")
    diff = T.sub(z, Tensor(target.astype(z.dtype, copy=False)))
    return T.scale(T.mean(T.square(diff)), beta)


# ---------------------------------------------------------------- Phaedra split


@dataclass(frozen=True)
class FactorizationSpec:
    widths: tuple[int, ...] = (8, 1)

    @property
    def stream_count(self) -> int:
        return len(self.widths)

    @property
    def channels(self) -> int:
        return int(sum(self.widths))


def phaedra_factorize(z: Tensor, spec: FactorizationSpec = FactorizationSpec()) -> tuple[Tensor, ...]:
    """Channel-wise split of the encoder latent into the configured streams."""
    axis = z.ndim - 3
    if z.shape[axis] != spec.channels:
        raise ShapeError(f"latent has {z.shape[axis]} channels, factorization expects {spec.channels}")
    out, lo = [], 0
    for w in spec.widths:
        out.append(T.slice_axis(z, lo, lo + w, axis))
        lo += w
    return tuple(out)


def phaedra_quantize(
    z_mu, z_alpha, morph_spec: QuantizerSpec = MORPHOLOGY_SPEC, amp_spec: QuantizerSpec = AMPLITUDE_SPEC
) -> tuple[np.ndarray, TokenGrid, np.ndarray, TokenGrid]:
    values_mu, tokens_mu = fsq_quantize(z_mu, morph_spec)
    values_alpha, tokens_alpha = fsq_quantize(z_alpha, amp_spec)
    return values_mu, tokens_mu, values_alpha, tokens_alpha


def phaedra_recombine(values_mu, values_alpha, mixer) -> Tensor:
    """Concatenate both streams and apply the learned channel mixer."""
    vm = values_mu if isinstance(values_mu, Tensor) else Tensor(values_mu)
    va = values_alpha if isinstance(values_alpha, Tensor) else Tensor(values_alpha, dtype=vm.dtype)
    axis = vm.ndim - 3
    cat = T.concat([vm, va], axis=axis)
    expected = mixer.weight.shape[1]
    if cat.shape[axis] != expected:
        raise ShapeError(f"mixer expects {expected} channels, got {cat.shape[axis]}")
    return mixer(cat)


# ---------------------------------------------------------------- wire format

_HEADER = struct.Struct("<4sHHIII")
_STREAM = struct.Struct("<H")


def write_tokens(dest: str | Path | BinaryIO, streams: Sequence[TokenGrid]) -> None:
    """Serialize batched token grids (``N x h x w`` each) of one or more FSQ streams."""
    if not streams:
        raise ValueError("nothing to serialize")
    shapes = {s.indices.shape for s in streams}
    if len(shapes) != 1:
        raise ShapeError(f"streams disagree on grid shape: {sorted(shapes)}")
    shape = shapes.pop()
    if len(shape) == 2:
        shape = (1,) + shape
    if len(shape) != 3:
        raise ShapeError("token grids must be h x w or N x h x w")
    n, h, w = shape
    buf = io.BytesIO()
    buf.write(_HEADER.pack(MAGIC, WIRE_VERSION, len(streams), n, h, w))
    for s in streams:
        if s.spec is None:
            raise ValueError("only FSQ streams carry a serializable spec")
        buf.write(_STREAM.pack(len(s.spec.levels)))
        buf.write(np.asarray(s.spec.levels, dtype="<u4").tobytes())
        buf.write(struct.pack("<d", s.spec.scale))
    for s in streams:
        buf.write(np.ascontiguousarray(s.indices, dtype="<u4").tobytes())
    payload = buf.getvalue()
    if isinstance(dest, (str, Path)):
        Path(dest).write_bytes(payload)
    else:
        dest.write(payload)


def read_tokens(src: str | Path | BinaryIO | bytes) -> list[TokenGrid]:
    if isinstance(src, bytes):
        raw = src
    elif isinstance(src, (str, Path)):
        raw = Path(src).read_bytes()
    else:
        raw = src.read()
    if len(raw) < _HEADER.size or raw[:4] != MAGIC:
        raise TokenFormatError("not a token file (bad magic)")
    _, version, n_streams, n, h, w = _HEADER.unpack_from(raw, 0)
    if version != WIRE_VERSION:
        raise TokenFormatError(f"unsupported token format version {version}")
    off = _HEADER.size
    specs = []
    try:
        for _ in range(n_streams):
            (d,) = _STREAM.unpack_from(raw, off)
            off += _STREAM.size
            levels = np.frombuffer(raw, dtype="<u4", count=d, offset=off)
            off += 4 * d
            (scale,) = struct.unpack_from("<d", raw, off)
            off += 8
            specs.append(QuantizerSpec(tuple(int(v) for v in levels), scale))
    except (struct.error, ValueError) as exc:
        raise TokenFormatError(f"corrupt stream header: {exc}") from exc
    count = n * h * w
    if len(raw) != off + 4 * count * n_streams:
        raise TokenFormatError("token payload length does not match the header")
    grids = []
    for spec in specs:
        idx = np.frombuffer(raw, dtype="<u4", count=count, offset=off).astype(np.int64).reshape(n, h, w)
        off += 4 * count
        try:
            grids.append(TokenGrid(idx, spec.codebook_size, spec))
        except IndexError as exc:
            raise TokenFormatError(str(exc)) from exc
    return grids
