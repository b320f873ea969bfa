"""Synthetic 2D field families, normalization statistics and the dataset file format.

A dataset directory holds raw little-endian float32 shards (row-major
``N x 1 x H x W``) and a ``manifest.json`` describing the family, seed,
shape, split boundaries and the training-split statistics.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

FAMILIES = ("gaussians", "sines", "quadrants", "multiscale")
MANIFEST = "manifest.json"
FORMAT_VERSION = 1


class DataError(ValueError):
    """Malformed, missing or degenerate dataset content."""


@dataclass(frozen=True)
class FieldStats:
    mu: float
    sigma_g: float

    def __post_init__(self):
        if not (math.isfinite(self.mu) and math.isfinite(self.sigma_g)):
            raise DataError("statistics must be finite")
        if self.sigma_g <= 0:
            raise DataError(f"sigma_g must be positive, got {self.sigma_g}")


@dataclass
class FieldTensor:
    """A ``C x H x W`` (or batched ``N x C x H x W``) field plus its statistics."""

    data: np.ndarray
    stats: FieldStats | None = None
    normalized: bool = False

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim not in (3, 4):
            raise ValueError(f"field must be C x H x W or N x C x H x W, got shape {self.data.shape}")

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape


@dataclass
class GeneratorParams:
    family: str = "gaussians"
    count: int = 100
    amplitude_range: tuple[float, float] = (-1.0, 1.0)
    width_range: tuple[float, float] = (0.02, 0.1)
    modes: int = 10
    max_wavenumber: int = 8
    terms: int = 20
    decay: float = 1.0
    lognormal_sigma: float = 0.5

    def validate(self) -> None:
        if self.family not in FAMILIES:
            raise ValueError(f"unknown family {self.family!r}; choose from {FAMILIES}")
        lo, hi = self.amplitude_range
        if not lo <= hi:
            raise ValueError("amplitude range must satisfy low <= high")
        wlo, whi = self.width_range
        if not 0 < wlo <= whi:
            raise ValueError("widths must be positive with low <= high")
        if self.count < 1:
            raise ValueError("gaussian count must be at least 1")
        if self.modes < 1 or self.max_wavenumber < 1:
            raise ValueError("sines need at least one mode and a positive wavenumber cap")
        if self.terms < 1 or self.decay < 0:
            raise ValueError("multiscale needs terms >= 1 and decay >= 0")
        if self.lognormal_sigma < 0:
            raise ValueError("lognormal_sigma must be non-negative")


def _check_resolution(resolution: int) -> None:
    if resolution < 1:
        raise ValueError("resolution must be positive")


def _periodic_grid(n: int) -> np.ndarray:
    return np.arange(n) / n


# ---------------------------------------------------------------- generators


def gen_gaussians(
    rng: np.random.Generator | None,
    resolution: int,
    count: int = 100,
    amplitude_range: tuple[float, float] = (-1.0, 1.0),
    width_range: tuple[float, float] = (0.02, 0.1),
    centers: np.ndarray | None = None,
    amplitudes: np.ndarray | None = None,
    widths: np.ndarray | None = None,
) -> FieldTensor:
    """Sum of isotropic Gaussians on the unit torus.

    Each bump is wrapped over the neighbouring domain copies (shifts of -1,
    0, +1 along each axis). Explicit ``centers``/``amplitudes``/``widths``
    override the random draws.
    """
    _check_resolution(resolution)
    if count < 1:
        raise ValueError("count must be at least 1")
    if not 0 < width_range[0] <= width_range[1]:
        raise ValueError("widths must be positive with low <= high")
    if amplitude_range[0] > amplitude_range[1]:
        raise ValueError("amplitude range must satisfy low <= high")
    if centers is None:
        centers = rng.uniform(0.0, 1.0, size=(count, 2))
    if amplitudes is None:
        amplitudes = rng.uniform(*amplitude_range, size=count)
    if widths is None:
        widths = rng.uniform(*width_range, size=count)
    centers = np.asarray(centers, dtype=np.float64).reshape(-1, 2)
    amplitudes = np.asarray(amplitudes, dtype=np.float64).reshape(-1)
    widths = np.asarray(widths, dtype=np.float64).reshape(-1)
    if np.any(widths <= 0):
        raise ValueError("widths must be positive")
    g = _periodic_grid(resolution)

    def profile(c):
        d = g[None, :] - c[:, None]
        return sum(np.exp(-((d + a) ** 2) / (2 * widths[:, None] ** 2)) for a in (-1.0, 0.0, 1.0))

    gx = profile(centers[:, 0])
    gy = profile(centers[:, 1])
    out = gy.T @ (amplitudes[:, None] * gx)
    return FieldTensor(out[None])


def gen_sines(
    rng: np.random.Generator | None,
    resolution: int,
    modes: int = 10,
    max_wavenumber: int = 8,
    wavenumbers: np.ndarray | None = None,
    coefficients: np.ndarray | None = None,
) -> FieldTensor:
    """``sum_m (a_m sin + b_m cos)(2 pi (k_m x + l_m y))`` with integer wavenumbers.

    The constant mode ``(0, 0)`` is never drawn, so every field has zero mean.
    """
    _check_resolution(resolution)
    if modes < 1 or max_wavenumber < 1:
        raise ValueError("need modes >= 1 and max_wavenumber >= 1")
    if wavenumbers is None:
        kl = []
        while len(kl) < modes:
            k, l = rng.integers(-max_wavenumber, max_wavenumber + 1, size=2)
            if k or l:
                kl.append((k, l))
        wavenumbers = np.array(kl)
    if coefficients is None:
        coefficients = rng.uniform(-1.0, 1.0, size=(len(wavenumbers), 2))
    wavenumbers = np.asarray(wavenumbers, dtype=np.int64).reshape(-1, 2)
    coefficients = np.asarray(coefficients, dtype=np.float64).reshape(-1, 2)
    if np.abs(wavenumbers).max(initial=0) > max_wavenumber:
        raise ValueError("wavenumber exceeds max_wavenumber")
    g = _periodic_grid(resolution)
    x = g[None, :]
    y = g[:, None]
    out = np.zeros((resolution, resolution))
    for (k, l), (a, b) in zip(wavenumbers, coefficients):
        phase = 2 * np.pi * (k * x + l * y)
        out += a * np.sin(phase) + b * np.cos(phase)
    return FieldTensor(out[None])


def gen_quadrants(rng: np.random.Generator | None, resolution: int, values: Sequence[float] | None = None) -> FieldTensor:
    """Four constant blocks: top-left, top-right, bottom-left, bottom-right."""
    _check_resolution(resolution)
    if resolution % 2:
        raise ValueError("quadrant fields need an even resolution")
    if values is None:
        values = rng.uniform(-1.0, 1.0, size=4)
    q = np.asarray(values, dtype=np.float64)
    if q.shape != (4,):
        raise ValueError("quadrants need exactly four values")
    h = resolution // 2
    out = np.empty((resolution, resolution))
    out[:h, :h], out[:h, h:], out[h:, :h], out[h:, h:] = q
    return FieldTensor(out[None])


def gen_multiscale(
    rng: np.random.Generator | None,
    resolution: int,
    terms: int = 20,
    decay: float = 1.0,
    coefficients: np.ndarray | None = None,
) -> FieldTensor:
    """``sum_{i,j<=K} a_ij (i^2+j^2)^(-r) sin(pi i x) sin(pi j y)`` on ``[0, 1]^2``.

    The grid includes both boundaries, where every term vanishes.
    """
    _check_resolution(resolution)
    if terms < 1 or decay < 0:
        raise ValueError("need terms >= 1 and decay >= 0")
    if coefficients is None:
        coefficients = rng.uniform(-1.0, 1.0, size=(terms, terms))
    a = np.asarray(coefficients, dtype=np.float64)
    if a.shape != (terms, terms):
        raise ValueError(f"coefficients must be {terms} x {terms}")
    idx = np.arange(1, terms + 1)
    weight = (idx[:, None] ** 2 + idx[None, :] ** 2).astype(np.float64) ** (-decay)
    g = np.linspace(0.0, 1.0, resolution) if resolution > 1 else np.zeros(1)
    s = np.sin(np.pi * idx[:, None] * g[None, :])
    # a[i, j] pairs wavenumber i along x with j along y
    out = s.T @ (a * weight).T @ s
    return FieldTensor(out[None])


def generate_field(family: str, rng: np.random.Generator, resolution: int, params: GeneratorParams | None = None) -> FieldTensor:
    p = params or GeneratorParams(family=family)
    if family == "gaussians":
        return gen_gaussians(rng, resolution, p.count, p.amplitude_range, p.width_range)
    if family == "sines":
        return gen_sines(rng, resolution, p.modes, p.max_wavenumber)
    if family == "quadrants":
        return gen_quadrants(rng, resolution)
    if family == "multiscale":
        return gen_multiscale(rng, resolution, p.terms, p.decay)
    raise ValueError(f"unknown family {family!r}; choose from {FAMILIES}")


def sample_rng(seed: int, family: str, index: int) -> np.random.Generator:
    """Counter-derived generator so every sample is independent of generation order."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, FAMILIES.index(family), index])))


def generate_sample(family: str, seed: int, index: int, resolution: int, params: GeneratorParams | None = None) -> np.ndarray:
    """One dataset sample (``1 x H x W`` float64) including its log-normal amplitude factor."""
    p = params or GeneratorParams(family=family)
    rng = sample_rng(seed, family, index)
    x = generate_field(family, rng, resolution, p).data
    return x * math.exp(p.lognormal_sigma * rng.standard_normal())


def generate_samples(
    family: str, seed: int, start: int, count: int, resolution: int, params: GeneratorParams | None = None
) -> np.ndarray:
    out = np.empty((count, 1, resolution, resolution), dtype=np.float32)
    for k in range(count):
        out[k] = generate_sample(family, seed, start + k, resolution, params)
    return out


# ---------------------------------------------------------------- statistics


def compute_stats(batches: np.ndarray | Iterable[np.ndarray]) -> FieldStats:
    """Pooled mean and population standard deviation over every pixel.

    Batches are merged one at a time with the pairwise (Chan) update in
    float64, so memory stays bounded by a single batch.
    """
    if isinstance(batches, np.ndarray):
        batches = [batches]
    n, mean, m2 = 0, 0.0, 0.0
    for b in batches:
        b = np.asarray(b, dtype=np.float64).ravel()
        if b.size == 0:
            continue
        if not np.isfinite(b).all():
            raise DataError("non-finite values in training split")
        nb = b.size
        mb = float(b.mean())
        m2b = float(np.square(b - mb).sum())
        delta = mb - mean
        tot = n + nb
        mean += delta * nb / tot
        m2 += m2b + delta * delta * n * nb / tot
        n = tot
    if n == 0:
        raise DataError("cannot compute statistics of an empty split")
    var = m2 / n
    if var <= 0:
        raise DataError("training split has zero variance")
    return FieldStats(mean, math.sqrt(var))


def normalize(x, stats: FieldStats):
    if stats.sigma_g <= 0:
        raise DataError("sigma_g must be positive")
    if isinstance(x, FieldTensor):
        if x.normalized:
            raise ValueError("field is already normalized")
        return FieldTensor(((x.data - stats.mu) / stats.sigma_g).astype(x.data.dtype), stats, True)
    x = np.asarray(x)
    return ((x - stats.mu) / stats.sigma_g).astype(x.dtype if x.dtype.kind == "f" else np.float64)


def denormalize(x, stats: FieldStats):
    if stats.sigma_g <= 0:
        raise DataError("sigma_g must be positive")
    if isinstance(x, FieldTensor):
        if not x.normalized:
            raise ValueError("field is not normalized")
        return FieldTensor((x.data * stats.sigma_g + stats.mu).astype(x.data.dtype), stats, False)
    x = np.asarray(x)
    return (x * stats.sigma_g + stats.mu).astype(x.dtype if x.dtype.kind == "f" else np.float64)


# ---------------------------------------------------------------- dataset files


@dataclass
class DatasetManifest:
    family: str
    seed: int | None
    resolution: int
    count: int
    splits: dict[str, list[int]]
    shards: list[dict]
    stats: dict[str, float]
    dtype: str = "<f4"
    generator: dict | None = None
    version: int = FORMAT_VERSION

    @property
    def field_stats(self) -> FieldStats:
        return FieldStats(self.stats["mu"], self.stats["sigma_g"])

    @property
    def shape(self) -> list[int]:
        return [self.count, 1, self.resolution, self.resolution]

    def to_json(self) -> str:
        d = asdict(self)
        d["shape"] = self.shape
        return json.dumps(d, indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "DatasetManifest":
        try:
            d = json.loads(text)
            d.pop("shape", None)
            m = cls(**d)
        except (json.JSONDecodeError, TypeError) as e:
            raise DataError(f"malformed manifest: {e}") from e
        if m.version != FORMAT_VERSION:
            raise DataError(f"unsupported dataset version {m.version}")
        if m.dtype != "<f4":
            raise DataError(f"unsupported dtype {m.dtype}")
        return m


class Dataset:
    """Read access to a dataset directory."""

    def __init__(self, root: str | Path):
        self.root = Path(root)
        path = self.root / MANIFEST
        if not path.is_file():
            raise DataError(f"no {MANIFEST} in {self.root}")
        self.manifest = DatasetManifest.from_json(path.read_text())
        total = 0
        for shard in self.manifest.shards:
            p = self.root / shard["path"]
            expected = shard["count"] * self.manifest.resolution ** 2 * 4
            if not p.is_file() or p.stat().st_size != expected:
                raise DataError(f"shard {p} is missing or has the wrong size")
            total += shard["count"]
        if total != self.manifest.count:
            raise DataError("shard counts do not add up to the manifest count")

    @property
    def stats(self) -> FieldStats:
        return self.manifest.field_stats

    @property
    def resolution(self) -> int:
        return self.manifest.resolution

    def read(self, start: int, stop: int) -> np.ndarray:
        """Samples ``[start, stop)`` as float32 ``N x 1 x H x W``."""
        r = self.manifest.resolution
        if not 0 <= start <= stop <= self.manifest.count:
            raise IndexError(f"range [{start}, {stop}) outside dataset of {self.manifest.count}")
        parts = []
        for shard in self.manifest.shards:
            lo, hi = shard["start"], shard["start"] + shard["count"]
            a, b = max(lo, start), min(hi, stop)
            if a >= b:
                continue
            mm = np.memmap(self.root / shard["path"], dtype="<f4", mode="r", shape=(shard["count"], 1, r, r))
            parts.append(np.array(mm[a - lo : b - lo], dtype=np.float32))
        if not parts:
            return np.empty((0, 1, r, r), dtype=np.float32)
        return np.concatenate(parts)

    def split(self, name: str) -> np.ndarray:
        if name not in self.manifest.splits:
            raise DataError(f"dataset has no split {name!r}")
        lo, hi = self.manifest.splits[name]
        return self.read(lo, hi)

    def iter_split(self, name: str, batch: int = 1024) -> Iterable[np.ndarray]:
        lo, hi = self.manifest.splits[name]
        for s in range(lo, hi, batch):
            yield self.read(s, min(s + batch, hi))


def _write_shards(root: Path, chunks: Iterable[np.ndarray], resolution: int, shard_size: int) -> tuple[list[dict], int]:
    shards, total, buf = [], 0, []

    def flush():
        nonlocal total
        if not buf:
            return
        arr = np.concatenate(buf).astype("<f4")
        name = f"shard_{len(shards):05d}.f32"
        arr.tofile(root / name)
        shards.append({"path": name, "start": total, "count": int(arr.shape[0])})
        total += arr.shape[0]
        buf.clear()

    pending = 0
    for c in chunks:
        c = np.asarray(c, dtype=np.float32)
        if c.ndim != 4 or c.shape[1:] != (1, resolution, resolution):
            raise DataError(f"expected N x 1 x {resolution} x {resolution} samples, got {c.shape}")
        if not np.isfinite(c).all():
            raise DataError("non-finite sample values")
        while c.shape[0]:
            take = min(shard_size - pending, c.shape[0])
            buf.append(c[:take])
            pending += take
            c = c[take:]
            if pending == shard_size:
                flush()
                pending = 0
    flush()
    return shards, total


def write_dataset(
    root: str | Path,
    samples: np.ndarray,
    n_train: int,
    family: str = "external",
    seed: int | None = None,
    generator: dict | None = None,
    shard_size: int = 1024,
    stats: FieldStats | None = None,
) -> DatasetManifest:
    """Store ``samples`` (first ``n_train`` form the training split) with its manifest.

    ``stats`` overrides the statistics otherwise computed from the training split.
    """
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    samples = np.asarray(samples, dtype=np.float32)
    if samples.ndim != 4 or samples.shape[1] != 1 or samples.shape[2] != samples.shape[3]:
        raise DataError(f"expected N x 1 x H x H samples, got {samples.shape}")
    n = samples.shape[0]
    if not 0 < n_train <= n:
        raise DataError("training split must be non-empty and within the sample count")
    if stats is None:
        stats = compute_stats(samples[:n_train])
    res = samples.shape[2]
    shards, total = _write_shards(root, [samples], res, shard_size)
    manifest = DatasetManifest(
        family=family,
        seed=seed,
        resolution=res,
        count=total,
        splits={"train": [0, n_train], "test": [n_train, n]},
        shards=shards,
        stats={"mu": stats.mu, "sigma_g": stats.sigma_g},
        generator=generator,
    )
    (root / MANIFEST).write_text(manifest.to_json())
    return manifest


def generate_dataset(
    root: str | Path,
    families: Sequence[str],
    n_train: int,
    n_test: int,
    resolution: int,
    seed: int,
    params: GeneratorParams | None = None,
    shard_size: int = 1024,
) -> DatasetManifest:
    """Generate a (possibly mixed-family) dataset.

    The training split holds ``n_train`` samples per family, family blocks
    in the given order; the test split likewise holds ``n_test`` per family.
    """
    for f in families:
        if f not in FAMILIES:
            raise ValueError(f"unknown family {f!r}; choose from {FAMILIES}")
    if n_train < 1 or n_test < 0:
        raise ValueError("need n_train >= 1 and n_test >= 0")
    base = params or GeneratorParams()
    base.validate()

    def fam_params(f):
        return GeneratorParams(**{**asdict(base), "family": f})

    # test samples use indices after the training block so splits never overlap
    blocks = [(f, 0, n_train) for f in families] + [(f, n_train, n_test) for f in families]

    def chunks():
        for f, start, count in blocks:
            for s in range(0, count, shard_size):
                yield generate_samples(f, seed, start + s, min(shard_size, count - s), resolution, fam_params(f))

    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    shards, total = _write_shards(root, chunks(), resolution, shard_size)
    tr = n_train * len(families)
    manifest = DatasetManifest(
        family="+".join(families),
        seed=seed,
        resolution=resolution,
        count=total,
        splits={"train": [0, tr], "test": [tr, total]},
        shards=shards,
        stats={"mu": 0.0, "sigma_g": 1.0},
        generator={**asdict(base), "family": list(families)},
    )
    (root / MANIFEST).write_text(manifest.to_json())
    stats = compute_stats(Dataset(root).iter_split("train"))
    manifest.stats = {"mu": stats.mu, "sigma_g": stats.sigma_g}
    (root / MANIFEST).write_text(manifest.to_json())
    return manifest


def ingest(
    sources: Sequence[str | Path], root: str | Path, resolution: int, n_train: int | None = None, shard_size: int = 1024
) -> DatasetManifest:
    """Build a dataset from external raw float32 files or ``.npy`` arrays.

    Raw files must contain whole ``1 x H x W`` little-endian float32 samples.
    Without ``n_train`` every sample goes to the training split.
    """
    arrays = []
    for s in sources:
        p = Path(s)
        if not p.is_file():
            raise DataError(f"no such file: {p}")
        if p.suffix == ".npy":
            a = np.load(p)
            a = a.reshape(-1, 1, resolution, resolution) if a.size % (resolution * resolution) == 0 else a
        else:
            raw = p.read_bytes()
            per = resolution * resolution * 4
            if len(raw) % per:
                raise DataError(f"{p}: size {len(raw)} is not a whole number of {resolution}x{resolution} samples")
            a = np.frombuffer(raw, dtype="<f4").reshape(-1, 1, resolution, resolution)
        arrays.append(np.asarray(a, dtype=np.float32))
    if not arrays:
        raise DataError("no input files")
    samples = np.concatenate(arrays)
    return write_dataset(root, samples, n_train or samples.shape[0], "external", None, None, shard_size)
