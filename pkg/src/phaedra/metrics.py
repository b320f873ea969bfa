"""Reconstruction quality: physical-space errors, spectral fidelity and token usage.

Spectral quantities use the unit-normalized forward DFT (``norm="forward"``)
with no windowing, treating fields as periodic. Radial bins group integer
wavenumbers ``k = 1 .. min(H, W) // 2`` by ``round(|k|)``; the mean mode is
excluded from every radial quantity.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

SPECTRAL_FLOOR = 1e-20
WINDOW = 7
BOUND_SLACK = 1e-9


def _as_batch(a) -> np.ndarray:
    """Coerce a field (or batch) to float64 ``N x H x W``."""
    a = np.asarray(getattr(a, "data", a), dtype=np.float64)
    if a.ndim == 2:
        return a[None]
    if a.ndim == 3:
        return a
    if a.ndim == 4:
        return a.reshape(-1, *a.shape[2:])
    raise ValueError(f"expected a 2D field or a batch of fields, got shape {a.shape}")


def _pair(y, y_hat) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(getattr(y, "data", y), dtype=np.float64)
    b = np.asarray(getattr(y_hat, "data", y_hat), dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


# ---------------------------------------------------------------- physical errors


@dataclass(frozen=True)
class PhysicalErrors:
    nmae: float
    nrmse: float
    nlinf: float
    rl1: float | None
    rl2: float | None


def physical_errors(y, y_hat, sigma_g: float) -> PhysicalErrors:
    """Errors normalized by the global standard deviation, all but nL-inf scaled by 100.

    Relative errors are ``None`` when the reference has zero norm.
    """
    if not sigma_g > 0:
        raise ValueError("sigma_g must be positive")
    a, b = _pair(y, y_hat)
    if a.size == 0:
        raise ValueError("empty fields")
    d = a - b
    ad = np.abs(d)
    l1 = float(np.abs(a).sum())
    l2 = float(np.sqrt(np.square(a).sum()))
    return PhysicalErrors(
        nmae=100.0 * float(ad.mean()) / sigma_g,
        nrmse=100.0 * math.sqrt(float(np.square(d).mean())) / sigma_g,
        nlinf=float(ad.max()) / sigma_g,
        rl1=100.0 * float(ad.sum()) / l1 if l1 > 0 else None,
        rl2=100.0 * float(np.sqrt(np.square(d).sum())) / l2 if l2 > 0 else None,
    )


# ---------------------------------------------------------------- local variance


def local_variance(field: np.ndarray, window: int = WINDOW) -> np.ndarray:
    """Population variance over every valid ``window x window`` patch."""
    f = np.asarray(field, dtype=np.float64)
    if f.shape[-2] < window or f.shape[-1] < window:
        raise ValueError(f"field {f.shape[-2:]} smaller than the {window}x{window} window")
    patches = sliding_window_view(f, (window, window), axis=(-2, -1))
    m1 = patches.mean(axis=(-2, -1))
    m2 = np.square(patches).mean(axis=(-2, -1))
    return m2 - m1 * m1


def local_variance_error(y, y_hat, window: int = WINDOW) -> float:
    """``100 * max|var_loc(y) - var_loc(y_hat)| / max|var_loc(y)|`` for one field."""
    a, b = _pair(y, y_hat)
    a, b = np.squeeze(a), np.squeeze(b)
    if a.ndim != 2:
        raise ValueError("local_variance_error takes a single 2D field")
    va, vb = local_variance(a, window), local_variance(b, window)
    num = float(np.abs(va - vb).max())
    den = float(np.abs(va).max())
    if den == 0.0:
        return 0.0 if num == 0.0 else math.inf
    return 100.0 * num / den


# ---------------------------------------------------------------- spectra


def _spectrum(a: np.ndarray) -> np.ndarray:
    return np.fft.fft2(a, norm="forward")


def radial_bins(h: int, w: int) -> tuple[np.ndarray, int]:
    """Integer radial wavenumber of every 2D mode and the largest bin kept."""
    ky = np.fft.fftfreq(h) * h
    kx = np.fft.fftfreq(w) * w
    k = np.rint(np.sqrt(ky[:, None] ** 2 + kx[None, :] ** 2)).astype(np.int64)
    return k, min(h, w) // 2


def _bin_mean(values: np.ndarray, kbin: np.ndarray, kmax: int) -> np.ndarray:
    """Mean of ``values`` (``... x H x W``) over each radial bin 1..kmax."""
    flat = values.reshape(-1, kbin.size)
    idx = kbin.ravel()
    keep = (idx >= 1) & (idx <= kmax)
    counts = np.bincount(idx[keep], minlength=kmax + 1)[1:]
    out = np.zeros((flat.shape[0], kmax), dtype=values.dtype)
    for r in range(flat.shape[0]):
        if np.iscomplexobj(flat):
            re = np.bincount(idx[keep], flat[r, keep].real, minlength=kmax + 1)[1:]
            im = np.bincount(idx[keep], flat[r, keep].imag, minlength=kmax + 1)[1:]
            out[r] = (re + 1j * im) / counts
        else:
            out[r] = np.bincount(idx[keep], flat[r, keep], minlength=kmax + 1)[1:] / counts
    return out.reshape(values.shape[:-2] + (kmax,))


def radial_power_spectrum(field) -> np.ndarray:
    """Bin-averaged power ``|F|^2`` of one field for ``k = 1 .. min(H, W) // 2``."""
    a = np.squeeze(np.asarray(getattr(field, "data", field), dtype=np.float64))
    if a.ndim != 2:
        raise ValueError("radial_power_spectrum takes a single 2D field")
    kbin, kmax = radial_bins(*a.shape)
    return _bin_mean(np.abs(_spectrum(a)) ** 2, kbin, kmax)


def coherence_spectrum(batch_y, batch_y_hat) -> tuple[np.ndarray, np.ndarray]:
    """Per-bin squared coherence and the mask of bins above the power floor."""
    a, b = _as_batch(batch_y), _as_batch(batch_y_hat)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    if a.shape[0] == 0:
        raise ValueError("empty batch")
    ya, yb = _spectrum(a), _spectrum(b)
    kbin, kmax = radial_bins(*a.shape[1:])
    # batch average first, then the annular average
    gab = _bin_mean((ya * np.conj(yb)).mean(axis=0), kbin, kmax)
    gaa = _bin_mean((np.abs(ya) ** 2).mean(axis=0), kbin, kmax)
    gbb = _bin_mean((np.abs(yb) ** 2).mean(axis=0), kbin, kmax)
    valid = gaa >= SPECTRAL_FLOOR
    with np.errstate(divide="ignore", invalid="ignore"):
        g2 = np.where(valid & (gbb > 0), np.abs(gab) ** 2 / (gaa * gbb), 0.0)
    return g2, valid


def spectral_coherence_min(batch_y, batch_y_hat) -> float:
    """``100 * min_k gamma(k)`` over radial bins whose reference power clears the floor."""
    g2, valid = coherence_spectrum(batch_y, batch_y_hat)
    if not valid.any():
        raise ValueError("reference spectrum is below the floor in every bin")
    return 100.0 * float(np.sqrt(np.minimum(g2[valid], 1.0)).min())


def log_spectral_fidelity(y, y_hat) -> float:
    """``100 * (1 - sum|log E - log E_hat| / sum|log E|)`` over radial bins (raw, unclamped)."""
    e = radial_power_spectrum(y)
    eh = radial_power_spectrum(y_hat)
    if not (e > 0).any():
        raise ValueError("reference spectrum is identically zero")
    le = np.log10(e + SPECTRAL_FLOOR)
    leh = np.log10(eh + SPECTRAL_FLOOR)
    den = float(np.abs(le).sum())
    if den == 0.0:
        raise ValueError("reference log-spectrum is identically zero")
    return 100.0 * (1.0 - float(np.abs(le - leh).sum()) / den)


def max_spectral_difference(y, y_hat) -> float:
    """Largest log10 power discrepancy over every 2D mode of one field."""
    a, b = _pair(y, y_hat)
    a, b = np.squeeze(a), np.squeeze(b)
    if a.ndim != 2:
        raise ValueError("max_spectral_difference takes a single 2D field")
    pa = np.abs(_spectrum(a)) ** 2
    pb = np.abs(_spectrum(b)) ** 2
    return float(np.abs(np.log10(pa + SPECTRAL_FLOOR) - np.log10(pb + SPECTRAL_FLOOR)).max())


# ---------------------------------------------------------------- tokens


@dataclass
class TokenHistogram:
    counts: np.ndarray
    vocab_size: int

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=np.int64)
        if self.counts.shape != (self.vocab_size,):
            raise ValueError(f"counts must have length {self.vocab_size}")
        if (self.counts < 0).any():
            raise ValueError("counts must be non-negative")

    @classmethod
    def from_indices(cls, indices, vocab_size: int) -> "TokenHistogram":
        idx = np.asarray(indices).ravel()
        if idx.size and (idx.min() < 0 or idx.max() >= vocab_size):
            raise ValueError("token index outside the vocabulary")
        return cls(np.bincount(idx, minlength=vocab_size), vocab_size)

    @property
    def total(self) -> int:
        return int(self.counts.sum())


@dataclass(frozen=True)
class TokenStats:
    utilization: float
    entropy_bits: float
    redundancy: float


def token_stats(hist: TokenHistogram) -> TokenStats:
    if hist.total <= 0:
        raise ValueError("histogram is empty")
    if hist.vocab_size < 2:
        raise ValueError("redundancy needs a vocabulary of at least two codes")
    nz = hist.counts[hist.counts > 0]
    total = hist.total
    # correctly rounded sum: independent of bin order
    h = max(-math.fsum(c / total * math.log2(c / total) for c in nz.tolist()), 0.0)
    return TokenStats(
        utilization=100.0 * nz.size / hist.vocab_size,
        entropy_bits=h,
        redundancy=100.0 * (1.0 - h / math.log2(hist.vocab_size)),
    )


# ---------------------------------------------------------------- discretization bound


@dataclass(frozen=True)
class BoundCheck:
    l_final: float
    l_emb: float
    l_quant: float
    bound: float
    holds: bool


def error_bound_check(x, x_hat_cont, x_hat_quant, slack: float = BOUND_SLACK) -> BoundCheck:
    """Check ``L_final <= (sqrt(L_emb) + sqrt(L_quant))^2`` on one batch.

    Each term is the batch mean of a per-sample mean squared difference:
    ``L_final`` between input and quantized reconstruction, ``L_emb``
    between input and the unquantized reconstruction, ``L_quant`` between
    the two reconstructions.
    """
    a = np.asarray(getattr(x, "data", x), dtype=np.float64)
    c = np.asarray(getattr(x_hat_cont, "data", x_hat_cont), dtype=np.float64)
    q = np.asarray(getattr(x_hat_quant, "data", x_hat_quant), dtype=np.float64)
    if not a.shape == c.shape == q.shape:
        raise ValueError(f"shape mismatch: {a.shape}, {c.shape}, {q.shape}")
    if a.ndim < 2 or a.size == 0:
        raise ValueError("expected a non-empty batch")

    def msq(u):
        return float(np.square(u).reshape(u.shape[0], -1).mean(axis=1).mean())

    l_final, l_emb, l_quant = msq(a - q), msq(a - c), msq(c - q)
    bound = (math.sqrt(l_emb) + math.sqrt(l_quant)) ** 2
    return BoundCheck(l_final, l_emb, l_quant, bound, l_final <= bound + slack)


# ---------------------------------------------------------------- reports

CSV_COLUMNS = (
    "nMAE",
    "nRMSE",
    "delta_sigma2_loc",
    "gamma_min",
    "nLinf",
    "rL1",
    "rL2",
    "F_log",
    "F_log_out_of_range",
    "delta_P_max",
    "utilization",
    "entropy_bits",
    "redundancy",
    "sample_count",
)


@dataclass
class MetricsReport:
    nMAE: float
    nRMSE: float
    nLinf: float
    rL1: float | None
    rL2: float | None
    delta_sigma2_loc: float
    gamma_min: float
    F_log: float
    delta_P_max: float
    sample_count: int
    F_log_out_of_range: bool = False
    utilization: float | None = None
    entropy_bits: float | None = None
    redundancy: float | None = None
    streams: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        wr = csv.writer(buf, lineterminator="\n")
        wr.writerow(CSV_COLUMNS)
        d = self.to_dict()
        wr.writerow(["" if d[c] is None else repr(d[c]) if isinstance(d[c], float) else d[c] for c in CSV_COLUMNS])
        return buf.getvalue()


def _mean_or_none(vals: list) -> float | None:
    if any(v is None for v in vals):
        return None
    return float(np.mean(vals))


def evaluate_batch(y, y_hat, sigma_g: float, token_grids: dict | None = None) -> MetricsReport:
    """Full report over a batch (``N x 1 x H x W``).

    Per-sample metrics are averaged over samples; coherence pools the whole
    batch. Token statistics come from the first stream, with every stream
    listed under ``streams``.
    """
    a, b = _as_batch(y), _as_batch(y_hat)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    n = a.shape[0]
    if n == 0:
        raise ValueError("empty batch")
    phys = [physical_errors(a[i], b[i], sigma_g) for i in range(n)]
    flog_raw = float(np.mean([log_spectral_fidelity(a[i], b[i]) for i in range(n)]))
    report = MetricsReport(
        nMAE=float(np.mean([p.nmae for p in phys])),
        nRMSE=float(np.mean([p.nrmse for p in phys])),
        nLinf=float(np.mean([p.nlinf for p in phys])),
        rL1=_mean_or_none([p.rl1 for p in phys]),
        rL2=_mean_or_none([p.rl2 for p in phys]),
        delta_sigma2_loc=float(np.mean([local_variance_error(a[i], b[i]) for i in range(n)])),
        gamma_min=spectral_coherence_min(a, b),
        F_log=min(max(flog_raw, 0.0), 100.0),
        F_log_out_of_range=not 0.0 <= flog_raw <= 100.0,
        delta_P_max=float(np.mean([max_spectral_difference(a[i], b[i]) for i in range(n)])),
        sample_count=n,
    )
    if token_grids:
        for name, grid in token_grids.items():
            st = token_stats(TokenHistogram.from_indices(grid.indices, grid.vocab_size))
            report.streams[name] = asdict(st) | {"vocab_size": grid.vocab_size}
        first = report.streams[next(iter(token_grids))]
        report.utilization = first["utilization"]
        report.entropy_bits = first["entropy_bits"]
        report.redundancy = first["redundancy"]
    return report
