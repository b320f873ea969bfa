import json
import math

import numpy as np
import pytest

from phaedra.datagen import (
    FAMILIES,
    DataError,
    Dataset,
    DatasetManifest,
    FieldStats,
    FieldTensor,
    GeneratorParams,
    compute_stats,
    denormalize,
    gen_gaussians,
    gen_multiscale,
    gen_quadrants,
    gen_sines,
    generate_dataset,
    generate_sample,
    generate_samples,
    ingest,
    normalize,
    sample_rng,
    write_dataset,
)


# ---------------------------------------------------------------- gaussians


def test_single_gaussian_peaks_at_center():
    f = gen_gaussians(None, 64, count=1, centers=[[0.5, 0.5]], amplitudes=[1.0], widths=[0.05]).data[0]
    assert np.unravel_index(np.argmax(f), f.shape) == (32, 32)
    assert f.max() == pytest.approx(1.0, abs=1e-12)


def test_gaussian_wraps_periodically():
    f = gen_gaussians(None, 64, count=1, centers=[[0.0, 0.0]], amplitudes=[1.0], widths=[0.05]).data[0]
    assert f[0, 1] == pytest.approx(f[0, -1], rel=1e-12)
    assert f[1, 0] == pytest.approx(f[-1, 0], rel=1e-12)


def test_gaussians_deterministic():
    a = gen_gaussians(sample_rng(3, "gaussians", 7), 64).data
    b = gen_gaussians(sample_rng(3, "gaussians", 7), 64).data
    assert a.tobytes() == b.tobytes()


@pytest.mark.parametrize("amp", [(-1.0, 1.0), (0.0, 1.0)])
def test_gaussians_monte_carlo_mean(amp):
    # a wrapped Gaussian integrates to 2 pi s^2 over the unit torus
    lo, hi = 0.02, 0.1
    es2 = (hi**3 - lo**3) / (3 * (hi - lo))
    es4 = (hi**5 - lo**5) / (5 * (hi - lo))
    ea = (amp[0] + amp[1]) / 2
    ea2 = (amp[1] ** 3 - amp[0] ** 3) / (3 * (amp[1] - amp[0]))
    expected = 100 * ea * 2 * math.pi * es2
    var = 100 * (ea2 * 4 * math.pi**2 * es4 - (ea * 2 * math.pi * es2) ** 2)
    means = [gen_gaussians(sample_rng(s, "gaussians", 0), 64, amplitude_range=amp).data.mean() for s in range(1000)]
    assert abs(np.mean(means) - expected) < 3 * math.sqrt(var / 1000)


def test_gaussian_parameter_errors():
    with pytest.raises(ValueError):
        gen_gaussians(np.random.default_rng(0), 16, count=0)
    with pytest.raises(ValueError):
        gen_gaussians(np.random.default_rng(0), 16, width_range=(0.0, 0.1))
    with pytest.raises(ValueError):
        gen_gaussians(None, 16, count=1, centers=[[0, 0]], amplitudes=[1.0], widths=[-1.0])


# ---------------------------------------------------------------- sines


def test_single_sine_mode():
    f = gen_sines(None, 32, wavenumbers=[[3, 5]], coefficients=[[1.0, 0.0]]).data[0]
    assert abs(f.mean()) < 1e-12
    p = np.abs(np.fft.fft2(f)) ** 2
    peaks = {tuple(ix) for ix in np.argwhere(p > 1e-6 * p.max())}
    assert peaks == {(5, 3), (32 - 5, 32 - 3)}  # rows index y (l), columns index x (k)


def test_sines_zero_mean_and_determinism():
    for s in range(20):
        f = gen_sines(sample_rng(s, "sines", 0), 64).data
        assert abs(f.mean()) < 1e-9
    a = gen_sines(sample_rng(1, "sines", 1), 64).data
    assert a.tobytes() == gen_sines(sample_rng(1, "sines", 1), 64).data.tobytes()


def test_sines_errors():
    with pytest.raises(ValueError):
        gen_sines(np.random.default_rng(0), 16, modes=0)
    with pytest.raises(ValueError):
        gen_sines(None, 16, wavenumbers=[[9, 0]], coefficients=[[1, 1]])


# ---------------------------------------------------------------- quadrants


def test_quadrants_examples():
    f = gen_quadrants(None, 8, [0.3] * 4).data[0]
    assert np.all(f == 0.3)
    q = [1.0, -1.0, 1.0, -1.0]
    f = gen_quadrants(None, 8, q).data[0]
    means = [f[:4, :4].mean(), f[:4, 4:].mean(), f[4:, :4].mean(), f[4:, 4:].mean()]
    assert means == q
    f = gen_quadrants(None, 8, [0.2, -0.5, 0.7, 0.1]).data[0]
    assert abs(f[0, 4] - f[0, 3]) == pytest.approx(0.7)
    with pytest.raises(ValueError):
        gen_quadrants(np.random.default_rng(0), 7)


def test_quadrants_have_discontinuities():
    hits = 0
    for s in range(500):
        f = gen_quadrants(sample_rng(s, "quadrants", 0), 16).data[0]
        jumps = [abs(f[0, 8] - f[0, 7]), abs(f[15, 8] - f[15, 7]), abs(f[8, 0] - f[7, 0]), abs(f[8, 15] - f[7, 15])]
        hits += max(jumps) > 0.1
    assert hits / 500 > 0.99


# ---------------------------------------------------------------- multiscale


def test_multiscale_single_term():
    f = gen_multiscale(None, 33, terms=1, decay=0.0, coefficients=[[1.0]]).data[0]
    g = np.linspace(0, 1, 33)
    np.testing.assert_allclose(f, np.outer(np.sin(np.pi * g), np.sin(np.pi * g)), atol=1e-15)
    np.testing.assert_allclose([f[0], f[-1], f[:, 0], f[:, -1]], 0, atol=1e-15)


def test_multiscale_decay_reduces_high_frequency_energy():
    a = np.random.default_rng(0).uniform(-1, 1, (20, 20))
    ratios = []
    for r in (0, 1, 2):
        f = gen_multiscale(None, 64, terms=20, decay=r, coefficients=a).data[0]
        p = np.abs(np.fft.fft2(f)) ** 2
        k = np.hypot(*np.meshgrid(np.fft.fftfreq(64) * 64, np.fft.fftfreq(64) * 64))
        ratios.append(p[k > 8].sum() / p[(k >= 1) & (k <= 8)].sum())
    assert ratios[0] > ratios[1] > ratios[2]


def test_multiscale_deterministic_and_errors():
    a = gen_multiscale(sample_rng(0, "multiscale", 0), 32).data
    assert a.tobytes() == gen_multiscale(sample_rng(0, "multiscale", 0), 32).data.tobytes()
    with pytest.raises(ValueError):
        gen_multiscale(np.random.default_rng(0), 16, terms=0)
    with pytest.raises(ValueError):
        gen_multiscale(np.random.default_rng(0), 16, decay=-1)


@pytest.mark.parametrize("family", FAMILIES)
def test_samples_finite_and_order_independent(family):
    block = generate_samples(family, 5, 10, 4, 32)
    assert np.isfinite(block).all()
    np.testing.assert_array_equal(block[2], generate_sample(family, 5, 12, 32).astype(np.float32))


def test_generator_params_validation():
    for bad in (dict(family="noise"), dict(count=0), dict(width_range=(0.1, 0.05)), dict(decay=-1.0)):
        with pytest.raises(ValueError):
            GeneratorParams(**bad).validate()


# ---------------------------------------------------------------- statistics


def test_stats_examples():
    s = compute_stats(np.array([[0.0, 0.0], [2.0, 2.0]]))
    assert (s.mu, s.sigma_g) == (1.0, 1.0)
    with pytest.raises(DataError):
        compute_stats(np.full((3, 4), 2.5))
    with pytest.raises(DataError):
        compute_stats([])
    with pytest.raises(DataError):
        FieldStats(0.0, 0.0)


def test_streaming_stats_match_two_pass(rng):
    x = rng.standard_normal((50, 1, 16, 16)) * 3 + 100
    s = compute_stats(x[i : i + 7] for i in range(0, 50, 7))
    mu = x.mean()
    sd = math.sqrt(((x - mu) ** 2).mean())
    assert abs(s.mu - mu) < 1e-12 and abs(s.sigma_g - sd) < 1e-12


def test_normalize_round_trip(rng):
    stats = FieldStats(0.4, 2.5)
    assert normalize(np.array([0.4]), stats)[0] == 0.0
    x = rng.standard_normal((4, 1, 16, 16)).astype(np.float32) * 5
    back = denormalize(normalize(x, stats), stats)
    assert back.dtype == np.float32
    assert np.abs(back - x).max() < 1e-6 * max(1.0, np.abs(x).max())
    ft = normalize(FieldTensor(x), stats)
    assert ft.normalized and ft.stats == stats
    with pytest.raises(ValueError):
        normalize(ft, stats)
    train = rng.standard_normal((20, 1, 8, 8)) * 3 + 1
    n = normalize(train, compute_stats(train))
    assert abs(n.mean()) < 1e-6 and abs(n.std() - 1) < 1e-6


# ---------------------------------------------------------------- dataset files


def test_generate_dataset_layout(tmp_path):
    m = generate_dataset(tmp_path / "d", ["gaussians", "quadrants"], 5, 3, 16, seed=1, shard_size=4)
    assert m.count == 16 and m.splits == {"train": [0, 10], "test": [10, 16]}
    ds = Dataset(tmp_path / "d")
    assert len(m.shards) == 4
    x = ds.read(0, 16)
    np.testing.assert_array_equal(x[0], generate_sample("gaussians", 1, 0, 16).astype(np.float32))
    np.testing.assert_array_equal(x[5], generate_sample("quadrants", 1, 0, 16).astype(np.float32))
    np.testing.assert_array_equal(x[10], generate_sample("gaussians", 1, 5, 16).astype(np.float32))
    np.testing.assert_array_equal(x[13], generate_sample("quadrants", 1, 5, 16).astype(np.float32))
    s = compute_stats(ds.split("train"))
    assert (s.mu, s.sigma_g) == (ds.stats.mu, ds.stats.sigma_g)
    raw = np.fromfile(tmp_path / "d" / m.shards[0]["path"], dtype="<f4")
    np.testing.assert_array_equal(raw.reshape(-1, 1, 16, 16), x[:4])


def test_generate_dataset_deterministic(tmp_path):
    generate_dataset(tmp_path / "a", ["sines"], 4, 2, 16, seed=9)
    generate_dataset(tmp_path / "b", ["sines"], 4, 2, 16, seed=9)
    for name in sorted(p.name for p in (tmp_path / "a").iterdir()):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_manifest_json_round_trip(tmp_path):
    m = generate_dataset(tmp_path / "d", ["multiscale"], 3, 1, 16, seed=2)
    back = DatasetManifest.from_json(m.to_json())
    assert back.to_json() == m.to_json()
    assert json.loads(m.to_json())["shape"] == [4, 1, 16, 16]


def test_dataset_errors(tmp_path):
    with pytest.raises(DataError):
        Dataset(tmp_path)
    m = generate_dataset(tmp_path / "d", ["sines"], 3, 1, 16, seed=2)
    ds = Dataset(tmp_path / "d")
    with pytest.raises(IndexError):
        ds.read(0, 5)
    with pytest.raises(DataError):
        ds.split("validation")
    shard = tmp_path / "d" / m.shards[0]["path"]
    shard.write_bytes(shard.read_bytes()[:-4])
    with pytest.raises(DataError):
        Dataset(tmp_path / "d")
    (tmp_path / "e").mkdir()
    (tmp_path / "e" / "manifest.json").write_text("{not json")
    with pytest.raises(DataError):
        Dataset(tmp_path / "e")


def test_write_dataset_validation(tmp_path, rng):
    with pytest.raises(DataError):
        write_dataset(tmp_path / "a", rng.standard_normal((4, 1, 8, 6)), 2)
    with pytest.raises(DataError):
        write_dataset(tmp_path / "b", rng.standard_normal((4, 1, 8, 8)), 0)
    bad = rng.standard_normal((4, 1, 8, 8))
    bad[1, 0, 0, 0] = np.nan
    with pytest.raises(DataError):
        write_dataset(tmp_path / "c", bad, 2)


def test_ingest_raw_and_npy(tmp_path, rng):
    x = rng.standard_normal((6, 1, 8, 8)).astype("<f4")
    x[:3].tofile(tmp_path / "a.f32")
    np.save(tmp_path / "b.npy", x[3:])
    m = ingest([tmp_path / "a.f32", tmp_path / "b.npy"], tmp_path / "out", 8, n_train=4)
    assert m.splits == {"train": [0, 4], "test": [4, 6]}
    np.testing.assert_array_equal(Dataset(tmp_path / "out").read(0, 6), x)
    (tmp_path / "c.f32").write_bytes(b"\0" * 10)
    with pytest.raises(DataError):
        ingest([tmp_path / "c.f32"], tmp_path / "out2", 8)
    with pytest.raises(DataError):
        ingest([tmp_path / "missing.f32"], tmp_path / "out3", 8)
