import csv
import json
import subprocess
import sys

import numpy as np
import pytest

from phaedra.checkpoint import load_checkpoint, read_manifest
from phaedra.cli import main, parse_value, read_config
from phaedra.datagen import Dataset, FieldStats, compute_stats, denormalize, gen_sines, write_dataset
from phaedra.model import ModelConfig, build_model
from phaedra.pipeline import encode_samples
from phaedra.quantizers import read_tokens

TINY = ["--set", "base_channels=8", "--set", "channel_multipliers=1,2", "--set", "num_res_blocks=1", "--set", "groups=4"]


def run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """A small dataset, a trained tiny phaedra checkpoint and its token file."""
    root = tmp_path_factory.mktemp("cli")
    assert run("gen", "gaussians,quadrants", 6, 16, "--test-count", 2, "--seed", 3, "--out", root / "data") == 0
    assert run("train", "--data", root / "data", "--steps", 3, "--batch-size", 2, *TINY, "--out", root / "run") == 0
    assert run("tokenize", "--checkpoint", root / "run/final", "--data", root / "data", "--out", root / "tok") == 0
    return root


# ---------------------------------------------------------------- config parsing


def test_parse_value():
    assert parse_value("3") == 3
    assert parse_value("1e-3") == 1e-3
    assert parse_value("1,2,2") == [1, 2, 2]
    assert parse_value("phaedra") == "phaedra"
    assert parse_value("[5, 4]") == [5, 4]


def test_read_config(tmp_path):
    (tmp_path / "c.cfg").write_text("# comment\nbase_channels = 8\nvariant = fsq  # trailing\n\n")
    assert read_config(tmp_path / "c.cfg") == {"base_channels": 8, "variant": "fsq"}


# ---------------------------------------------------------------- exit codes


def test_usage_errors(tmp_path, capsys):
    assert run() == 1
    assert run("bogus") == 1
    assert run("gen", "gaussians", 0, 16, "--out", tmp_path / "g") == 1
    assert not (tmp_path / "g").exists()
    assert run("gen", "plasma", 4, 16, "--out", tmp_path / "g") == 1
    assert run("gen", "gaussians", 4, 16, "--set", "nonsense=1", "--out", tmp_path / "g") == 1
    assert run("gen", "gaussians", 4, 16, "--config", tmp_path / "missing.cfg", "--out", tmp_path / "g") == 1
    assert "usage error" in capsys.readouterr().err


def test_data_errors(tmp_path, workspace):
    assert run("train", "--data", tmp_path / "nowhere", "--steps", 1, "--out", tmp_path / "t") == 2
    assert run("eval", "--checkpoint", tmp_path / "nothing", "--data", workspace / "data", "--out", tmp_path / "e") == 2
    bad = tmp_path / "bad.phtk"
    raw = bytearray((workspace / "tok/tokens.phtk").read_bytes())
    raw[:4] = b"XXXX"
    bad.write_bytes(bytes(raw))
    assert run("detokenize", "--checkpoint", workspace / "run/final", "--tokens", bad, "--out", tmp_path / "d") == 2
    assert run("report", tmp_path / "missing", "--out", tmp_path / "r") == 2


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_numerical_failure(tmp_path, workspace):
    code = run("train", "--data", workspace / "data", "--steps", 30, "--batch-size", 2, "--lr", 1e30,
               "--set", "warmup_steps=0", *TINY, "--out", tmp_path / "t")
    assert code == 3


def test_detokenize_rejects_foreign_variant(tmp_path, workspace):
    assert run("train", "--data", workspace / "data", "--variant", "fsq", "--steps", 0, *TINY, "--out", tmp_path / "f") == 0
    code = run("detokenize", "--checkpoint", tmp_path / "f/final", "--tokens", workspace / "tok/tokens.phtk",
               "--out", tmp_path / "d")
    assert code == 2


def test_module_entry_point(tmp_path):
    r = subprocess.run([sys.executable, "-m", "phaedra", "gen", "sines", "2", "16", "--out", str(tmp_path / "g")],
                       capture_output=True, text=True)
    assert r.returncode == 0 and json.loads(r.stdout)["samples"] == 2


# ---------------------------------------------------------------- gen


def test_gen_outputs(workspace):
    ds = Dataset(workspace / "data")
    assert ds.manifest.count == 16 and ds.manifest.splits == {"train": [0, 12], "test": [12, 16]}
    s = compute_stats(ds.split("train"))
    assert abs(s.sigma_g - ds.stats.sigma_g) < 1e-12 and abs(s.mu - ds.stats.mu) < 1e-12
    snap = json.loads((workspace / "data/config.json").read_text())
    assert snap["command"] == "gen" and snap["seed"] == 3 and "out" not in snap


def test_gen_is_deterministic(tmp_path):
    for name in ("a", "b"):
        assert run("gen", "gaussians", 64, 64, "--seed", 7, "--out", tmp_path / name) == 0
    files = sorted(p.name for p in (tmp_path / "a").iterdir())
    assert files == sorted(p.name for p in (tmp_path / "b").iterdir())
    for f in files:
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_gen_config_overrides(tmp_path):
    (tmp_path / "g.cfg").write_text("lognormal_sigma = 0.0\n")
    assert run("gen", "quadrants", 4, 16, "--config", tmp_path / "g.cfg", "--out", tmp_path / "g") == 0
    x = Dataset(tmp_path / "g").split("train")
    assert np.abs(x).max() <= 1.0


# ---------------------------------------------------------------- train


def test_train_outputs(workspace):
    m = read_manifest(workspace / "run/final")
    assert m["step"] == 3 and m["config"]["base_channels"] == 8 and m["config"]["input_resolution"] == 16
    snap = json.loads((workspace / "run/config.json").read_text())
    assert snap["command"] == "train" and snap["model"]["variant"] == "phaedra" and snap["train"]["steps"] == 3
    assert len((workspace / "run/train_log.jsonl").read_text().splitlines()) == 3


def test_train_zero_steps_is_initialization(tmp_path, workspace):
    assert run("train", "--data", workspace / "data", "--steps", 0, "--seed", 5, *TINY, "--out", tmp_path / "t") == 0
    model, m = load_checkpoint(tmp_path / "t/final")
    init = build_model(ModelConfig.from_dict(m["config"]))
    assert m["config"]["seed"] == 5
    for a, b in zip(init.parameters(), model.parameters()):
        np.testing.assert_array_equal(a.data, b.data)


def test_variant_manifests_differ_only_in_bottleneck(tmp_path, workspace):
    for v in ("phaedra", "fsq"):
        assert run("train", "--data", workspace / "data", "--variant", v, "--steps", 0, *TINY, "--out", tmp_path / v) == 0
    a, b = read_manifest(tmp_path / "phaedra/final"), read_manifest(tmp_path / "fsq/final")
    outside = [{k: v for k, v in m["config"].items() if k != "variant"} for m in (a, b)]
    assert outside[0] == outside[1]
    pa = [p for p in a["parameters"] if not p["name"].startswith("bottleneck.")]
    pb = [p for p in b["parameters"] if not p["name"].startswith("bottleneck.")]
    assert pa == pb
    assert [p for p in a["parameters"] if p["name"].startswith("bottleneck.")] != [
        p for p in b["parameters"] if p["name"].startswith("bottleneck.")
    ]


def test_train_is_deterministic(tmp_path, workspace):
    for name in ("a", "b"):
        code = run("train", "--data", workspace / "data", "--steps", 2, "--batch-size", 2, "--deterministic", *TINY,
                   "--out", tmp_path / name)
        assert code == 0
    for f in ("final/params.f32", "final/ema.f32", "final/manifest.json", "train_log.jsonl", "config.json"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


# ---------------------------------------------------------------- tokenize / detokenize


def test_tokenize_shapes(workspace):
    grids = read_tokens(workspace / "tok/tokens.phtk")
    assert len(grids) == 2
    assert all(g.indices.shape == (4, 8, 8) for g in grids)


def test_desk_tokens_are_two_16x16_grids(tmp_path):
    assert run("gen", "sines", 2, 64, "--out", tmp_path / "d") == 0
    assert run("train", "--data", tmp_path / "d", "--steps", 0, "--batch-size", 1, "--out", tmp_path / "t") == 0
    assert run("tokenize", "--checkpoint", tmp_path / "t/final", "--data", tmp_path / "d", "--split", "train",
               "--out", tmp_path / "k") == 0
    grids = read_tokens(tmp_path / "k/tokens.phtk")
    assert [g.indices.shape for g in grids] == [(2, 16, 16), (2, 16, 16)]


def test_round_trip_matches_in_process(tmp_path, workspace):
    assert run("detokenize", "--checkpoint", workspace / "run/final", "--tokens", workspace / "tok/tokens.phtk",
               "--out", tmp_path / "rec") == 0
    rec = Dataset(tmp_path / "rec").read(0, 4)
    model, m = load_checkpoint(workspace / "run/final")
    stats = FieldStats(**m["stats"])
    truth = Dataset(workspace / "data").split("test")
    sample = encode_samples(model, truth, stats)
    expected = denormalize(model.decode(sample).astype(np.float32), stats)
    assert rec.tobytes() == expected.astype(np.float32).tobytes()


def test_tokenize_is_deterministic(tmp_path, workspace):
    assert run("tokenize", "--checkpoint", workspace / "run/final", "--data", workspace / "data", "--out", tmp_path / "k") == 0
    assert (tmp_path / "k/tokens.phtk").read_bytes() == (workspace / "tok/tokens.phtk").read_bytes()
    assert (tmp_path / "k/config.json").read_bytes() == (workspace / "tok/config.json").read_bytes()


# ---------------------------------------------------------------- eval


def test_eval_outputs(tmp_path, workspace):
    assert run("eval", "--checkpoint", workspace / "run/final", "--data", workspace / "data", "--out", tmp_path / "e") == 0
    d = json.loads((tmp_path / "e/metrics.json").read_text())
    rows = list(csv.DictReader(open(tmp_path / "e/metrics.csv")))
    assert len(rows) == 1
    header = next(csv.reader(open(tmp_path / "e/metrics.csv")))
    assert header[:4] == ["nMAE", "nRMSE", "delta_sigma2_loc", "gamma_min"]
    for k, v in rows[0].items():
        if v in ("", "True", "False"):
            continue
        assert float(v) == d[k], k
    assert d["model"] == "phaedra" and set(d["streams"]) == {"morphology", "amplitude"}
    assert d["utilization"] is not None
    spec = list(csv.DictReader(open(tmp_path / "e/spectrum.csv")))
    assert [int(r["k"]) for r in spec] == list(range(1, 9))
    assert run("eval", "--checkpoint", workspace / "run/final", "--data", workspace / "data", "--out", tmp_path / "e2") == 0
    for f in ("metrics.json", "metrics.csv", "spectrum.csv", "config.json"):
        assert (tmp_path / "e" / f).read_bytes() == (tmp_path / "e2" / f).read_bytes()


def test_eval_self_consistency(tmp_path, workspace):
    assert run("detokenize", "--checkpoint", workspace / "run/final", "--tokens", workspace / "tok/tokens.phtk",
               "--out", tmp_path / "rec") == 0
    assert run("eval", "--data", tmp_path / "rec", "--pred", tmp_path / "rec", "--split", "all", "--out", tmp_path / "e") == 0
    d = json.loads((tmp_path / "e/metrics.json").read_text())
    assert d["nMAE"] == 0 and d["nRMSE"] == 0 and d["gamma_min"] == pytest.approx(100.0)


def test_eval_continuous_has_no_token_stats(tmp_path, workspace):
    assert run("train", "--data", workspace / "data", "--variant", "continuous", "--steps", 1, "--batch-size", 2, *TINY,
               "--out", tmp_path / "c") == 0
    assert run("eval", "--checkpoint", tmp_path / "c/final", "--data", workspace / "data", "--out", tmp_path / "e") == 0
    d = json.loads((tmp_path / "e/metrics.json").read_text())
    assert d["streams"] == {} and d["utilization"] is None
    assert run("tokenize", "--checkpoint", tmp_path / "c/final", "--data", workspace / "data", "--out", tmp_path / "k") == 1


# ---------------------------------------------------------------- report


def eval_dir(tmp_path, workspace, name, label, dataset_label):
    code = run("eval", "--checkpoint", workspace / "run/final", "--data", workspace / "data", "--label", label,
               "--dataset-label", dataset_label, "--out", tmp_path / name)
    assert code == 0
    return tmp_path / name


def test_report_rows_and_figures(tmp_path, workspace):
    a = eval_dir(tmp_path, workspace, "a", "phaedra", "zeta")
    b = eval_dir(tmp_path, workspace, "b", "fsq", "alpha")
    c = eval_dir(tmp_path, workspace, "c", "phaedra", "alpha")
    assert run("report", a, "--out", tmp_path / "r1") == 0
    rows = list(csv.DictReader(open(tmp_path / "r1/report.csv")))
    assert len(rows) == 1 and rows[0]["model"] == "phaedra"
    assert float(rows[0]["nMAE"]) == json.loads((a / "metrics.json").read_text())["nMAE"]
    assert run("report", a, b, c, "--out", tmp_path / "r3") == 0
    rows = list(csv.DictReader(open(tmp_path / "r3/report.csv")))
    assert [(r["model"], r["dataset"]) for r in rows] == [("fsq", "alpha"), ("phaedra", "alpha"), ("phaedra", "zeta")]
    for f in ("metrics.png", "spectra.png", "spectra.csv", "config.json"):
        assert (tmp_path / "r3" / f).stat().st_size > 0
    assert (tmp_path / "r3/metrics.png").read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"


def test_report_schema_mismatch(tmp_path, workspace):
    a = eval_dir(tmp_path, workspace, "a", "phaedra", "x")
    d = json.loads((a / "metrics.json").read_text())
    d.pop("gamma_min")
    (tmp_path / "odd").mkdir()
    (tmp_path / "odd/metrics.json").write_text(json.dumps(d))
    assert run("report", a, tmp_path / "odd", "--out", tmp_path / "r") == 2


def test_report_spectrum_of_single_mode(tmp_path):
    field = gen_sines(None, 32, wavenumbers=[[5, 0]], coefficients=[[1.0, 0.0]]).data
    samples = np.repeat(field[None], 2, axis=0)
    write_dataset(tmp_path / "s", samples, 2, stats=FieldStats(0.0, 1.0))
    assert run("eval", "--data", tmp_path / "s", "--pred", tmp_path / "s", "--split", "all", "--out", tmp_path / "e") == 0
    assert run("report", tmp_path / "e", "--out", tmp_path / "r") == 0
    rows = list(csv.DictReader(open(tmp_path / "r/spectra.csv")))
    peak = max(rows, key=lambda r: float(r["E_true"]))
    assert int(peak["k"]) == 5
