import json
import subprocess
import sys

import numpy as np
import pytest

from gaborsense.cli import main
from gaborsense.harness import load_dataset, save_dataset
from gaborsense.metrics import universal_evasion, universal_sensitivity
from gaborsense.oracle import build_reference_model
from gaborsense.perturb import PerturbationField, read_gnp, write_gnp
from gaborsense.synthetic import make_synthetic_images


def _dataset(tmp_path, n=6, side=32, seed=3):
    path = str(tmp_path / "images.imb")
    save_dataset(path, make_synthetic_images(n, side, side, seed=seed))
    return path


def _gen_args(out, size="32", mode="sign"):
    return [
        "gen",
        "--sigma", "4.0",
        "--omega", "0.9",
        "--lambda", "6.0",
        "--size", size,
        "--kernel-size", "11",
        "--density", "2.0",
        "--epsilon", "12",
        "--mode", mode,
        "--seed", "21",
        "--out", out,
    ]


def _printed_value(capsys, key):
    lines = capsys.readouterr().out.splitlines()
    hits = [ln for ln in lines if ln.startswith(f"{key} = ")]
    assert hits, f"{key} not in output: {lines}"
    return hits[-1].split(" = ", 1)[1]


# -- gen / baseline -----------------------------------------------------------


def test_gen_writes_deterministic_gnp(tmp_path, capsys):
    a = str(tmp_path / "a.gnp")
    b = str(tmp_path / "b.gnp")
    assert main(_gen_args(a)) == 0
    assert float(_printed_value(capsys, "linf_norm")) == pytest.approx(12.0, abs=1e-6)
    assert main(_gen_args(b)) == 0
    assert (tmp_path / "a.gnp").read_bytes() == (tmp_path / "b.gnp").read_bytes()


def test_gen_scaled_mode_hits_budget(tmp_path, capsys):
    out = str(tmp_path / "a.gnp")
    assert main(_gen_args(out, mode="scaled")) == 0
    printed = float(_printed_value(capsys, "linf_norm"))
    assert printed <= 12.0 + 1e-6
    assert printed == pytest.approx(12.0, abs=1e-6)


def test_gen_rectangular_png_and_gnp(tmp_path):
    from PIL import Image

    png = str(tmp_path / "field.png")
    gnp = str(tmp_path / "field.gnp")
    args = _gen_args(png, size="48x32") + ["--out", gnp]
    assert main(args) == 0
    with Image.open(png) as im:
        assert im.size == (48, 32)
    field = read_gnp(gnp)
    assert field.values.shape == (32, 48, 3)


def test_gen_usage_errors(tmp_path):
    out = str(tmp_path / "a.gnp")
    assert main(["gen", "--sigma", "4", "--bogus-flag", "1"]) == 2
    assert main(["not-a-subcommand"]) == 2
    bad_sigma = _gen_args(out)
    bad_sigma[bad_sigma.index("--sigma") + 1] = "-1.0"
    assert main(bad_sigma) == 2
    bad_size = _gen_args(out, size="12x12x12")
    assert main(bad_size) == 2
    assert main(_gen_args(str(tmp_path / "a.bmp"))) == 2


def test_baseline_deterministic(tmp_path, capsys):
    a = str(tmp_path / "a.gnp")
    b = str(tmp_path / "b.gnp")
    args = ["baseline", "--size", "32", "--epsilon", "12", "--seed", "9", "--out"]
    assert main(args + [a]) == 0
    assert main(args + [b]) == 0
    assert (tmp_path / "a.gnp").read_bytes() == (tmp_path / "b.gnp").read_bytes()
    field = read_gnp(a)
    assert set(np.unique(np.abs(field.values))) == {np.float32(12.0)}


# -- eval ---------------------------------------------------------------------------


def test_eval_zero_perturbation_reports_zero(tmp_path, capsys):
    dataset = _dataset(tmp_path)
    pert = str(tmp_path / "zero.gnp")
    write_gnp(
        pert,
        PerturbationField(
            values=np.zeros((32, 32, 3), dtype=np.float32),
            epsilon=12.0,
            provenance={"kind": "zero"},
        ),
    )
    out = str(tmp_path / "eval.json")
    code = main(
        ["eval", "--perturbation", pert, "--dataset", dataset, "--out", out]
    )
    assert code == 0
    assert float(_printed_value(capsys, "universal_evasion")) == 0.0
    with open(out) as fh:
        payload = json.load(fh)
    assert payload["universal_sensitivity"] == 0.0
    assert payload["universal_evasion"] == 0.0
    assert payload["n_images"] == 6


def test_eval_matches_library_metrics(tmp_path, capsys):
    dataset = _dataset(tmp_path)
    pert_path = str(tmp_path / "p.gnp")
    assert main(_gen_args(pert_path)) == 0
    capsys.readouterr()
    assert main(["eval", "--perturbation", pert_path, "--dataset", dataset]) == 0
    printed_sens = float(_printed_value(capsys, "universal_sensitivity"))

    model = build_reference_model(0)
    images, _ = load_dataset(dataset)
    field = read_gnp(pert_path)
    assert printed_sens == universal_sensitivity(model, images, field)


def test_eval_missing_files_exit_4(tmp_path):
    dataset = _dataset(tmp_path)
    pert = str(tmp_path / "p.gnp")
    assert main(_gen_args(pert)) == 0
    assert main(["eval", "--perturbation", pert, "--dataset", str(tmp_path / "no.imb")]) == 4
    assert main(["eval", "--perturbation", str(tmp_path / "no.gnp"), "--dataset", dataset]) == 4


def test_eval_oracle_spawn_failure_exit_3(tmp_path):
    dataset = _dataset(tmp_path)
    pert = str(tmp_path / "p.gnp")
    assert main(_gen_args(pert)) == 0
    code = main(
        [
            "eval",
            "--perturbation", pert,
            "--dataset", dataset,
            "--oracle-cmd", "/nonexistent/oracle-binary",
        ]
    )
    assert code == 3


def test_eval_shape_mismatch_exit_2(tmp_path):
    dataset = _dataset(tmp_path)
    pert = str(tmp_path / "small.gnp")
    write_gnp(
        pert,
        PerturbationField(
            values=np.zeros((16, 16, 3), dtype=np.float32),
            epsilon=12.0,
            provenance={"kind": "zero"},
        ),
    )
    assert main(["eval", "--perturbation", pert, "--dataset", dataset]) == 2


# -- sweep / report --------------------------------------------------------------------


def _sweep_config(tmp_path, dataset, **extra):
    cfg = {
        "n_perturbations": 2,
        "dataset_path": dataset,
        "kernel_size": 11,
        "density": 2.0,
        "master_seed": 5,
        "mode": "sign",
        "out_dir": str(tmp_path / "sweep_out"),
    }
    cfg.update(extra)
    path = tmp_path / "config.json"
    path.write_text(json.dumps(cfg))
    return str(path)


def test_sweep_and_report_cli(tmp_path, capsys):
    dataset = _dataset(tmp_path)
    config = _sweep_config(tmp_path, dataset)
    assert main(["sweep", "--config", config]) == 0
    records_path = tmp_path / "sweep_out" / "records.csv"
    assert records_path.exists()
    assert len(records_path.read_text().splitlines()) == 1 + 4

    out = str(tmp_path / "rebuilt.json")
    assert main(["report", "--records", str(records_path), "--out", out]) == 0
    printed = capsys.readouterr().out
    assert "[builtin / gabor]" in printed
    assert "universal_evasion" in printed
    with open(out) as fh:
        rebuilt = json.load(fh)
    with open(tmp_path / "sweep_out" / "report.json") as fh:
        original = json.load(fh)
    assert rebuilt["tables"] == original["tables"]


def test_sweep_flag_overrides(tmp_path):
    dataset = _dataset(tmp_path)
    config = _sweep_config(tmp_path, dataset)
    out_dir = str(tmp_path / "override_out")
    code = main(
        [
            "sweep",
            "--config", config,
            "--n-perturbations", "3",
            "--out-dir", out_dir,
            "--no-random-baseline",
            "--jobs", "2",
        ]
    )
    assert code == 0
    lines = (tmp_path / "override_out" / "records.csv").read_text().splitlines()
    assert len(lines) == 1 + 3
    assert all(",gabor," in ln for ln in lines[1:])


def test_sweep_config_errors(tmp_path):
    dataset = _dataset(tmp_path)
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"dataset_path": dataset, "bogus": 1}))
    assert main(["sweep", "--config", str(bad)]) == 2
    assert main(["sweep", "--config", str(tmp_path / "missing.json")]) == 4


def test_report_quartiles_on_handcrafted_records(tmp_path, capsys):
    records = tmp_path / "records.csv"
    rows = ["id,kind,sigma,omega,lambda,seed,m_usens,m_uevas"]
    for i, v in enumerate([1.0, 2.0, 3.0, 4.0]):
        rows.append(f"{i},gabor,2.5,0.4,3.0,{i},{v / 10.0!r},{v!r}")
    records.write_text("\n".join(rows) + "\n")
    out = str(tmp_path / "report.json")
    assert main(["report", "--records", str(records), "--out", out]) == 0
    with open(out) as fh:
        report = json.load(fh)
    cell = report["tables"]["m"]["gabor"]["universal_evasion"]
    assert (cell["q1"], cell["q2"], cell["q3"]) == (1.75, 2.5, 3.25)
    assert cell["histogram"] is None  # values beyond the [0, 1] metric range
    scaled = report["tables"]["m"]["gabor"]["universal_sensitivity"]
    assert (scaled["q1"], scaled["q2"], scaled["q3"]) == pytest.approx(
        (0.175, 0.25, 0.325), abs=1e-12
    )
    assert sum(scaled["histogram"]) == 4


# -- svd --------------------------------------------------------------------------------


def test_svd_subcommand(tmp_path, capsys):
    dataset = _dataset(tmp_path, n=4)
    out = str(tmp_path / "sv.gnp")
    code = main(
        [
            "svd",
            "--layer", "logits",
            "--batch", "2",
            "--dataset", dataset,
            "--max-iter", "60",
            "--tol", "1e-6",
            "--out", out,
        ]
    )
    assert code == 0
    assert float(_printed_value(capsys, "singular_value")) > 0.0
    field = read_gnp(out)
    assert field.values.shape == (32, 32, 3)
    assert float(np.abs(field.values).max()) <= 12.0
    assert field.provenance["kind"] == "singular_vector"


def test_svd_bad_layer_exit_2(tmp_path):
    dataset = _dataset(tmp_path, n=2)
    code = main(
        ["svd", "--layer", "pre_conv", "--dataset", dataset, "--out", str(tmp_path / "x.gnp")]
    )
    assert code == 2


# -- entry points ----------------------------------------------------------------------


def test_help_exits_zero(capsys):
    assert main(["--help"]) == 0
    assert "gen" in capsys.readouterr().out
    for name in ("gen", "baseline", "eval", "sweep", "svd", "report"):
        assert main([name, "--help"]) == 0
        text = capsys.readouterr().out
        assert "--" in text


def test_module_entry_point(tmp_path):
    out = str(tmp_path / "m.gnp")
    proc = subprocess.run(
        [sys.executable, "-m", "gaborsense"] + _gen_args(out),
        capture_output=True,
        text=True,
    )
    assert proc.returncode == 0, proc.stderr
    assert "linf_norm = " in proc.stdout
