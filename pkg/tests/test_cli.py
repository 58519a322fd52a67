import csv

import numpy as np
import pytest

from deepfpc import cli, network

SMALL_SIGNAL = ["--set", "n=20", "--set", "m=40", "--set", "k=2", "--set", "train_size=60",
                "--set", "test_size=20", "--set", "layers=2", "--set", "table1_layers=2",
                "--set", "epochs_per_stage=2", "--set", "batch_size=20"]
SMALL_DOA = ["--set", "sensors=6", "--set", "grid_size=30", "--set", "doas=-30,0,30",
             "--set", "runs=2", "--set", "snapshot_list=3,5", "--set", "train_size=40",
             "--set", "k_min=1", "--set", "k_max=3", "--set", "layers=2",
             "--set", "epochs_per_stage=2", "--set", "batch_size=20",
             "--set", "inner_iters=20", "--set", "outer_iters=2"]


def _rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def test_help_documents_desk_presets(capsys):
    with pytest.raises(SystemExit) as exc:
        cli.main(["--help"])
    assert exc.value.code == 0
    out = capsys.readouterr().out
    for token in ("N=100, M=200, K=5", "M=16 sensors", "J=50"):
        assert token in out


def test_train_then_recover_reproduces_logged_loss(tmp_path, capsys):
    model_path = str(tmp_path / "model.dfpc")
    assert cli.main(["train", "--out", model_path, *SMALL_SIGNAL]) == 0
    for suffix in (".log.csv", ".adam.npz", ".train_y.csv", ".train_x.csv", ".phi.csv"):
        assert (tmp_path / ("model.dfpc" + suffix)).exists()
    logged = float(_rows(model_path + ".log.csv")[-1]["loss"])
    capsys.readouterr()
    out = str(tmp_path / "rec.csv")
    assert cli.main(["recover", "--model", model_path, "--measurements",
                     model_path + ".train_y.csv", "--truth", model_path + ".train_x.csv",
                     "--out", out]) == 0
    printed = float(capsys.readouterr().out.split()[-1])
    assert printed == pytest.approx(logged, rel=1e-12)
    assert np.loadtxt(out, delimiter=",").shape == (60, 20)


def test_recover_with_fpc_needs_no_model(tmp_path):
    model_path = str(tmp_path / "model.dfpc")
    assert cli.main(["train", "--out", model_path, *SMALL_SIGNAL]) == 0
    out = str(tmp_path / "fpc.csv")
    code = cli.main(["recover", "--phi", model_path + ".phi.csv", "--measurements",
                     model_path + ".train_y.csv", "--set", "outer_iters=2", "--out", out])
    assert code == 0
    rec = np.loadtxt(out, delimiter=",")
    np.testing.assert_allclose(np.linalg.norm(rec, axis=1), 1.0, atol=1e-12)


def test_recover_scenario_writes_spectrum(tmp_path, capsys):
    scen = tmp_path / "s.txt"
    scen.write_text("sensors = 8\ngrid_size = 45\ndoas = -20, 28\nsnapshots = 3\nsnr_db = 20\n")
    out = str(tmp_path / "spec.csv")
    assert cli.main(["recover", "--scenario", str(scen), "--set", "outer_iters=3",
                     "--out", out]) == 0
    rows = _rows(out)
    assert len(rows) == 45 and list(rows[0]) == ["angle", "power"]
    assert "estimated DOAs" in capsys.readouterr().out


def test_malformed_scenario_is_a_config_error(tmp_path, capsys):
    scen = tmp_path / "bad.txt"
    scen.write_text("sensors = 8\nthis is not valid\n")
    code = cli.main(["recover", "--scenario", str(scen), "--out", str(tmp_path / "o.csv")])
    assert code == cli.EXIT_CONFIG
    assert "line 2" in capsys.readouterr().err


def test_malformed_measurements_csv(tmp_path, capsys):
    bad = tmp_path / "y.csv"
    bad.write_text("1,-1,1\n1,x,1\n")
    phi = tmp_path / "phi.csv"
    phi.write_text("1,0\n0,1\n1,1\n")
    code = cli.main(["recover", "--phi", str(phi), "--measurements", str(bad),
                     "--out", str(tmp_path / "o.csv")])
    assert code == cli.EXIT_CONFIG
    assert "y.csv:2" in capsys.readouterr().err


def test_missing_model_exit_code(tmp_path):
    code = cli.main(["recover", "--model", str(tmp_path / "nope.dfpc"), "--measurements",
                     str(tmp_path / "y.csv"), "--out", str(tmp_path / "o.csv")])
    assert code == cli.EXIT_MISSING_MODEL
    code = cli.main(["fig3", "--set", f"model_final={tmp_path / 'nope.dfpc'}", *SMALL_SIGNAL])
    assert code == cli.EXIT_MISSING_MODEL


def test_unknown_key_and_bad_value(tmp_path):
    assert cli.main(["fig3", "--set", "lyers=3"]) == cli.EXIT_CONFIG
    assert cli.main(["fig3", "--set", "layers=three"]) == cli.EXIT_CONFIG
    cfg = tmp_path / "c.txt"
    cfg.write_text("layers = 2\nnonsense\n")
    assert cli.main(["fig3", "--config", str(cfg)]) == cli.EXIT_CONFIG


def test_numeric_failure_exit_code(tmp_path):
    y = tmp_path / "y.csv"
    y.write_text("1,1\n")
    phi = tmp_path / "phi.csv"
    phi.write_text("1,0\n0,1\n")
    # huge tau/lambda ratio shrinks every iterate to zero
    code = cli.main(["recover", "--phi", str(phi), "--measurements", str(y), "--set", "tau=5",
                     "--set", "lambda0=0.001", "--set", "outer_iters=1",
                     "--out", str(tmp_path / "o.csv")])
    assert code == cli.EXIT_NUMERIC


def test_config_file_precedence(tmp_path):
    cfg = tmp_path / "c.txt"
    cfg.write_text("# desk overrides\nlayers = 5\nk = 2\n")
    args = cli.build_parser().parse_args(["fig3", "--config", str(cfg), "--set", "layers=3"])
    spec = cli._spec(args, "fig3_nmse_vs_layers")
    preset = spec.signal_preset()
    assert preset.layers == 3 and preset.k == 2


def test_fig3_is_deterministic(tmp_path):
    a, b = str(tmp_path / "a.csv"), str(tmp_path / "b.csv")
    assert cli.main(["fig3", "--out", a, *SMALL_SIGNAL]) == 0
    assert cli.main(["fig3", "--out", b, *SMALL_SIGNAL]) == 0
    assert open(a).read() == open(b).read()
    rows = _rows(a)
    assert {r["method"] for r in rows} == {"fpc_l1", "deepfpc_final_norm",
                                           "deepfpc_per_layer_norm"}
    assert (tmp_path / "a.csv.meta.json").exists()


def test_table1_saves_loadable_models(tmp_path):
    out = str(tmp_path / "t.csv")
    assert cli.main(["table1", "--out", out, "--save-models", str(tmp_path / "m"),
                     *SMALL_SIGNAL]) == 0
    for mode in network.TYING_MODES:
        model = network.load_model(tmp_path / "m" / f"{mode}.dfpc")
        assert model.tying == mode
        assert network.to_bytes(network.from_bytes(network.to_bytes(model))) == \
            network.to_bytes(model)
    assert len(_rows(out)) == 3


def test_fig4_and_fig6_small(tmp_path):
    out4, out6 = str(tmp_path / "f4.csv"), str(tmp_path / "f6.csv")
    assert cli.main(["fig4", "--out", out4, "--set", "panels=d", *SMALL_DOA]) == 0
    rows = _rows(out4)
    assert {r["method"] for r in rows} == {"fpc_l1", "deepfpc", "music_1bit"}
    assert {r["sweep_value"] for r in rows} == {"3", "5"}
    assert cli.main(["fig6", "--out", out6, *SMALL_DOA]) == 0
    assert {r["condition"] for r in _rows(out6)} == {"grid=uniform", "grid=orthogonal"}


def test_fig4_uses_pretrained_model(tmp_path):
    model_path = str(tmp_path / "doa.dfpc")
    assert cli.main(["train", "--kind", "doa", "--out", model_path, *SMALL_DOA]) == 0
    assert (tmp_path / "doa.dfpc.scenario.txt").exists()
    out = str(tmp_path / "f4.csv")
    assert cli.main(["fig4", "--out", out, "--set", "panels=d",
                     "--set", f"model_uniform={model_path}", *SMALL_DOA]) == 0


def test_panel_subset_reproduces_full_run(tmp_path):
    full, part = str(tmp_path / "full.csv"), str(tmp_path / "part.csv")
    base = [*SMALL_DOA, "--set", "snr_list=0,20"]
    assert cli.main(["fig4", "--out", full, "--set", "panels=c,d", *base]) == 0
    assert cli.main(["fig4", "--out", part, "--set", "panels=d", *base]) == 0
    d_rows = [r for r in _rows(full) if r["condition"] == "snr_db=20"]
    assert d_rows == _rows(part)
