"""Command-line interface and the estimator wrappers."""
import csv
import json
import subprocess
import sys

import numpy as np
import pytest

from qamdecay.classical import ResonanceChain, resonance_forward
from qamdecay.cli import COMMANDS, build_parser, main
from qamdecay.estimators import FloquetDecayEstimator, RATDecayModel, WKBDecayModel
from qamdecay.spectral import DECAY_COLUMNS

FAST = ["--grid-step", "0.05", "--set", "numerics.area_horizon=1000"]


@pytest.fixture
def out(tmp_path):
    return ["--out", str(tmp_path / "o"), "--cache-dir", str(tmp_path / "cache")]


def _rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def test_all_subcommands_are_registered():
    expected = {"portrait", "fixed-point", "island-area", "resonance-fit", "spectrum",
                "decay-sweep", "propagate", "wkb", "rat", "degeneracies", "figure", "compare"}
    assert set(COMMANDS) == expected
    sub = next(a for a in build_parser()._actions if a.dest == "command")
    assert set(sub.choices) == expected


def test_unknown_figure_exits_fatal_without_output(tmp_path, capsys):
    assert main(["figure", "fig42", "--out", str(tmp_path / "o")]) == 1
    assert "unknown figure" in capsys.readouterr().err
    assert not (tmp_path / "o").exists()


def test_bad_config_key_is_fatal(out):
    assert main(["fixed-point", "--set", "map.colour=red", *out]) == 1


def test_fixed_point(tmp_path, out, capsys):
    assert main(["fixed-point", "--kick", "2.5", "--drift", "1.0", *out]) == 0
    rec = json.loads(capsys.readouterr().out)
    assert rec["theta"] == pytest.approx(0.41151684606748806, abs=1e-12)
    assert rec["stable"] is True
    meta = json.loads((tmp_path / "o" / "fixed-point" / "metadata.json").read_text())
    assert meta["config"]["map"]["kick"] == 2.5 and len(meta["code_version"]) == 64


def test_portrait_columns(tmp_path, out):
    assert main(["portrait", "--orbit-steps", "20", "--seeds", "3", *out]) == 0
    rows = _rows(tmp_path / "o" / "portrait" / "portrait.csv")
    assert list(rows[0]) == ["theta", "j", "label"]
    assert len(rows) == 3 * 21
    assert {r["label"] for r in rows} == {"0", "1", "2"}


def test_degeneracies_reproduce_the_step_positions(tmp_path, out):
    args = ["degeneracies", "--r", "4", "--i-rs", "0.43", "--n-i", "1", "--area", "5.746"]
    assert main([*args, *out]) == 0
    rows = _rows(tmp_path / "o" / "degeneracies" / "degeneracies.csv")
    assert [round(float(r["inv_hbar"]), 2) for r in rows] == [8.14, 12.79, 17.44]


def test_resonance_fit_writes_flat_chain_json(tmp_path, out, capsys):
    sp, sm, tr = resonance_forward(0.43, 3.866, 7.275e-4, 4)
    args = ["resonance-fit", "--r", "4", "--s-plus", repr(sp), "--s-minus", repr(sm),
            "--trace", repr(tr)]
    assert main([*args, *out]) == 0
    rec = json.loads((tmp_path / "o" / "resonance-fit" / "resonance.json").read_text())
    assert all(not isinstance(v, (dict, list)) for v in rec.values())
    ch = ResonanceChain.from_dict(rec)
    assert ch.coupling == pytest.approx(7.275e-4, rel=1e-10)
    assert ch.mass == pytest.approx(3.866, rel=1e-10)


def test_resonance_fit_needs_all_three_numbers(out):
    assert main(["resonance-fit", "--r", "4", "--s-plus", "3.0", *out]) == 1


def test_wkb_partial_failure_exit_code(tmp_path, out, capsys):
    # the harmonic ground energy leaves the well at 1/hbar = 4 in this regime
    args = ["wkb", "--kick", "0.8", "--drift", "0.7", "--values", "4,6,8"]
    assert main([*args, *out]) == 2
    assert "failure" in capsys.readouterr().err
    base = tmp_path / "o" / "wkb"
    assert len(_rows(base / "curve_wkb_bottom.csv")) == 3
    ground = _rows(base / "curve_wkb_ground.csv")
    assert len(ground) == 2 and list(ground[0]) == list(DECAY_COLUMNS)
    assert "EnergyOutOfRange" in (base / "run.log").read_text()


def test_rat_with_chain_file(tmp_path, out):
    chain = tmp_path / "chain.json"
    chain.write_text(json.dumps(ResonanceChain(4, 1, 0.43, 3.866, 7.275e-4).to_dict()))
    args = ["rat", "--chain", str(chain), "--area", "5.746", "--values", "6,10,14",
            "--theory", "rat_unperturbed,rat_continuum", *FAST]
    assert main([*args, *out]) == 0
    rows = _rows(tmp_path / "o" / "rat" / "curve_rat_continuum.csv")
    g = [float(r["gamma"]) for r in rows]
    assert len(g) == 3 and g[0] > g[1] > g[2] > 0


def test_spectrum_of_one_operator_uses_the_matrix_cache(tmp_path, out):
    args = ["spectrum", "--basis", "32", "--hbar", "0.25"]
    assert main([*args, *out]) == 0
    first = (tmp_path / "o" / "spectrum" / "spectrum.csv").read_bytes()
    assert len(list((tmp_path / "cache").rglob("*.bin"))) == 1
    assert main([*args, *out]) == 0
    assert (tmp_path / "o" / "spectrum" / "spectrum.csv").read_bytes() == first
    rows = _rows(tmp_path / "o" / "spectrum" / "spectrum.csv")
    assert len(rows) == 65
    assert all(float(r["gamma"]) >= -1e-12 for r in rows)


def test_decay_sweep_and_compare(tmp_path, out, capsys):
    args = ["decay-sweep", "--values", "4", "--nu", "64,128", "--methods",
            "truncated,complex_scaling", *FAST]
    assert main([*args, *out]) == 0
    base = tmp_path / "o" / "decay-sweep"
    tr = _rows(base / "curve_truncated.csv")
    cs = _rows(base / "curve_complex_scaling.csv")
    assert float(tr[0]["gamma"]) == pytest.approx(float(cs[0]["gamma"]), rel=1e-3)
    capsys.readouterr()
    assert main(["compare", str(base / "curve_truncated.csv"),
                 str(base / "curve_complex_scaling.csv"), "--tolerance", "2", *out]) == 0
    summary = json.loads(capsys.readouterr().out)
    assert summary["points"] == 1 and summary["flagged"] == 0


def test_compare_without_common_points_is_fatal(tmp_path, out):
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    for path, x in ((a, 4.0), (b, 5.0)):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(DECAY_COLUMNS)
            w.writerow([x, x, int(x), 1, 1e-6, 0.0, "truncated", 256, 0.9])
    assert main(["compare", str(a), str(b), *out]) == 1


def test_config_file_and_flag_precedence(tmp_path, out, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"map": {"kick": 0.8, "drift": 0.7}}))
    assert main(["fixed-point", "--config", str(cfg), *out]) == 0
    th1 = json.loads(capsys.readouterr().out)["theta"]
    assert main(["fixed-point", "--config", str(cfg), "--kick", "2.5", "--drift", "1.0",
                 *out]) == 0
    th2 = json.loads(capsys.readouterr().out)["theta"]
    assert th1 != pytest.approx(th2)
    assert th2 == pytest.approx(0.41151684606748806)


def test_console_entry_point_runs(tmp_path):
    res = subprocess.run([sys.executable, "-m", "qamdecay.cli", "fixed-point", "--out",
                          str(tmp_path)], capture_output=True, text=True)
    assert res.returncode == 0 and "theta" in res.stdout


# ---------------------------------------------------------------------------
# estimators
# ---------------------------------------------------------------------------

def test_estimator_params_round_trip():
    m = WKBDecayModel(kick=0.8, drift=0.7)
    assert m.get_params() == {"kick": 0.8, "drift": 0.7, "sign": "minus",
                              "energy_choice": "well_bottom"}
    m.set_params(energy_choice="harmonic_ground")
    assert m.energy_choice == "harmonic_ground"
    with pytest.raises(ValueError):
        m.set_params(colour="red")


def test_predict_before_fit_raises():
    with pytest.raises(RuntimeError):
        WKBDecayModel().predict([6.0])


def test_wkb_model_matches_functional_core():
    from qamdecay.tunneling import wkb_rate
    m = WKBDecayModel(kick=0.8, drift=0.7).fit()
    g = m.predict([6.0, 9.0])
    p = m.pendulum_
    assert g == pytest.approx([wkb_rate(p, 1 / 6.0), wkb_rate(p, 1 / 9.0)], rel=1e-14)


def test_rat_model_with_given_chain_returns_nan_at_undefined_points():
    m = RATDecayModel(chain=ResonanceChain(4, 1, 0.43, 3.866, 7.275e-4), island_area=5.746,
                      method="rat_continuum").fit()
    g = m.predict(np.array([6.0, 10.0]))
    assert g.shape == (2,) and np.all(g > 0) and g[0] > g[1]


def test_floquet_estimator_predicts_island_rate():
    est = FloquetDecayEstimator(nu_sequence=(64, 128)).fit()
    (g,) = est.predict(4.0)
    assert 0 < g < 1e-5
