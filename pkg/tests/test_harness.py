"""Configuration, cache, sweep orchestration, figure pipelines and method comparison."""
import csv
import json
import re

import numpy as np
import pytest

from qamdecay import spectral
from qamdecay.cache import MAGIC, Cache, cache_key
from qamdecay.config import (
    ExperimentConfig,
    code_version,
    dotted,
    from_dict,
    load_config,
    merge,
)
from qamdecay.exceptions import ConfigError, NoCommonPoints, UnknownFigure
from qamdecay.harness import (
    FIGURES,
    Run,
    compare_methods,
    csv_bytes,
    figure_config,
    integer_grid,
    island_setup,
    read_curve,
    run_figure,
    sweep,
)
from qamdecay.classical import MapParams
from qamdecay.quantum import PlanckSpec, build_circle_operator
from qamdecay.spectral import DECAY_COLUMNS, DecayCurve, DecayPoint


# ---------------------------------------------------------------------------
# config
# ---------------------------------------------------------------------------

def test_default_grid_is_sixty_points_over_4_20():
    g = ExperimentConfig().sweep.grid()
    assert len(g) == 60
    assert g[0] == 4.0 and g[-1] == pytest.approx(20.0)


def test_mode_caps_clip_basis_and_fill_wavepacket_defaults():
    ci = from_dict({"numerics": {"nu_sequence": [128, 256, 2048, 4096]}}).resolved()
    assert ci.numerics.nu_sequence == [128, 256, 2048]
    assert (ci.numerics.log2_size, ci.numerics.wavepacket_steps) == (14, 2000)
    desk = from_dict({"numerics": {"mode": "desk", "nu_sequence": [128, 4096, 8192]}}).resolved()
    assert desk.numerics.nu_sequence == [128, 4096]
    assert (desk.numerics.log2_size, desk.numerics.wavepacket_steps) == (17, 16000)


@pytest.mark.parametrize("bad", [
    {"nonsense": 1},
    {"map": {"kick": "big"}},
    {"map": {"sign": "sideways"}},
    {"methods": ["telepathy"]},
    {"sweep": {"points": 1.5}},
    {"numerics": {"mode": "cluster"}},
    {"cache": {"enabled": "yes"}},
    {"tolerances": {"compare_factor": 0.5}},
    {"chains": [{"s": 1}]},
])
def test_schema_rejects_malformed_configs(bad):
    with pytest.raises(ConfigError):
        from_dict(bad)


def test_single_basis_size_after_caps_is_an_error():
    with pytest.raises(ConfigError):
        from_dict({"numerics": {"nu_sequence": [128, 4096]}}).resolved()


def test_config_file_round_trip(tmp_path):
    cfg = from_dict({"map": {"kick": 0.8, "drift": 0.7}, "sweep": {"values": [6, 7]}})
    path = tmp_path / "c.json"
    path.write_text(json.dumps(cfg.to_dict()))
    again = load_config(path)
    assert again == cfg
    assert again.sweep.grid() == [6.0, 7.0]


def test_merge_and_dotted_keys():
    base = {"map": {"kick": 1.0, "drift": 0.5}}
    out = merge(base, dotted("map.kick", 2.0))
    assert out == {"map": {"kick": 2.0, "drift": 0.5}}
    assert base["map"]["kick"] == 1.0


def test_code_version_is_a_stable_sha256():
    v = code_version()
    assert re.fullmatch(r"[0-9a-f]{64}", v)
    assert v == code_version()


# ---------------------------------------------------------------------------
# cache
# ---------------------------------------------------------------------------

def test_cache_round_trip_and_layout(tmp_path):
    c = Cache(tmp_path)
    key = cache_key("x", 1.5)
    c.put(key, b"payload")
    assert c.get(key) == b"payload"
    blob = c.path(key).read_bytes()
    assert blob.startswith(MAGIC) and blob.endswith(b"payload")
    assert not list(tmp_path.rglob(".tmp-*"))


def test_flipped_bit_is_detected_and_recomputed(tmp_path):
    c = Cache(tmp_path)
    key = cache_key("value")
    assert c.json(key, lambda: {"a": 1.25}) == {"a": 1.25}
    path = c.path(key)
    raw = bytearray(path.read_bytes())
    raw[-2] ^= 0x01
    path.write_bytes(bytes(raw))
    calls = []
    assert c.json(key, lambda: calls.append(1) or {"a": 1.25}) == {"a": 1.25}
    assert calls == [1] and c.corrupt == 1
    assert c.get(key) is not None       # rewritten intact


def test_disabled_cache_never_stores(tmp_path):
    c = Cache(tmp_path / "c", enabled=False)
    key = cache_key("k")
    c.put(key, b"abc")
    assert c.get(key) is None
    assert not (tmp_path / "c").exists()


def test_matrix_and_array_entries(tmp_path):
    c = Cache(tmp_path)
    P, p = MapParams(2.5, 1.0), PlanckSpec(0.25, 4, 1)
    calls = []

    def build():
        calls.append(1)
        return build_circle_operator(P, p, 16)

    U1 = c.matrix("m" * 64, build)
    U2 = c.matrix("m" * 64, build)
    assert calls == [1]
    assert np.array_equal(U1.entries, U2.entries) and U2.kind == U1.kind
    arrs = {"z": np.array([1 + 2j, 3j]), "n": np.arange(5)}
    c.arrays("a" * 64, lambda: arrs)
    back = c.arrays("a" * 64, lambda: pytest.fail("should hit"))
    assert np.array_equal(back["z"], arrs["z"]) and np.array_equal(back["n"], arrs["n"])


def test_cache_key_depends_on_every_part():
    assert cache_key("a", 1.0) != cache_key("a", 1.0000000001)
    assert cache_key({"x": 1, "y": 2}) == cache_key({"y": 2, "x": 1})


# ---------------------------------------------------------------------------
# writers and curves
# ---------------------------------------------------------------------------

def test_csv_floats_round_trip_exactly():
    x = 0.1 + 0.2
    data = csv_bytes(("a", "b"), [(x, 3)]).decode().splitlines()
    assert data == ["a,b", f"{x!r},3"]
    assert float(data[1].split(",")[0]) == x


def _curve(gammas, method="m", xs=(4.0, 5.0, 6.0)):
    return DecayCurve([DecayPoint(x, x, int(x), 1, g, 0.0, method, 256.0, 0.9)
                       for x, g in zip(xs, gammas)])


def test_compare_identical_curves():
    rep = compare_methods([_curve([1e-6, 2e-6, 3e-6]), _curve([1e-6, 2e-6, 3e-6])])
    assert all(r["max_ratio"] == 1.0 for r in rep.rows)
    assert rep.summary["flagged"] == 0


def test_compare_flags_factor_three_offsets():
    a = _curve([1e-6, 2e-6, 3e-6], "a")
    b = _curve([3e-6, 6e-6, 9e-6], "b")
    rep = compare_methods([a, b], tolerance_factor=2.0)
    assert rep.summary["flagged"] == 3
    assert rep.summary["max_ratio"] == pytest.approx(3.0)
    assert rep.labels == ["a", "b"]


def test_compare_uses_only_common_points():
    a = _curve([1e-6, 2e-6, 3e-6], "a")
    b = _curve([1e-6, 5e-6], "b", xs=(4.0, 7.0))
    rep = compare_methods([a, b])
    assert [r["inv_hbar_snapped"] for r in rep.rows] == [4.0]


def test_compare_without_common_points():
    with pytest.raises(NoCommonPoints):
        compare_methods([_curve([1e-6], xs=(4.0,)), _curve([1e-6], xs=(5.0,))])
    with pytest.raises(ValueError):
        compare_methods([_curve([1e-6])])


def test_integer_grid():
    assert integer_grid([4.3, 5.0, 7.9]) == [5.0, 6.0, 7.0]


# ---------------------------------------------------------------------------
# sweeps: caching, determinism, parallelism
# ---------------------------------------------------------------------------

SMALL = {"map": {"kick": 2.5, "drift": 1.0}, "sweep": {"values": [4.0, 4.5, 5.0, 4.001]},
         "numerics": {"nu_sequence": [64, 128], "grid_step": 0.05, "area_horizon": 1000}}


def _sweep_bytes(tmp_path, sub, **over):
    cfg = from_dict(merge(SMALL, merge({"output_dir": str(tmp_path / "out"),
                                        "cache": {"directory": str(tmp_path / "cache")}},
                                       over)))
    run = Run(cfg, "sweep", subdir=sub)
    isl = island_setup(run)
    path = run.write_curve("curve_truncated.csv",
                           sweep(run, "truncated", run.config.sweep.grid(), isl))
    run.finish()
    return path.read_bytes(), run


def test_second_run_is_served_from_cache(tmp_path):
    first, _ = _sweep_bytes(tmp_path, "a")
    before = dict(spectral.SOLVE_COUNT)
    second, run = _sweep_bytes(tmp_path, "b")
    assert spectral.SOLVE_COUNT == before          # no eigensolves at all
    assert run.cache.misses == 0
    assert first == second


def test_cache_disabled_gives_identical_bytes(tmp_path):
    cached, _ = _sweep_bytes(tmp_path, "a")
    fresh, run = _sweep_bytes(tmp_path, "b", cache={"enabled": False})
    assert run.cache.hits == 0
    assert cached == fresh


def test_corrupt_point_entry_is_recomputed(tmp_path):
    first, _ = _sweep_bytes(tmp_path, "a")
    entries = sorted((tmp_path / "cache").rglob("*.bin"))
    for path in entries:
        raw = bytearray(path.read_bytes())
        raw[len(raw) // 2] ^= 0x10
        path.write_bytes(bytes(raw))
    again, run = _sweep_bytes(tmp_path, "b")
    assert run.cache.corrupt == len(entries)
    assert again == first


def test_parallel_workers_do_not_change_results(tmp_path):
    serial, _ = _sweep_bytes(tmp_path, "a", cache={"enabled": False})
    parallel, _ = _sweep_bytes(tmp_path, "b", cache={"enabled": False},
                               numerics={"workers": 2})
    assert serial == parallel


def test_sweep_rows_carry_snapped_values_sorted(tmp_path):
    data, _ = _sweep_bytes(tmp_path, "a")
    rows = list(csv.DictReader(data.decode().splitlines()))
    assert tuple(rows[0]) == DECAY_COLUMNS
    snapped = [float(r["inv_hbar_snapped"]) for r in rows]
    assert snapped == sorted(snapped)
    assert {(r["m"], r["n"]) for r in rows} == {("4", "1"), ("9", "2"), ("5", "1")}
    req = {float(r["inv_hbar_requested"]): float(r["inv_hbar_snapped"]) for r in rows}
    assert req[4.001] == 4.0
    assert all(float(r["gamma"]) > 0 for r in rows)


def test_read_curve_round_trip(tmp_path):
    data, run = _sweep_bytes(tmp_path, "a")
    curve = read_curve(run.out / "curve_truncated.csv")
    assert csv_bytes(DECAY_COLUMNS, curve.rows()) == data


def test_unsnappable_point_goes_to_the_sidecar_log(tmp_path):
    cfg = from_dict(merge(SMALL, {"output_dir": str(tmp_path), "sweep": {
        "values": [4.0, 4.0 + 1 / 33], "n_max": 2, "snap_tolerance": 1e-4},
        "cache": {"enabled": False}}))
    run = Run(cfg, "sweep")
    run.write_curve("c.csv", sweep(run, "truncated", cfg.sweep.grid(), island_setup(run)))
    run.finish()
    assert run.exit_code == 2
    assert len(run.failures) == 1
    assert "FAIL" in (run.out / "run.log").read_text()
    assert len((run.out / "c.csv").read_text().splitlines()) == 2


# ---------------------------------------------------------------------------
# figure pipelines
# ---------------------------------------------------------------------------

def test_unknown_figure_fails_before_any_work(tmp_path):
    with pytest.raises(UnknownFigure):
        run_figure("fig99", {"output_dir": str(tmp_path / "o")})
    assert not (tmp_path / "o").exists()


def test_figure_registry_parameter_sets():
    assert set(FIGURES) == {f"fig{k}" for k in range(3, 12)}
    assert (FIGURES["fig3"].kick, FIGURES["fig3"].drift) == (0.8, 0.7)
    assert (FIGURES["fig4"].kick, FIGURES["fig4"].drift) == (0.7, 0.5)
    assert (FIGURES["fig5"].kick, FIGURES["fig5"].drift) == (2.5, 1.0)
    assert FIGURES["fig7"].kick == pytest.approx(np.pi)
    assert (FIGURES["fig8"].kick, FIGURES["fig8"].drift) == (1.329, 0.5336)
    assert [c["r"] for c in FIGURES["fig8"].chains] == [6, 7]
    assert FIGURES["fig4"].chains[0]["reference"]["coupling"] == 4.376e-8


def test_figure_overrides_merge_into_defaults():
    cfg = figure_config("fig3", {"sweep": {"values": [6.0]}})
    assert (cfg.map.kick, cfg.map.drift) == (0.8, 0.7)
    assert cfg.sweep.grid() == [6.0]


@pytest.fixture(scope="module")
def fig6_run(tmp_path_factory):
    base = tmp_path_factory.mktemp("fig6")
    over = {"output_dir": str(base / "out"), "cache": {"directory": str(base / "cache")},
            "sweep": {"values": [8.0, 10.0, 14.0, 20.0]}}
    run = run_figure("fig6", over)
    return run, over


def test_theory_figure_files_and_metadata(fig6_run):
    run, _ = fig6_run
    assert run.exit_code == 0
    for name in ("portrait.csv", "curve_rat_unperturbed.csv", "curve_rat_continuum.csv",
                 "curve_rat_unperturbed_reference.csv", "xi0_comparison.csv", "metadata.json"):
        assert (run.out / name).exists(), name
    meta = json.loads((run.out / "metadata.json").read_text())
    assert meta["code_version"] == code_version()
    assert meta["config"]["map"] == {"kick": 2.5, "drift": 1.0, "sign": "minus"}
    (chain,) = meta["chains"]
    assert chain["source"] == "fitted"
    assert chain["reference_coupling"] == 7.275e-4 and chain["coupling"] > 0
    text = (run.out / "metadata.json").read_text()
    assert not re.search(r"\d{4}-\d{2}-\d{2}T", text)   # no timestamps outside run.log
    with open(run.out / "portrait.csv") as fh:
        assert next(csv.reader(fh)) == ["theta", "j", "label"]


def test_figure_rerun_is_byte_identical(fig6_run):
    run, over = fig6_run
    before = {f: (run.out / f).read_bytes() for f in run.files}
    again = run_figure("fig6", over)
    assert again.cache.misses == 0
    for f, data in before.items():
        assert (again.out / f).read_bytes() == data, f
