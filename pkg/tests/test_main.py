import pytest

from hsps.main import build_parser, run
from hsps.report import read_csv

SMALL_SCENARIO = """
[scenario]
name = "small"
seed = 7
steps = ["simulate", "analyze"]

[source]
mu = {mu}

[channel]
signal_path = [0.5]
idler_path = [0.6]
detector_efficiencies = [0.9, 0.8, 0.8]

[simulate]
pulses = 200_000
"""


@pytest.fixture
def small(tmp_path):
    path = tmp_path / "small.toml"
    path.write_text(SMALL_SCENARIO.format(mu=0.1))
    return path


def test_coupling(tmp_path):
    assert run(["coupling", "--scenario", "filtered", "--out", str(tmp_path), "--deterministic"]) == 0
    frame = read_csv(tmp_path / "coupling.csv")
    assert list(frame["efficiency"]) == pytest.approx([0.946, 0.872], abs=1e-3)
    assert (tmp_path / "summary.txt").exists()


def test_output_headers(tmp_path):
    run(["budget", "--scenario", "filtered", "--out", str(tmp_path), "--deterministic"])
    header = [line for line in (tmp_path / "budget_totals.csv").read_text().splitlines() if line.startswith("#")]
    assert header[0].startswith("# tool: hsps")
    assert "# scenario: filtered" in header
    assert any(line.startswith("# scenario_hash: ") for line in header)
    assert not any(line.startswith("# created") for line in header)
    totals = read_csv(tmp_path / "budget_totals.csv").set_index("budget")["total_db"]
    assert totals["module_810"] == pytest.approx(4.2)


def test_phasematch_and_spectrum(tmp_path):
    assert run(["phasematch", "--scenario", "filtered", "--out", str(tmp_path)]) == 0
    roots = read_csv(tmp_path / "phasematch.csv").set_index("combo")
    assert roots.loc["00/00/00", "calibrated_signal_nm"] == pytest.approx(810.0, abs=1e-3)
    assert roots.loc["00/00/00", "signal_nm"] == pytest.approx(855.33, abs=0.01)
    assert 6.3 <= read_csv(tmp_path / "design_period.csv")["poling_period_um"].iloc[0] <= 7.6

    assert run(["spectrum", "--scenario", "filtered", "--out", str(tmp_path)]) == 0
    spectrum = read_csv(tmp_path / "spectrum_80C.csv")
    assert spectrum["wavelength_nm"].iloc[spectrum["relative_intensity"].idxmax()] == pytest.approx(810, abs=1)
    hot = read_csv(tmp_path / "spectrum_100C.csv")
    assert hot["wavelength_nm"].iloc[hot["relative_intensity"].idxmax()] < 810

    filtered = read_csv(tmp_path / "spectrum_filtered_80C.csv")
    assert filtered["wavelength_nm"].iloc[filtered["relative_intensity"].idxmax()] == pytest.approx(810, abs=1)
    assert 0.3 < filtered["relative_intensity"].max() <= 0.42 + 1e-9
    assert (filtered["relative_intensity"] <= 0.42 * spectrum["relative_intensity"] + 1e-9).all()


def test_coating(tmp_path):
    assert run(["coating", "--scenario", "filtered", "--out", str(tmp_path)]) == 0
    frame = read_csv(tmp_path / "coating.csv")
    assert (frame["transmission"] + frame["reflection"]).round(9).eq(1.0).all()


def test_simulate_then_analyze(small, tmp_path):
    out = str(tmp_path / "run")
    assert run(["simulate", "--scenario", str(small), "--out", out]) == 0
    assert run(["analyze", "--scenario", str(small), "--out", out]) == 0
    metrics = read_csv(tmp_path / "run" / "metrics.csv").set_index("metric")["value"]
    assert 0 < metrics["eta_h"] <= 1
    assert metrics["CAR_rep_1"] > 1
    probabilities = read_csv(tmp_path / "run" / "click_probabilities.csv").set_index("event")
    assert probabilities.loc["s", "simulated_counts"] == pytest.approx(probabilities.loc["s", "expected_counts"], rel=0.05)


def test_deterministic_runs_are_identical(small, tmp_path):
    for name in ["a", "b"]:
        assert run(["reproduce", "--scenario", str(small), "--out", str(tmp_path / name), "--deterministic"]) == 0
    for output in ["stream.bin", "metrics.csv", "counts.csv", "summary.txt"]:
        assert (tmp_path / "a" / output).read_bytes() == (tmp_path / "b" / output).read_bytes()


def test_seed_flag_changes_stream(small, tmp_path):
    run(["simulate", "--scenario", str(small), "--out", str(tmp_path / "a"), "--deterministic"])
    run(["simulate", "--scenario", str(small), "--out", str(tmp_path / "b"), "--deterministic", "--seed", "8"])
    assert (tmp_path / "a" / "stream.bin").read_bytes() != (tmp_path / "b" / "stream.bin").read_bytes()


def test_empty_stream_analysis_succeeds(tmp_path):
    path = tmp_path / "dark.toml"
    path.write_text(SMALL_SCENARIO.format(mu=0.0))
    assert run(["reproduce", "--scenario", str(path), "--out", str(tmp_path / "out")]) == 0
    counts = read_csv(tmp_path / "out" / "counts.csv")
    assert counts["counts"].sum() == 0


def test_sweep(small, tmp_path):
    overrides = ["--set", "sweep.mu=[0.01, 0.1]", "--set", "sweep.pulses=100000"]
    assert run(["sweep", "--scenario", str(small), "--out", str(tmp_path), *overrides]) == 0
    frame = read_csv(tmp_path / "sweep.csv")
    assert list(frame["mu"]) == [0.01, 0.1]
    assert {"eta_h", "g2_h", "CAR_rep_1", "CAR_rep_2", "eta_h_model"} <= set(frame.columns)


@pytest.mark.parametrize(
    "argv, code",
    [
        (["coupling"], 2),
        (["coupling", "--scenario", "no_such_scenario"], 2),
        (["coupling", "--scenario", "filtered", "--set", "process.bogus=1"], 2),
        (["simulate", "--scenario", "filtered", "--set", "simulate.pulses=0"], 2),
        (["phasematch", "--scenario", "filtered", "--set", "process.poling_period_um=3.0"], 3),
    ],
)
def test_exit_codes(argv, code, tmp_path):
    assert run([*argv, "--out", str(tmp_path)]) == code


def test_unknown_subcommand_and_version(capsys):
    with pytest.raises(SystemExit) as info:
        build_parser().parse_args(["transmogrify"])
    assert info.value.code == 2
    with pytest.raises(SystemExit) as info:
        build_parser().parse_args(["--version"])
    assert info.value.code == 0
    assert "hsps" in capsys.readouterr().out


@pytest.mark.slow
def test_optimize_coating(tmp_path):
    assert run(["optimize-coating", "--scenario", "filtered", "--out", str(tmp_path)]) == 0
    assert (tmp_path / "output_coating.stack").exists()
    trace = read_csv(tmp_path / "optimize_trace.csv")["objective"]
    assert trace.is_monotonic_decreasing
    assert len(read_csv(tmp_path / "optimize_targets.csv")) == 3
