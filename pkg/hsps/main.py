import argparse
import logging
import sys
import traceback
from pathlib import Path

import numpy as np
import pandas as pd

from hsps import __version__
from hsps.beamoptics import efficiency_to_db, overlap_efficiency, total_loss, transmission
from hsps.errors import ConfigError, HspsError, NoPhasematchError, UndefinedMetricError
from hsps.pairsim import click_probabilities, power_sweep, simulate_stream
from hsps.qpm import (
    FUNDAMENTAL,
    calibrate_offset,
    combo_label,
    idler_from_signal,
    solve_period,
    solve_phasematch,
    spdc_spectrum,
)
from hsps.report import Report
from hsps.scenario import Scenario
from hsps.tagmetrics import count, metrics_frame
from hsps.tags import load_stream, save_stream
from hsps.thinfilm import (
    TransmissionSpectrum,
    convert_substrate,
    filtered_spectrum,
    load_stack,
    optimize_stack,
    spectrum,
    stack_transmission,
    write_stack,
)
from hsps.utils import data_path, setup_logging

logger = setup_logging()

SUBCOMMANDS = [
    "phasematch",
    "spectrum",
    "coupling",
    "budget",
    "coating",
    "optimize-coating",
    "simulate",
    "analyze",
    "sweep",
    "reproduce",
]
DEFAULT_SIGNAL_UM = 0.810


class HSPSApp:
    def __init__(self, scenario: Scenario, out_dir: Path, deterministic: bool = False):
        self.scenario = scenario
        seed = scenario.section("scenario").get("seed")
        self.report = Report(out_dir, scenario.name, scenario.hash, seed, deterministic)

    def run(self, command: str):
        logger.info(f"Running {command} for scenario '{self.scenario.name}' ({self.scenario.hash})")
        getattr(self, command.replace("-", "_"))()
        self.report.write_summary()

    def _process(self):
        """Process with the calibration applied when a measured peak is configured."""
        process, model = self.scenario.process(), self.scenario.sellmeier()
        measured = self.scenario.section("process").get("measured_peak_um")
        if measured is not None and self.scenario.section("spectrum").get("calibrate", True):
            offsets = calibrate_offset(measured, process, model, self.scenario.search_window())
            process = process.replace(mode_offsets=offsets)
        return process, model

    def phasematch(self):
        raw, model = self.scenario.process(), self.scenario.sellmeier()
        calibrated, _ = self._process()
        search = self.scenario.search_window()
        rows = []
        for combo in raw.combos:
            row = {"combo": combo_label(combo)}
            for name, process in [("signal_nm", raw), ("calibrated_signal_nm", calibrated)]:
                try:
                    row[name] = solve_phasematch(process, model, combo, search) * 1e3
                except NoPhasematchError as e:
                    logger.warning(str(e))
                    row[name] = np.nan
            row["idler_nm"] = idler_from_signal(raw.pump_wavelength * 1e3, row["calibrated_signal_nm"])
            rows.append(row)
        roots = pd.DataFrame(rows)
        target = self.scenario.section("process").get("measured_peak_um", DEFAULT_SIGNAL_UM)
        period = solve_period(raw.pump_wavelength, target, model, raw.temperature, raw.offsets(FUNDAMENTAL))
        design = pd.DataFrame([{"temperature_c": raw.temperature, "signal_nm": target * 1e3, "poling_period_um": period}])
        self.report.write_csv("phasematch.csv", roots, {"poling_period_um": raw.poling_period})
        self.report.write_csv("design_period.csv", design)
        self.report.add_table("Phasematching roots", roots)
        self.report.add_table("Poling period for the target signal", design)

    def _background(self):
        name = self.scenario.section("spectrum").get("background")
        if not name:
            return None
        table = np.loadtxt(self.scenario.resolve(name, "scenarios"), comments="#", delimiter=",", ndmin=2)
        return lambda wavelengths: np.interp(wavelengths, table[:, 0], table[:, 1], left=0.0, right=0.0)

    def spectrum(self):
        process, model = self._process()
        section = self.scenario.section("spectrum")
        lo, hi = self.scenario.search_window()
        grid = np.linspace(section.get("start_um", lo), section.get("stop_um", hi), section.get("points", 2001))
        bandwidth = self.scenario.section("process").get("pump_bandwidth_nm")
        output_filter = self.scenario.output_filter()
        peaks = []
        for temperature in section.get("temperatures_c", [process.temperature]):
            result = spdc_spectrum(
                process.replace(temperature=temperature),
                model,
                self.scenario.mode_weights(),
                grid,
                background=self._background(),
                pump_bandwidth_nm=bandwidth,
                search=(lo, hi),
            )
            self.report.write_csv(f"spectrum_{temperature:g}C.csv", result.to_frame(), {"temperature_c": temperature})
            peak, fwhm = result.peak_wavelength() * 1e3, result.fwhm() * 1e3
            row = {"temperature_c": temperature, "peak_nm": peak, "fwhm_nm": fwhm}
            if output_filter:
                stack, efficiency = output_filter
                filtered = filtered_spectrum(result, stack, efficiency)
                self.report.write_csv(
                    f"spectrum_filtered_{temperature:g}C.csv",
                    filtered.to_frame(),
                    {"temperature_c": temperature, "stack": stack.describe(), "path_efficiency": efficiency},
                )
                row["filtered_peak_nm"] = filtered.peak_wavelength() * 1e3
                row["filtered_max"] = float(filtered.intensities.max())
            peaks.append(row)
        self.report.add_table("SPDC spectrum peaks", pd.DataFrame(peaks))

    def coupling(self):
        rows = []
        for label, wavelength, waveguide, board in self.scenario.coupling_pairs():
            efficiency = overlap_efficiency(waveguide, board)
            loss = efficiency_to_db(efficiency)
            rows.append({"label": label, "wavelength_nm": wavelength, "efficiency": efficiency, "loss_db": loss})
        frame = pd.DataFrame(rows)
        self.report.write_csv("coupling.csv", frame)
        self.report.add_table("Mode overlap coupling", frame)

    def budget(self):
        entries, totals = [], []
        for name, budget in self.scenario.budgets().items():
            entries += [{"budget": name, "label": label, "loss_db": loss} for label, loss in budget.entries]
            totals.append(
                {
                    "budget": name,
                    "wavelength_nm": budget.wavelength_nm,
                    "total_db": total_loss(budget),
                    "transmission": transmission(budget),
                }
            )
            self.report.add_table(f"Loss budget {name}", budget.to_frame())
        self.report.write_csv("budget_entries.csv", pd.DataFrame(entries))
        self.report.write_csv("budget_totals.csv", pd.DataFrame(totals))
        self.report.add_table("Budget totals", pd.DataFrame(totals))

    def coating(self):
        section = self.scenario.section("coating")
        stack = self.scenario.stack()
        grid = np.linspace(section.get("start_nm", 400.0), section.get("stop_nm", 1700.0), section.get("points", 1301))
        result = spectrum(stack, grid)
        self.report.write_csv("coating.csv", result.to_frame(), {"stack": stack.describe()})
        coarse = result.to_frame().iloc[:: max(1, len(grid) // 10)]
        self.report.add_table("Coating transmission at selected wavelengths", coarse)
        if "measured" in section:
            measured = pd.read_csv(self.scenario.resolve(section["measured"], "stacks"), comment="#")
            try:
                wavelengths, values = measured["wavelength_nm"].to_numpy(), measured["transmission"].to_numpy()
            except KeyError as e:
                raise ConfigError(f"measured spectrum needs wavelength_nm and transmission columns, missing {e}") from e
            converted = convert_substrate(
                TransmissionSpectrum(wavelengths, values, 1 - values),
                self.scenario.media("measured_media"),
                self.scenario.media("target_media"),
            )
            self.report.write_csv("coating_converted.csv", converted.to_frame())

    def optimize_coating(self):
        section = self.scenario.section("optimize")
        seed_stack = self.scenario.resolve(self.scenario.require("optimize", "seed_stack"), "stacks")
        restarts = section.get("restarts", 0)
        result = optimize_stack(
            self.scenario.targets(),
            self.scenario.constraints(),
            load_stack(seed_stack),
            rng_seed=self.scenario.seed() if restarts else None,
            restarts=restarts,
        )
        output = self.report.path(section.get("output", "optimized.stack"))
        write_stack(result.stack, output, f"optimised from {seed_stack.name}, objective {result.objective:.3e}")
        self.report.written.append(output)
        achieved = [
            {
                "wavelength_nm": t.wavelength_nm,
                "kind": t.kind,
                "target": t.transmission,
                "achieved": stack_transmission(result.stack, t.wavelength_nm)[0],
            }
            for t in self.scenario.targets()
        ]
        trace = pd.DataFrame({"step": range(len(result.trace)), "objective": result.trace})
        self.report.write_csv("optimize_trace.csv", trace)
        self.report.write_csv("optimize_targets.csv", pd.DataFrame(achieved))
        self.report.add_table(f"Optimised coating ({len(result.stack.layers)} layers)", pd.DataFrame(achieved))

    def simulate(self):
        source, channel = self.scenario.source(), self.scenario.channel()
        section = self.scenario.section("simulate")
        pulses = self.scenario.require("simulate", "pulses")
        block_pulses = section.get("block_pulses", 1_000_000)
        stream = simulate_stream(source, channel, pulses, self.scenario.seed(), block_pulses, section.get("workers"))
        output = self.report.path(section.get("output", "stream.bin"))
        save_stream(stream, output)
        self.report.written.append(output)

        summary = count(stream, self.scenario.coincidence(source.repetition_rate_hz))
        probabilities = click_probabilities(source, channel).as_dict()
        frame = pd.DataFrame({"event": list(probabilities), "probability": list(probabilities.values())})
        frame["expected_counts"] = frame["probability"] * pulses
        frame["simulated_counts"] = [getattr(summary, event) for event in probabilities]
        self.report.write_csv("click_probabilities.csv", frame, {"mu": source.mean_pairs_per_pulse})
        self.report.add_table("Click probabilities per pulse", frame)

    def analyze(self):
        name = self.scenario.section("analyze").get("input")
        if name:
            path = self.scenario.resolve(name, "scenarios")
        else:
            path = self.report.out_dir / self.scenario.section("simulate").get("output", "stream.bin")
        stream = load_stream(path)
        summary = count(stream, self.scenario.coincidence(stream.repetition_rate_hz))
        has_channel = "channel" in self.scenario.data
        detector = self.scenario.channel().idler_detector_efficiency if has_channel else 1.0
        metrics = metrics_frame(summary, detector)
        self.report.write_csv("counts.csv", summary.to_frame(), {"duration_s": summary.duration_s})
        self.report.write_csv("metrics.csv", metrics, {"idler_detector_efficiency": detector})
        self.report.add_table("Counts", summary.to_frame())
        self.report.add_table("Estimators", metrics)
        undefined = metrics[metrics["value"].isna()]
        if not summary.empty and len(undefined):
            self.report.write_summary()
            raise UndefinedMetricError(f"undefined metrics for a non-empty stream: {list(undefined['metric'])}")

    def sweep(self):
        source = self.scenario.source(mu=0.0)  # mu is set per point
        section = self.scenario.section("sweep")
        frame = power_sweep(
            source,
            self.scenario.channel(),
            self.scenario.require("sweep", "pulses"),
            self.scenario.seed(),
            mus=section.get("mu"),
            powers=section.get("power"),
            kappa=section.get("kappa"),
            config=self.scenario.coincidence(source.repetition_rate_hz),
            workers=self.scenario.section("simulate").get("workers"),
        )
        self.report.write_csv("sweep.csv", frame)
        self.report.add_table("Sweep", frame)


def shipped_scenarios() -> list[Path]:
    return sorted(data_path("scenarios").glob("*.toml"))


def reproduce(args, overrides: list[str]) -> int:
    """Runs the `[scenario] steps` of the given scenario, or of every shipped one."""
    paths = [Path(args.scenario)] if args.scenario else shipped_scenarios()
    root = Path(args.out or "hsps_reproduce")
    for path in paths:
        scenario = Scenario.from_file(path, overrides)
        out_dir = root / scenario.name if len(paths) > 1 or not args.out else root
        app = HSPSApp(scenario, out_dir, args.deterministic)
        if not scenario.steps:
            raise ConfigError(f"scenario '{scenario.name}' lists no steps to reproduce")
        for step in scenario.steps:
            if step not in SUBCOMMANDS or step == "reproduce":
                raise ConfigError(f"scenario '{scenario.name}': unknown step '{step}'")
            logger.info(f"[{scenario.name}] step {step}")
            getattr(app, step.replace("-", "_"))()
        app.report.write_summary()
    return 0


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--scenario", type=str, help="Scenario TOML file (or the name of a shipped scenario)")
    common.add_argument("--set", action="append", default=[], metavar="K=V", help="Override section.key=value")
    common.add_argument("--out", type=str, help="Output directory", default=None)
    common.add_argument("--seed", type=int, help="Master seed, overrides scenario.seed", default=None)
    common.add_argument("--deterministic", action="store_true", help="Omit the timestamp from output headers")
    common.add_argument("--verbose", action="store_true", help="Debug logging")

    parser = argparse.ArgumentParser(prog="hsps", description="HSPS: heralded single-photon source toolkit")
    parser.add_argument("--version", action="version", version=f"hsps {__version__}")
    subparsers = parser.add_subparsers(dest="command", required=True)
    for command in SUBCOMMANDS:
        subparsers.add_parser(command, parents=[common])
    return parser


def run(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    if args.verbose:
        logging.getLogger().setLevel(logging.DEBUG)
    overrides = list(args.set) + ([f"scenario.seed={args.seed}"] if args.seed is not None else [])
    try:
        if args.command == "reproduce":
            return reproduce(args, overrides)
        if not args.scenario:
            raise ConfigError(f"'{args.command}' needs --scenario")
        scenario = Scenario.from_file(args.scenario, overrides)
        HSPSApp(scenario, scenario.output_dir(args.out), args.deterministic).run(args.command)
    except HspsError as e:
        logger.error(f"{type(e).__name__}: {e}")
        return e.exit_code
    except Exception as e:
        logger.error(f"Unexpected error: {e}")
        traceback.print_exc()
        return 1
    return 0


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
