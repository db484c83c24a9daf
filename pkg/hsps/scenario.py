import hashlib
import math
import re
import tomllib
from dataclasses import dataclass, field
from pathlib import Path

from hsps.beamoptics import GaussianMode, LossBudget, load_budget
from hsps.dispersion import SellmeierModel, load_material
from hsps.errors import ConfigError
from hsps.pairsim import ChannelModel, SourceModel
from hsps.qpm import FUNDAMENTAL, QpmProcess
from hsps.tagmetrics import CoincidenceConfig
from hsps.tags import PS_PER_S
from hsps.thinfilm import FilterStack, StackConstraints, Target, load_stack
from hsps.utils import data_path, setup_logging

logger = setup_logging()

# Value kinds: "float" accepts integers, "floats"/"ints"/"strs" are arrays.
SCHEMA: dict[str, dict[str, str]] = {
    "scenario": {"name": "str", "description": "str", "seed": "int", "steps": "strs", "output": "str"},
    "dispersion": {"sellmeier": "str"},
    "process": {
        "pump_wavelength_um": "float",
        "poling_period_um": "float",
        "crystal_length_mm": "float",
        "temperature_c": "float",
        "search_um": "floats",
        "measured_peak_um": "float",
        "pump_bandwidth_nm": "float",
    },
    "modes": {
        "signal": "str",
        "idler": "str",
        "pump": "str",
        "dn_signal": "float",
        "dn_idler": "float",
        "dn_pump": "float",
        "weight": "float",
    },
    "spectrum": {
        "start_um": "float",
        "stop_um": "float",
        "points": "int",
        "temperatures_c": "floats",
        "background": "str",
        "calibrate": "bool",
        "stack": "str",
        "path_efficiency": "float",
    },
    "coupling": {"label": "str", "wavelength_nm": "float", "waveguide_mfd_um": "floats", "board_mfd_um": "floats"},
    "budget": {"files": "strs"},
    "coating": {
        "stack": "str",
        "start_nm": "float",
        "stop_nm": "float",
        "points": "int",
        "measured": "str",
        "measured_media": "strs",
        "target_media": "strs",
    },
    "optimize": {
        "seed_stack": "str",
        "max_layers": "int",
        "materials": "strs",
        "min_thickness_nm": "float",
        "max_thickness_nm": "float",
        "restarts": "int",
        "output": "str",
        "targets": "tables",
    },
    "targets": {"wavelength_nm": "float", "transmission": "float", "weight": "float", "kind": "str"},
    "source": {"mu": "float", "statistics": "str", "repetition_rate_hz": "float", "pulse_jitter_ps": "float"},
    "channel": {
        "signal_path": "floats",
        "idler_path": "floats",
        "splitter_ratio": "float",
        "detector_efficiencies": "floats",
        "dark_count_probs": "floats",
        "background_probs": "floats",
        "gate_ps": "float",
    },
    "coincidence": {
        "window_ps": "float",
        "delays_ps": "floats",
        "repetition_time_ps": "float",
        "shifts": "ints",
        "matching": "str",
    },
    "simulate": {"pulses": "int", "output": "str", "block_pulses": "int", "workers": "int"},
    "analyze": {"input": "str"},
    "sweep": {"mu": "floats", "power": "floats", "kappa": "float", "pulses": "int"},
}
TABLE_ARRAYS = {"modes", "coupling"}


def _is_number(value) -> bool:
    return isinstance(value, int | float) and not isinstance(value, bool)


def _matches(kind: str, value) -> bool:
    match kind:
        case "float":
            return _is_number(value)
        case "int":
            return isinstance(value, int) and not isinstance(value, bool)
        case "str":
            return isinstance(value, str)
        case "bool":
            return isinstance(value, bool)
        case "floats":
            return isinstance(value, list) and all(_is_number(v) for v in value)
        case "ints":
            return isinstance(value, list) and all(isinstance(v, int) and not isinstance(v, bool) for v in value)
        case "strs":
            return isinstance(value, list) and all(isinstance(v, str) for v in value)
        case "tables":
            return isinstance(value, list) and all(isinstance(v, dict) for v in value)
    return False


def _line_of(text: str, key: str) -> int | None:
    pattern = re.compile(rf"^\s*(\[\[?\s*)?[\w.]*\b{re.escape(key)}\b")
    for number, line in enumerate(text.splitlines(), start=1):
        if pattern.match(line):
            return number
    return None


def parse_override(assignment: str) -> tuple[list[str], object]:
    """`section.key=value` with the value read as a TOML literal, or as a bare string if that fails."""
    if "=" not in assignment:
        raise ConfigError(f"override '{assignment}' is not of the form section.key=value")
    key, raw = (part.strip() for part in assignment.split("=", 1))
    path = key.split(".")
    if len(path) < 2 or not all(path):
        raise ConfigError(f"override key '{key}' must name a section and a key")
    try:
        value = tomllib.loads(f"value = {raw}")["value"]
    except tomllib.TOMLDecodeError:
        value = raw
    return path, value


@dataclass
class Scenario:
    data: dict
    text: str = ""
    base_dir: Path = field(default_factory=Path.cwd)
    overrides: list[str] = field(default_factory=list)
    path: Path | None = None

    def __post_init__(self):
        for assignment in self.overrides:
            keys, value = parse_override(assignment)
            table = self.data
            for k in keys[:-1]:
                table = table.setdefault(k, {})
                if not isinstance(table, dict):
                    raise ConfigError(f"override '{assignment}' does not address a table")
            table[keys[-1]] = value
        self.validate()

    @classmethod
    def from_file(cls, path: str | Path, overrides: list[str] | None = None) -> "Scenario":
        path = Path(path)
        if not path.exists():
            shipped = data_path("scenarios", path.name if path.suffix else f"{path.name}.toml")
            if not shipped.exists():
                raise ConfigError(f"Scenario file not found: {path}")
            path = shipped
        text = path.read_text()
        try:
            data = tomllib.loads(text)
        except tomllib.TOMLDecodeError as e:
            raise ConfigError(f"{path}: {e}") from e
        logger.info(f"Loaded scenario {path}")
        return cls(data, text, path.parent, list(overrides or []), path)

    @classmethod
    def from_text(cls, text: str, base_dir: str | Path = ".", overrides: list[str] | None = None) -> "Scenario":
        try:
            data = tomllib.loads(text)
        except tomllib.TOMLDecodeError as e:
            raise ConfigError(str(e)) from e
        return cls(data, text, Path(base_dir), list(overrides or []))

    def _error(self, message: str, key: str) -> ConfigError:
        line = _line_of(self.text, key)
        where = f"{self.path or 'scenario'}" + (f", line {line}" if line else "")
        return ConfigError(f"{where}: {message}")

    def _validate_table(self, section: str, table: dict, prefix: str):
        schema = SCHEMA[section]
        for key, value in table.items():
            if key not in schema:
                raise self._error(f"unknown key '{prefix}.{key}'", key)
            kind = schema[key]
            if not _matches(kind, value):
                raise self._error(f"'{prefix}.{key}' must be of type {kind}, got {value!r}", key)
            if kind == "tables":
                for entry in value:
                    self._validate_table(key, entry, f"{prefix}.{key}")

    def validate(self):
        for section, content in self.data.items():
            if section not in SCHEMA or section == "targets":
                raise self._error(f"unknown section [{section}]", section)
            if section in TABLE_ARRAYS:
                if not _matches("tables", content):
                    raise self._error(f"[[{section}]] must be an array of tables", section)
                for entry in content:
                    self._validate_table(section, entry, section)
            elif not isinstance(content, dict):
                raise self._error(f"[{section}] must be a table", section)
            else:
                self._validate_table(section, content, section)

    @property
    def hash(self) -> str:
        digest = hashlib.sha256(self.text.encode())
        for assignment in sorted(self.overrides):
            digest.update(b"\n" + assignment.encode())
        return digest.hexdigest()[:16]

    @property
    def name(self) -> str:
        return self.section("scenario").get("name", self.path.stem if self.path else "scenario")

    @property
    def steps(self) -> list[str]:
        return self.section("scenario").get("steps", [])

    def section(self, name: str) -> dict:
        return self.data.get(name, {})

    def require(self, section: str, key: str):
        try:
            return self.data[section][key]
        except (KeyError, TypeError):
            raise ConfigError(f"{self.path or 'scenario'}: missing required key '{section}.{key}'") from None

    def seed(self) -> int:
        seed = self.section("scenario").get("seed")
        if seed is None:
            raise ConfigError(f"{self.path or 'scenario'}: stochastic operations need 'scenario.seed' (or --seed)")
        if seed < 0:
            raise ConfigError(f"seed must be non-negative, got {seed}")
        return seed

    def resolve(self, name: str, data_dir: str) -> Path:
        """Paths are relative to the scenario file; unknown names fall back to the shipped data directory."""
        path = Path(name)
        candidate = path if path.is_absolute() else self.base_dir / path
        if candidate.exists():
            return candidate
        shipped = data_path(data_dir, path.name)
        if shipped.exists():
            return shipped
        raise self._error(f"referenced file '{name}' does not exist", name)

    def output_dir(self, override: str | Path | None = None) -> Path:
        if override:
            return Path(override)
        output = self.section("scenario").get("output")
        return self.base_dir / output if output else Path("hsps_output") / self.name

    def sellmeier(self) -> SellmeierModel:
        name = self.section("dispersion").get("sellmeier")
        return SellmeierModel.from_file(self.resolve(name, "sellmeier") if name else None)

    def process(self) -> QpmProcess:
        section = self.section("process")
        offsets = {}
        for entry in self.section("modes"):
            combo = (entry.get("signal", "00"), entry.get("idler", "00"), entry.get("pump", "00"))
            if combo in offsets:
                raise self._error(f"mode combination {'/'.join(combo)} is listed twice", "modes")
            offsets[combo] = (entry.get("dn_signal", 0.0), entry.get("dn_idler", 0.0), entry.get("dn_pump", 0.0))
        offsets.setdefault(FUNDAMENTAL, (0.0, 0.0, 0.0))
        return QpmProcess(
            pump_wavelength=self.require("process", "pump_wavelength_um"),
            poling_period=self.require("process", "poling_period_um"),
            crystal_length=section.get("crystal_length_mm", 15.0),
            temperature=section.get("temperature_c", 25.0),
            mode_offsets=offsets,
        )

    def mode_weights(self) -> list[tuple[tuple[str, str, str], float]]:
        entries = self.section("modes")
        if not entries:
            return [(FUNDAMENTAL, 1.0)]
        return [
            ((e.get("signal", "00"), e.get("idler", "00"), e.get("pump", "00")), e.get("weight", 1.0)) for e in entries
        ]

    def search_window(self) -> tuple[float, float]:
        window = self.section("process").get("search_um", [0.6, 1.05])
        if len(window) != 2 or not window[0] < window[1]:
            raise self._error(f"search_um must be [low, high], got {window}", "search_um")
        return window[0], window[1]

    def coupling_pairs(self) -> list[tuple[str, float | None, GaussianMode, GaussianMode]]:
        pairs = []
        for entry in self.section("coupling"):
            modes = []
            for key in ("waveguide_mfd_um", "board_mfd_um"):
                mfd = entry.get(key)
                if not mfd or len(mfd) > 2:
                    raise self._error(f"coupling.{key} needs one (circular) or two (x, y) diameters", key)
                modes.append(GaussianMode(mfd[0], mfd[-1]))
            pairs.append((entry.get("label", ""), entry.get("wavelength_nm"), *modes))
        if not pairs:
            raise ConfigError(f"{self.path or 'scenario'}: no [[coupling]] entries")
        return pairs

    def budgets(self) -> dict[str, LossBudget]:
        files = self.require("budget", "files")
        return {Path(f).stem: load_budget(self.resolve(f, "budgets")) for f in files}

    def stack(self) -> FilterStack:
        return load_stack(self.resolve(self.require("coating", "stack"), "stacks"))

    def output_filter(self) -> tuple[FilterStack, float] | None:
        """Filter stack and lumped efficiency in front of the signal output, if the spectrum section names one."""
        section = self.section("spectrum")
        if "stack" not in section:
            return None
        efficiency = section.get("path_efficiency", 1.0)
        if not 0 < efficiency <= 1:
            raise self._error(f"spectrum.path_efficiency must lie in (0, 1], got {efficiency}", "path_efficiency")
        return load_stack(self.resolve(section["stack"], "stacks")), efficiency

    def media(self, key: str):
        names = self.require("coating", key)
        if len(names) != 2:
            raise self._error(f"coating.{key} must list the incident and exit media", key)
        return tuple(load_material(name) for name in names)

    def targets(self) -> list[Target]:
        entries = self.section("optimize").get("targets", [])
        targets = []
        for entry in entries:
            try:
                weight, kind = entry.get("weight", 1.0), entry.get("kind", "eq")
                targets.append(Target(entry["wavelength_nm"], entry["transmission"], weight, kind))
            except KeyError as e:
                raise self._error(f"optimize.targets entry is missing {e}", "targets") from e
        return targets

    def constraints(self) -> StackConstraints:
        section = self.section("optimize")
        return StackConstraints(
            max_layers=self.require("optimize", "max_layers"),
            materials=tuple(section.get("materials", [])),
            min_thickness_nm=section.get("min_thickness_nm", 0.0),
            max_thickness_nm=section.get("max_thickness_nm", 1000.0),
        )

    def source(self, mu: float | None = None) -> SourceModel:
        section = self.section("source")
        return SourceModel(
            mean_pairs_per_pulse=mu if mu is not None else self.require("source", "mu"),
            statistics=section.get("statistics", "thermal_single_mode"),
            repetition_rate_hz=section.get("repetition_rate_hz", 10e6),
            pulse_jitter_ps=section.get("pulse_jitter_ps", 50.0),
        )

    def channel(self) -> ChannelModel:
        """Path transmissions are products of the listed factors (module, filter, ...)."""
        section = self.section("channel")
        defaults = ChannelModel(1.0, 1.0)
        return ChannelModel(
            signal_transmission=math.prod(self.require("channel", "signal_path")),
            idler_transmission=math.prod(self.require("channel", "idler_path")),
            splitter_ratio=section.get("splitter_ratio", defaults.splitter_ratio),
            detector_efficiencies=tuple(section.get("detector_efficiencies", defaults.detector_efficiencies)),
            dark_count_probs=tuple(section.get("dark_count_probs", defaults.dark_count_probs)),
            background_probs=tuple(section.get("background_probs", defaults.background_probs)),
            gate_ps=section.get("gate_ps", defaults.gate_ps),
        )

    def coincidence(self, repetition_rate_hz: float | None = None) -> CoincidenceConfig:
        """The repetition time defaults to the period of `repetition_rate_hz` when given."""
        section = self.section("coincidence")
        repetition = PS_PER_S / repetition_rate_hz if repetition_rate_hz else CoincidenceConfig.repetition_time_ps
        return CoincidenceConfig(
            window_ps=section.get("window_ps", CoincidenceConfig.window_ps),
            delays_ps=tuple(section.get("delays_ps", CoincidenceConfig.delays_ps)),
            repetition_time_ps=section.get("repetition_time_ps", repetition),
            shifts=tuple(section.get("shifts", CoincidenceConfig.shifts)),
            matching=section.get("matching", CoincidenceConfig.matching),
        )
