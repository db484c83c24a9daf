from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.interpolate import PchipInterpolator

from hsps.errors import ConfigError, RangeError
from hsps.utils import comment_lines, data_path, header_fields, setup_logging

logger = setup_logging()

GROUP_INDEX_STEP_UM = 1e-4  # central difference step for group_index
DEFAULT_SELLMEIER = "lithium_niobate_e.txt"

SELLMEIER_KEYS = ("a1", "a2", "a3", "a4", "a5", "a6", "b1", "b2", "b3", "b4", "t0", "t1")


def _scalar_or_array(values: np.ndarray) -> float | np.ndarray:
    return values if values.ndim else float(values)


@dataclass(frozen=True)
class SellmeierModel:
    """Temperature-dependent extraordinary-index Sellmeier form.

    n^2 = a1 + b1 f + (a2 + b2 f) / (l^2 - (a3 + b3 f)^2) + (a4 + b4 f) / (l^2 - a5^2) - a6 l^2
    with f = (T - t0)(T + t1), wavelength l in um and temperature T in degC.
    """

    coefficients: dict[str, float]
    valid_wavelength_range: tuple[float, float]
    valid_temperature_range: tuple[float, float]
    name: str = "sellmeier"
    source: str = ""

    def __post_init__(self):
        missing = [k for k in SELLMEIER_KEYS if k not in self.coefficients]
        if missing:
            raise ConfigError(f"Sellmeier model '{self.name}' is missing coefficients {missing}")

    @classmethod
    def constant(cls, index: float, name: str = "constant") -> "SellmeierModel":
        coefficients = {k: 0.0 for k in SELLMEIER_KEYS} | {"a1": index**2}
        return cls(coefficients, (1e-3, 1e3), (-273.15, 1e4), name=name)

    @classmethod
    def from_file(cls, path: str | Path | None = None) -> "SellmeierModel":
        path = Path(path) if path else data_path("sellmeier", DEFAULT_SELLMEIER)
        if not path.exists():
            path_in_data = data_path("sellmeier", str(path))
            if not path_in_data.exists():
                raise ConfigError(f"Sellmeier coefficient file not found: {path}")
            path = path_in_data
        header = header_fields(path)
        coefficients = {}
        for line in comment_lines(path):
            key, *value = line.split()
            if len(value) != 1:
                raise ConfigError(f"{path}: expected 'name value', got '{line}'")
            coefficients[key] = float(value[0])
        try:
            wl_range = tuple(float(v) for v in header["valid_wavelength_um"].split())
            t_range = tuple(float(v) for v in header["valid_temperature_c"].split())
        except KeyError as e:
            raise ConfigError(f"{path}: header is missing {e}") from e
        model = cls(coefficients, wl_range, t_range, name=path.stem, source=header.get("source", ""))
        logger.debug(f"Loaded Sellmeier model {model.name} (version {header.get('version', '?')})")
        return model

    def check_range(self, wavelength, temperature, margin: float = 0.0):
        wavelength = np.asarray(wavelength, dtype=float)
        lo, hi = self.valid_wavelength_range
        if np.any(wavelength - margin < lo):
            raise RangeError(
                f"wavelength {np.min(wavelength):.6g} um violates lower bound {lo} um of model '{self.name}'"
                + (f" (needs {margin} um margin)" if margin else "")
            )
        if np.any(wavelength + margin > hi):
            raise RangeError(
                f"wavelength {np.max(wavelength):.6g} um violates upper bound {hi} um of model '{self.name}'"
                + (f" (needs {margin} um margin)" if margin else "")
            )
        t_lo, t_hi = self.valid_temperature_range
        if not t_lo <= temperature <= t_hi:
            bound = "lower" if temperature < t_lo else "upper"
            raise RangeError(
                f"temperature {temperature} degC violates {bound} bound {t_lo if bound == 'lower' else t_hi} degC"
                f" of model '{self.name}'"
            )

    def _terms(self, wavelength: np.ndarray, temperature: float):
        c = self.coefficients
        f = (temperature - c["t0"]) * (temperature + c["t1"])
        pole_uv = c["a3"] + c["b3"] * f
        return f, wavelength**2, pole_uv

    def index_squared(self, wavelength: np.ndarray, temperature: float) -> np.ndarray:
        c = self.coefficients
        f, lam2, pole_uv = self._terms(wavelength, temperature)
        return (
            c["a1"]
            + c["b1"] * f
            + (c["a2"] + c["b2"] * f) / (lam2 - pole_uv**2)
            + (c["a4"] + c["b4"] * f) / (lam2 - c["a5"] ** 2)
            - c["a6"] * lam2
        )

    def dn_dwavelength(self, wavelength, temperature: float) -> float | np.ndarray:
        """Analytic dn/dl in 1/um."""
        self.check_range(wavelength, temperature)
        wavelength = np.asarray(wavelength, dtype=float)
        c = self.coefficients
        f, lam2, pole_uv = self._terms(wavelength, temperature)
        dn2 = (
            -2 * wavelength * (c["a2"] + c["b2"] * f) / (lam2 - pole_uv**2) ** 2
            - 2 * wavelength * (c["a4"] + c["b4"] * f) / (lam2 - c["a5"] ** 2) ** 2
            - 2 * wavelength * c["a6"]
        )
        n = np.sqrt(self.index_squared(wavelength, temperature))
        return _scalar_or_array(dn2 / (2 * n))


def refractive_index(model: SellmeierModel, wavelength, temperature: float) -> float | np.ndarray:
    model.check_range(wavelength, temperature)
    wavelength = np.asarray(wavelength, dtype=float)
    return _scalar_or_array(np.sqrt(model.index_squared(wavelength, temperature)))


def group_index(model: SellmeierModel, wavelength, temperature: float) -> float | np.ndarray:
    """n_g = n - l dn/dl with a central difference of GROUP_INDEX_STEP_UM."""
    h = GROUP_INDEX_STEP_UM
    model.check_range(wavelength, temperature, margin=h)
    wavelength = np.asarray(wavelength, dtype=float)
    n = np.sqrt(model.index_squared(wavelength, temperature))
    derivative = (
        np.sqrt(model.index_squared(wavelength + h, temperature))
        - np.sqrt(model.index_squared(wavelength - h, temperature))
    ) / (2 * h)
    return _scalar_or_array(n - wavelength * derivative)


@dataclass(eq=False)
class MaterialIndex:
    """Refractive index of a coating/waveguide material: a constant, a Sellmeier model or a table."""

    name: str
    constant: float | None = None
    sellmeier: SellmeierModel | None = None
    temperature: float = 25.0
    table: tuple[np.ndarray, np.ndarray] | None = None
    _interpolator: PchipInterpolator | None = field(default=None, init=False, repr=False)

    def __post_init__(self):
        kinds = [self.constant is not None, self.sellmeier is not None, self.table is not None]
        if sum(kinds) != 1:
            raise ConfigError(f"Material '{self.name}' needs exactly one of constant, Sellmeier model or table")
        if self.table is not None:
            wavelengths, indices = (np.asarray(v, dtype=float) for v in self.table)
            if len(wavelengths) < 2 or np.any(np.diff(wavelengths) <= 0):
                raise ConfigError(f"Material table '{self.name}' needs at least two strictly increasing wavelengths")
            self.table = (wavelengths, indices)
            self._interpolator = PchipInterpolator(wavelengths, indices, extrapolate=False)

    @property
    def wavelength_range(self) -> tuple[float, float]:
        if self.table is not None:
            return float(self.table[0][0]), float(self.table[0][-1])
        if self.sellmeier is not None:
            return self.sellmeier.valid_wavelength_range
        return 0.0, np.inf

    def index(self, wavelength_um) -> float | np.ndarray:
        wavelength = np.asarray(wavelength_um, dtype=float)
        if self.constant is not None:
            return _scalar_or_array(np.full(wavelength.shape, float(self.constant)))
        if self.sellmeier is not None:
            return refractive_index(self.sellmeier, wavelength, self.temperature)
        lo, hi = self.wavelength_range
        if np.any(wavelength < lo) or np.any(wavelength > hi):
            raise RangeError(
                f"wavelength {np.min(wavelength):.6g}-{np.max(wavelength):.6g} um outside the table range"
                f" [{lo}, {hi}] um of material '{self.name}'"
            )
        return _scalar_or_array(self._interpolator(wavelength))


def load_material(name: str | Path, temperature: float = 25.0) -> MaterialIndex:
    """Reads `data/materials/<name>.txt` (or an explicit path).

    A material file holds `constant <n>`, `sellmeier <coefficient file> [temperature]` or a two-column
    (wavelength_um, index) table.
    """
    path = Path(name)
    if not path.exists():
        path = data_path("materials", f"{name}.txt")
    if not path.exists():
        raise ConfigError(f"Unknown material '{name}'")
    lines = comment_lines(path)
    if not lines:
        raise ConfigError(f"Material file {path} is empty")
    first, *args = lines[0].split()
    if first == "constant":
        return MaterialIndex(path.stem, constant=float(args[0]))
    if first == "sellmeier":
        model = SellmeierModel.from_file(path.parent / args[0] if (path.parent / args[0]).exists() else args[0])
        return MaterialIndex(path.stem, sellmeier=model, temperature=float(args[1]) if len(args) > 1 else temperature)
    try:
        table = np.loadtxt(path, comments="#", ndmin=2)
    except ValueError as e:
        raise ConfigError(f"Material file {path}: {e}") from e
    return MaterialIndex(path.stem, table=(table[:, 0], table[:, 1]))
