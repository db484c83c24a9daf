import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd
from scipy.optimize import minimize, minimize_scalar

from hsps.dispersion import MaterialIndex, load_material
from hsps.errors import ConfigError, DomainError, NumericalDegeneracyError
from hsps.qpm import SpdcSpectrum
from hsps.utils import comment_lines, data_path, header_fields, setup_logging

logger = setup_logging()

MAX_LAYER_THICKNESS_NM = 10_000.0
ENVELOPE_FLOOR = 1e-6
QUARTER_WAVE_TOKEN = re.compile(r"^([0-9.]+)qw$")

Medium = MaterialIndex | float


@dataclass(frozen=True)
class Layer:
    material: MaterialIndex
    thickness_nm: float

    def __post_init__(self):
        if not 0 <= self.thickness_nm < MAX_LAYER_THICKNESS_NM:
            raise ConfigError(
                f"layer thickness {self.thickness_nm} nm of {self.material.name} outside [0, {MAX_LAYER_THICKNESS_NM})"
            )


@dataclass
class FilterStack:
    """Layers listed from the incident side towards the exit medium."""

    incident: MaterialIndex
    exit: MaterialIndex
    layers: list[Layer] = field(default_factory=list)
    reference_wavelength_nm: float | None = None

    @property
    def thicknesses(self) -> np.ndarray:
        return np.array([layer.thickness_nm for layer in self.layers], dtype=float)

    def with_thicknesses(self, thicknesses) -> "FilterStack":
        layers = [Layer(layer.material, float(d)) for layer, d in zip(self.layers, thicknesses, strict=True)]
        return FilterStack(self.incident, self.exit, layers, self.reference_wavelength_nm)

    def reversed(self) -> "FilterStack":
        return FilterStack(self.exit, self.incident, self.layers[::-1], self.reference_wavelength_nm)

    def describe(self) -> str:
        names = " ".join(f"{layer.material.name}:{layer.thickness_nm:.1f}" for layer in self.layers)
        return f"{self.incident.name} | {names or '-'} | {self.exit.name}"


@dataclass
class TransmissionSpectrum:
    wavelengths_nm: np.ndarray
    transmission: np.ndarray
    reflection: np.ndarray

    def __post_init__(self):
        self.wavelengths_nm = np.asarray(self.wavelengths_nm, dtype=float)
        self.transmission = np.asarray(self.transmission, dtype=float)
        self.reflection = np.asarray(self.reflection, dtype=float)
        if np.any(np.diff(self.wavelengths_nm) <= 0):
            raise DomainError("transmission spectrum wavelengths must be strictly increasing")

    def peak_wavelength(self) -> float:
        return float(self.wavelengths_nm[np.argmax(self.transmission)])

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            {"wavelength_nm": self.wavelengths_nm, "transmission": self.transmission, "reflection": self.reflection}
        )


def _medium_index(medium: Medium, wavelengths_nm: np.ndarray) -> np.ndarray:
    if isinstance(medium, MaterialIndex):
        return np.broadcast_to(np.asarray(medium.index(wavelengths_nm / 1e3), dtype=float), wavelengths_nm.shape)
    return np.full(wavelengths_nm.shape, float(medium))


def _layer_indices(stack: FilterStack, wavelengths_nm: np.ndarray) -> np.ndarray:
    """(n_layers, n_wavelengths) index table."""
    if not stack.layers:
        return np.empty((0, len(wavelengths_nm)))
    return np.stack([_medium_index(layer.material, wavelengths_nm) for layer in stack.layers])


def _transfer(n_in, n_out, layer_indices, thicknesses, wavelengths_nm):
    """Characteristic-matrix product for a batch of thickness vectors.

    thicknesses has shape (..., n_layers); returns (T, R) with shape (..., n_wavelengths).
    """
    thicknesses = np.asarray(thicknesses, dtype=float)
    batch = thicknesses.shape[:-1] + wavelengths_nm.shape
    m11 = np.ones(batch, dtype=complex)
    m12 = np.zeros(batch, dtype=complex)
    m21 = np.zeros(batch, dtype=complex)
    m22 = np.ones(batch, dtype=complex)
    for j in range(layer_indices.shape[0]):
        n = layer_indices[j]
        delta = 2 * np.pi * n * thicknesses[..., j, None] / wavelengths_nm
        cos, sin = np.cos(delta), np.sin(delta)
        a11, a12, a21, a22 = cos, 1j * sin / n, 1j * n * sin, cos
        m11, m12, m21, m22 = (
            m11 * a11 + m12 * a21,
            m11 * a12 + m12 * a22,
            m21 * a11 + m22 * a21,
            m21 * a12 + m22 * a22,
        )
    b = m11 + m12 * n_out
    c = m21 + m22 * n_out
    denominator = n_in * b + c
    transmission = 4 * n_in * n_out / np.abs(denominator) ** 2
    reflection = np.abs((n_in * b - c) / denominator) ** 2
    return transmission, reflection


def stack_transmission(stack: FilterStack, wavelength_nm) -> tuple:
    """Normal-incidence power transmittance and reflectance of a lossless stack."""
    wavelengths = np.atleast_1d(np.asarray(wavelength_nm, dtype=float))
    n_in = _medium_index(stack.incident, wavelengths)
    n_out = _medium_index(stack.exit, wavelengths)
    t, r = _transfer(n_in, n_out, _layer_indices(stack, wavelengths), stack.thicknesses, wavelengths)
    if np.ndim(wavelength_nm) == 0:
        return float(t[0]), float(r[0])
    return t, r


def spectrum(stack: FilterStack, wavelengths_nm) -> TransmissionSpectrum:
    wavelengths = np.asarray(wavelengths_nm, dtype=float)
    t, r = stack_transmission(stack, wavelengths)
    return TransmissionSpectrum(wavelengths, t, r)


def filtered_spectrum(source: SpdcSpectrum, stack: FilterStack, path_efficiency: float = 1.0) -> SpdcSpectrum:
    """SPDC spectrum seen behind a filter stack and a lumped, wavelength-flat path efficiency.

    Intensities stay relative to the unfiltered peak, so filter losses show up as a lower maximum.
    """
    if not 0 < path_efficiency <= 1:
        raise DomainError(f"path efficiency must lie in (0, 1], got {path_efficiency}")
    t, _ = stack_transmission(stack, source.wavelengths * 1e3)
    return SpdcSpectrum(source.wavelengths.copy(), source.intensities * t * path_efficiency, source.process)


def fresnel_envelope(n1, n2):
    """Transmittance of a single ideal interface."""
    n1, n2 = np.asarray(n1, dtype=float), np.asarray(n2, dtype=float)
    return 4 * n1 * n2 / (n1 + n2) ** 2


def convert_substrate(
    measured: TransmissionSpectrum,
    measurement_config: tuple[Medium, Medium],
    target_config: tuple[Medium, Medium],
) -> TransmissionSpectrum:
    """Re-reference a measured spectrum from one pair of surrounding media to another.

    Incoherent single-interface approximation: T_target = T_measured * E_target / E_measured, where E is the
    Fresnel envelope of the (incident, exit) media on each wavelength. No substrate fringes are modelled.
    """
    wl = measured.wavelengths_nm
    source = fresnel_envelope(*(_medium_index(m, wl) for m in measurement_config))
    target = fresnel_envelope(*(_medium_index(m, wl) for m in target_config))
    if np.any(source < ENVELOPE_FLOOR):
        raise NumericalDegeneracyError(
            f"measurement envelope {np.min(source):.3g} below {ENVELOPE_FLOOR}, cannot divide it out"
        )
    converted = measured.transmission * target / source
    if np.any(converted > 1):
        logger.debug(f"Clipping {np.sum(converted > 1)} converted transmission values above 1")
    converted = np.clip(converted, 0.0, 1.0)
    return TransmissionSpectrum(wl.copy(), converted, 1 - converted)


def _parse_thickness(token: str, material: MaterialIndex, reference_nm: float | None, path: Path) -> float:
    match = QUARTER_WAVE_TOKEN.match(token)
    if match:
        if reference_nm is None:
            raise ConfigError(f"{path}: quarter-wave thickness '{token}' needs a 'reference_nm' header")
        return float(match.group(1)) * reference_nm / (4 * float(material.index(reference_nm / 1e3)))
    try:
        return float(token)
    except ValueError as e:
        raise ConfigError(f"{path}: bad thickness '{token}'") from e


def load_stack(path: str | Path) -> FilterStack:
    """Stack file: `# incident:`, `# exit:` and optional `# reference_nm:` headers, then `material thickness` lines.

    A thickness is in nm, or `<x>qw` for x quarter waves at the reference wavelength.
    """
    path = Path(path)
    if not path.exists():
        shipped = data_path("stacks", path.name)
        if not shipped.exists():
            raise ConfigError(f"Stack file not found: {path}")
        path = shipped
    header = header_fields(path)
    try:
        incident, exit_medium = load_material(header["incident"]), load_material(header["exit"])
    except KeyError as e:
        raise ConfigError(f"{path}: header is missing {e}") from e
    reference = float(header["reference_nm"]) if "reference_nm" in header else None
    materials: dict[str, MaterialIndex] = {}
    layers = []
    for line in comment_lines(path):
        parts = line.split()
        if len(parts) != 2:
            raise ConfigError(f"{path}: expected 'material thickness', got '{line}'")
        name, token = parts
        material = materials.setdefault(name, load_material(name))
        layers.append(Layer(material, _parse_thickness(token, material, reference, path)))
    stack = FilterStack(incident, exit_medium, layers, reference)
    logger.debug(f"Loaded stack {path.name}: {len(layers)} layers")
    return stack


def write_stack(stack: FilterStack, path: str | Path, comment: str = ""):
    lines = [f"# {line}" for line in comment.splitlines()]
    lines += [f"# incident: {stack.incident.name}", f"# exit: {stack.exit.name}"]
    if stack.reference_wavelength_nm is not None:
        lines.append(f"# reference_nm: {stack.reference_wavelength_nm:g}")
    lines += [f"{layer.material.name} {layer.thickness_nm:.4f}" for layer in stack.layers]
    Path(path).write_text("\n".join(lines) + "\n")


@dataclass(frozen=True)
class Target:
    wavelength_nm: float
    transmission: float
    weight: float = 1.0
    kind: str = "eq"  # eq, max (T <= value) or min (T >= value)

    def __post_init__(self):
        if self.kind not in ("eq", "max", "min"):
            raise ConfigError(f"target kind must be eq, max or min, got '{self.kind}'")
        if not 0 <= self.transmission <= 1:
            raise ConfigError(f"target transmission {self.transmission} outside [0, 1]")
        if self.weight < 0:
            raise ConfigError(f"target weight {self.weight} is negative")

    def met(self, transmission: float, tolerance: float = 0.0) -> bool:
        if self.kind == "max":
            return transmission <= self.transmission + tolerance
        if self.kind == "min":
            return transmission >= self.transmission - tolerance
        return abs(transmission - self.transmission) <= tolerance


@dataclass(frozen=True)
class StackConstraints:
    max_layers: int
    materials: tuple[str, ...]
    min_thickness_nm: float = 0.0
    max_thickness_nm: float = 1000.0

    def __post_init__(self):
        if not self.materials:
            raise ConfigError("optimizer constraints allow no materials")
        if self.max_layers < 1:
            raise ConfigError(f"max_layers must be at least 1, got {self.max_layers}")
        if not 0 <= self.min_thickness_nm < self.max_thickness_nm < MAX_LAYER_THICKNESS_NM:
            raise ConfigError(
                f"thickness bounds [{self.min_thickness_nm}, {self.max_thickness_nm}] nm are not a valid interval"
            )


@dataclass
class OptimizationResult:
    stack: FilterStack
    objective: float
    trace: list[float]  # non-increasing, starts at the (clipped) seed and ends at `objective`


class _Objective:
    """Weighted squared transmission error, evaluated for batches of thickness vectors."""

    def __init__(self, stack: FilterStack, targets: list[Target]):
        self.wavelengths = np.array([t.wavelength_nm for t in targets], dtype=float)
        self.values = np.array([t.transmission for t in targets])
        self.weights = np.array([t.weight for t in targets])
        self.kinds = np.array([t.kind for t in targets])
        self.n_in = _medium_index(stack.incident, self.wavelengths)
        self.n_out = _medium_index(stack.exit, self.wavelengths)
        self.indices = _layer_indices(stack, self.wavelengths)
        self.evaluations = 0

    def transmissions(self, thicknesses) -> np.ndarray:
        t, _ = _transfer(self.n_in, self.n_out, self.indices, thicknesses, self.wavelengths)
        return t

    def __call__(self, thicknesses) -> np.ndarray:
        self.evaluations += 1
        error = self.transmissions(thicknesses) - self.values
        error = np.where(self.kinds == "max", np.maximum(error, 0), error)
        error = np.where(self.kinds == "min", np.minimum(error, 0), error)
        return np.sum(self.weights * error**2, axis=-1)


SCAN_POINTS = 81
MAX_SWEEPS = 60
SWEEP_RTOL = 1e-9
CONVERGED_OBJECTIVE = 1e-12


def _coordinate_descent(objective: _Objective, thicknesses, bounds, trace):
    lo, hi = bounds
    grid = np.linspace(lo, hi, SCAN_POINTS)
    step = grid[1] - grid[0]
    best = float(objective(thicknesses))
    for sweep in range(MAX_SWEEPS):
        start = best
        for j in range(len(thicknesses)):
            candidates = np.repeat(thicknesses[None, :], SCAN_POINTS, axis=0)
            candidates[:, j] = grid
            values = objective(candidates)
            k = int(np.argmin(values))

            def along(d, j=j):
                trial = thicknesses.copy()
                trial[j] = d
                return float(objective(trial))

            refined = minimize_scalar(
                along, bounds=(max(lo, grid[k] - step), min(hi, grid[k] + step)), method="bounded"
            )
            value, d = (refined.fun, refined.x) if refined.fun < values[k] else (values[k], grid[k])
            if value < best:
                thicknesses[j] = d
                best = float(value)
                trace.append(best)
        logger.debug(f"Coordinate sweep {sweep}: objective {best:.3e}")
        if best <= CONVERGED_OBJECTIVE or start - best <= SWEEP_RTOL * max(start, 1e-300):
            break
    return thicknesses, best


def _polish(objective: _Objective, thicknesses, bounds, best, trace):
    lo, hi = bounds
    result = minimize(
        lambda d: float(objective(np.clip(d, lo, hi))),
        thicknesses,
        method="Nelder-Mead",
        options={"maxiter": 200 * len(thicknesses), "xatol": 1e-6, "fatol": 1e-14},
    )
    candidate = np.clip(result.x, lo, hi)
    value = float(objective(candidate))
    if value < best:
        trace.append(value)
        return candidate, value
    return thicknesses, best


def optimize_stack(
    targets: list[Target],
    constraints: StackConstraints,
    seed_design: FilterStack,
    rng_seed: int | None = None,
    restarts: int = 0,
) -> OptimizationResult:
    """Adjust layer thicknesses of `seed_design` towards the target transmissions.

    Coordinate descent (global grid scan per layer, then a bounded line refinement) followed by a
    Nelder-Mead polish. Layer count and materials are fixed by the seed. With `restarts` > 0 the best design
    is perturbed by up to 10 % per layer using `rng_seed` and re-optimised; the best result is kept.
    """
    if not targets:
        raise ConfigError("optimize_stack needs at least one target")
    if not seed_design.layers:
        raise ConfigError("optimize_stack needs a seed design with at least one layer")
    if len(seed_design.layers) > constraints.max_layers:
        raise ConfigError(f"seed design has {len(seed_design.layers)} layers, max_layers is {constraints.max_layers}")
    disallowed = {layer.material.name for layer in seed_design.layers} - set(constraints.materials)
    if disallowed:
        raise ConfigError(f"seed design uses materials {sorted(disallowed)} not allowed by the constraints")
    if restarts and rng_seed is None:
        raise ConfigError("stochastic restarts need an explicit rng seed")

    bounds = (constraints.min_thickness_nm, constraints.max_thickness_nm)
    objective = _Objective(seed_design, targets)
    thicknesses = seed_design.thicknesses
    best = float(objective(thicknesses))
    trace = [best]
    in_bounds = bool(np.all((thicknesses >= bounds[0]) & (thicknesses <= bounds[1])))
    if best <= CONVERGED_OBJECTIVE and in_bounds:
        logger.info(f"Seed design already meets the targets (objective {best:.3e})")
        return OptimizationResult(seed_design, best, trace)
    if not in_bounds:
        thicknesses = np.clip(thicknesses, *bounds)
        clipped = float(objective(thicknesses))
        logger.warning(
            f"Seed thicknesses clipped to [{bounds[0]}, {bounds[1]}] nm, objective {best:.3e} -> {clipped:.3e}"
        )
        best = clipped
        trace = [best]  # the unclipped seed is not a feasible start

    thicknesses, best = _coordinate_descent(objective, thicknesses.copy(), bounds, trace)
    thicknesses, best = _polish(objective, thicknesses, bounds, best, trace)

    rng = np.random.default_rng(rng_seed) if restarts else None
    for restart in range(restarts):
        if best <= CONVERGED_OBJECTIVE:
            break
        start = np.clip(thicknesses * rng.uniform(0.9, 1.1, size=len(thicknesses)), *bounds)
        restart_trace: list[float] = []
        candidate, value = _coordinate_descent(objective, start, bounds, restart_trace)
        candidate, value = _polish(objective, candidate, bounds, value, restart_trace)
        logger.debug(f"Restart {restart}: objective {value:.3e} (best {best:.3e})")
        if value < best:
            thicknesses, best = candidate, value
            trace.append(best)

    if trace[-1] != best:
        trace.append(best)
    logger.info(f"Optimised {len(thicknesses)} layers: objective {trace[0]:.3e} -> {best:.3e}")
    logger.debug(f"{objective.evaluations} objective evaluations")
    return OptimizationResult(seed_design.with_thicknesses(thicknesses), best, trace)
