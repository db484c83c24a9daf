import dataclasses
from dataclasses import dataclass, field

import numpy as np
import pandas as pd
from numpy.polynomial.hermite_e import hermegauss
from scipy.optimize import bisect, minimize_scalar

from hsps.dispersion import SellmeierModel, refractive_index
from hsps.errors import CalibrationError, ComputationError, DomainError, NoPhasematchError, NumericalDegeneracyError
from hsps.utils import setup_logging

logger = setup_logging()

ModeCombo = tuple[str, str, str]  # (signal mode, idler mode, pump mode)
FUNDAMENTAL: ModeCombo = ("00", "00", "00")

DEFAULT_SEARCH_UM = (0.6, 1.05)
SCAN_POINTS = 2000
ROOT_XTOL_UM = 1e-13
ENERGY_TOLERANCE = 1e-12  # 1/um
SINC_SERIES_BELOW = 1e-4
PUMP_QUADRATURE_POINTS = 5
PEAK_XTOL_UM = 1e-10
DEFAULT_LOBE_UM = 1e-3


def combo_label(combo: ModeCombo) -> str:
    return "/".join(combo)


@dataclass(frozen=True)
class QpmProcess:
    pump_wavelength: float  # um
    poling_period: float  # um
    crystal_length: float  # mm
    temperature: float  # degC
    mode_offsets: dict[ModeCombo, tuple[float, float, float]] = field(
        default_factory=lambda: {FUNDAMENTAL: (0.0, 0.0, 0.0)}
    )

    def __post_init__(self):
        for name in ["pump_wavelength", "poling_period", "crystal_length"]:
            if not getattr(self, name) > 0:
                raise DomainError(f"{name} must be positive, got {getattr(self, name)}")

    def offsets(self, combo: ModeCombo) -> tuple[float, float, float]:
        if combo in self.mode_offsets:
            return self.mode_offsets[combo]
        if combo == FUNDAMENTAL:
            return 0.0, 0.0, 0.0
        raise ComputationError(f"mode combination {combo_label(combo)} has no index offsets defined")

    @property
    def combos(self) -> list[ModeCombo]:
        return list(self.mode_offsets) or [FUNDAMENTAL]

    def replace(self, **changes) -> "QpmProcess":
        return dataclasses.replace(self, **changes)


@dataclass
class SpdcSpectrum:
    wavelengths: np.ndarray  # signal, um
    intensities: np.ndarray
    process: QpmProcess

    def __post_init__(self):
        if np.any(np.diff(self.wavelengths) <= 0):
            raise DomainError("spectrum wavelengths must be strictly increasing")
        if not np.all(np.isfinite(self.intensities)) or np.any(self.intensities < 0):
            raise NumericalDegeneracyError("spectrum intensities must be finite and non-negative")

    def peak_wavelength(self) -> float:
        return float(self.wavelengths[np.argmax(self.intensities)])

    def fwhm(self) -> float:
        """Full width at half maximum of the highest peak, linearly interpolated, in um."""
        i_max = int(np.argmax(self.intensities))
        half = self.intensities[i_max] / 2
        left = i_max
        while left > 0 and self.intensities[left] > half:
            left -= 1
        right = i_max
        while right < len(self.intensities) - 1 and self.intensities[right] > half:
            right += 1
        if self.intensities[left] > half or self.intensities[right] > half:
            raise NumericalDegeneracyError("peak is not resolved within the wavelength grid")
        x, y = self.wavelengths, self.intensities
        lo = np.interp(half, [y[left], y[left + 1]], [x[left], x[left + 1]])
        hi = np.interp(half, [y[right], y[right - 1]], [x[right], x[right - 1]])
        return float(hi - lo)

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({"wavelength_nm": self.wavelengths * 1e3, "relative_intensity": self.intensities})


def idler_from_signal(pump_wavelength: float, signal_wavelength):
    signal = np.asarray(signal_wavelength, dtype=float)
    if not pump_wavelength > 0 or np.any(signal <= pump_wavelength):
        raise DomainError(
            f"no physical idler for pump {pump_wavelength} um and signal {signal_wavelength} um (needs 0 < pump < signal)"
        )
    idler = 1 / (1 / pump_wavelength - 1 / signal)
    return idler if idler.ndim else float(idler)


def _effective_indices(process: QpmProcess, model: SellmeierModel, signal, combo: ModeCombo):
    dn_s, dn_i, dn_p = process.offsets(combo)
    inverse_idler = 1 / process.pump_wavelength - 1 / signal
    if np.any(inverse_idler <= 0):
        raise DomainError(f"signal wavelength must exceed the pump wavelength {process.pump_wavelength} um")
    n_p = refractive_index(model, process.pump_wavelength, process.temperature) + dn_p
    n_s = refractive_index(model, signal, process.temperature) + dn_s
    n_i = refractive_index(model, 1 / inverse_idler, process.temperature) + dn_i
    return n_p, n_s, n_i, inverse_idler


def phase_mismatch(process: QpmProcess, model: SellmeierModel, signal_wavelength, combo: ModeCombo = FUNDAMENTAL):
    """Delta k in rad/um; positive when the pump wave vector exceeds signal + idler + grating."""
    signal = np.asarray(signal_wavelength, dtype=float)
    n_p, n_s, n_i, inverse_idler = _effective_indices(process, model, signal, combo)
    dk = 2 * np.pi * (n_p / process.pump_wavelength - n_s / signal - n_i * inverse_idler - 1 / process.poling_period)
    return dk if np.ndim(dk) else float(dk)


def solve_phasematch(
    process: QpmProcess,
    model: SellmeierModel,
    combo: ModeCombo = FUNDAMENTAL,
    search: tuple[float, float] = DEFAULT_SEARCH_UM,
) -> float:
    """Signal wavelength (um) where Delta k vanishes; the lowest root wins if there are several."""
    lo, hi = search
    if not process.pump_wavelength < lo < hi:
        raise DomainError(f"search interval {search} must lie above the pump wavelength {process.pump_wavelength} um")
    grid = np.linspace(lo, hi, SCAN_POINTS)
    dk = phase_mismatch(process, model, grid, combo)
    signs = np.sign(dk)
    # exact zeros on the grid count as brackets
    brackets = np.nonzero(signs[:-1] * signs[1:] <= 0)[0]
    if len(brackets) == 0:
        raise NoPhasematchError(
            f"no phasematching for {combo_label(combo)} in [{lo}, {hi}] um at period {process.poling_period} um,"
            f" T={process.temperature} degC: Delta k = {dk[0]:.4g} .. {dk[-1]:.4g} rad/um",
            (float(dk[0]), float(dk[-1])),
        )
    n_roots = np.count_nonzero(signs == 0) + np.count_nonzero(signs[:-1] * signs[1:] < 0)
    if n_roots > 1:
        logger.warning(f"{n_roots} phasematching roots for {combo_label(combo)}, taking the shortest wavelength")
    i = brackets[0]
    for edge in (i, i + 1):
        if dk[edge] == 0:
            return float(grid[edge])
    root = bisect(lambda x: phase_mismatch(process, model, x, combo), grid[i], grid[i + 1], xtol=ROOT_XTOL_UM)
    logger.debug(f"Root for {combo_label(combo)} bracketed in [{grid[i]:.6f}, {grid[i + 1]:.6f}] um: {root:.9f} um")
    return float(root)


def solve_period(
    pump_wavelength: float,
    signal_wavelength: float,
    model: SellmeierModel,
    temperature: float,
    offsets: tuple[float, float, float] = (0.0, 0.0, 0.0),
) -> float:
    """Poling period (um) that phasematches the given signal wavelength."""
    idler_from_signal(pump_wavelength, signal_wavelength)
    dn_s, dn_i, dn_p = offsets
    inverse_idler = 1 / pump_wavelength - 1 / signal_wavelength
    n_p = refractive_index(model, pump_wavelength, temperature) + dn_p
    n_s = refractive_index(model, signal_wavelength, temperature) + dn_s
    n_i = refractive_index(model, 1 / inverse_idler, temperature) + dn_i
    denominator = n_p / pump_wavelength - n_s / signal_wavelength - n_i * inverse_idler
    if denominator <= ENERGY_TOLERANCE:
        raise DomainError(
            f"wave-vector mismatch {2 * np.pi * denominator:.3g} rad/um is not positive, no poling period phasematches"
            f" {signal_wavelength} um"
        )
    return float(1 / denominator)


def _sinc_squared(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    small = np.abs(x) < SINC_SERIES_BELOW
    safe = np.where(small, 1.0, x)
    sinc = np.where(small, 1 - x**2 / 6, np.sin(safe) / safe)
    return sinc**2


def _pump_samples(process: QpmProcess, pump_bandwidth_nm: float | None) -> list[tuple[QpmProcess, float]]:
    if not pump_bandwidth_nm:
        return [(process, 1.0)]
    sigma_um = pump_bandwidth_nm * 1e-3 / (2 * np.sqrt(2 * np.log(2)))
    nodes, weights = hermegauss(PUMP_QUADRATURE_POINTS)
    weights = weights / weights.sum()
    return [(process.replace(pump_wavelength=process.pump_wavelength + sigma_um * x), w) for x, w in zip(nodes, weights)]


def _raw_intensity(process, model, combos_with_weights, wavelengths, pump_bandwidth_nm, background):
    length_um = process.crystal_length * 1e3
    total = np.zeros_like(wavelengths, dtype=float)
    for sample, sample_weight in _pump_samples(process, pump_bandwidth_nm):
        for combo, weight in combos_with_weights:
            dk = phase_mismatch(sample, model, wavelengths, combo)
            total += sample_weight * weight * _sinc_squared(dk * length_um / 2)
    if background is not None:
        total += background(wavelengths)
    return total


def spdc_spectrum(
    process: QpmProcess,
    model: SellmeierModel,
    combos_with_weights: list[tuple[ModeCombo, float]],
    wavelengths,
    background=None,
    pump_bandwidth_nm: float | None = None,
    search: tuple[float, float] = DEFAULT_SEARCH_UM,
) -> SpdcSpectrum:
    """Weighted sum of sinc^2 phasematching curves over a signal wavelength grid.

    `background` is an optional callable (wavelength um -> additive intensity), e.g. a measured Cerenkov
    contribution. The result is normalised to the continuous maximum of the curve, located by a bounded
    search around every phasematching root and around the highest grid point, so the peak value is 1 up to
    grid sampling and the values do not depend on the grid.
    """
    if not combos_with_weights:
        raise ComputationError("spdc_spectrum needs at least one mode combination")
    wavelengths = np.asarray(wavelengths, dtype=float)
    intensity = _raw_intensity(process, model, combos_with_weights, wavelengths, pump_bandwidth_nm, background)

    def intensity_at(x: float) -> float:
        return float(
            _raw_intensity(process, model, combos_with_weights, np.array([x]), pump_bandwidth_nm, background)[0]
        )

    lo, hi = search
    candidates = []
    for combo, _ in combos_with_weights:
        try:
            root = solve_phasematch(process, model, combo, search)
        except NoPhasematchError:
            logger.debug(f"{combo_label(combo)} does not phasematch inside {search} um")
            continue
        lobe = _main_lobe_half_width(process, model, combo, root)
        candidates.append((max(lo, root - lobe), root, min(hi, root + lobe)))
    i = int(np.argmax(intensity))
    if len(wavelengths) > 1:
        candidates.append((wavelengths[max(i - 1, 0)], wavelengths[i], wavelengths[min(i + 1, len(wavelengths) - 1)]))
    norm = float(intensity[i])
    for left, centre, right in candidates:
        norm = max(norm, intensity_at(centre))
        if right > left:
            refined = minimize_scalar(
                lambda x: -intensity_at(x), bounds=(left, right), method="bounded", options={"xatol": PEAK_XTOL_UM}
            )
            norm = max(norm, -float(refined.fun))
    if not norm > 0:
        raise NumericalDegeneracyError("spectrum is identically zero, cannot normalise")
    return SpdcSpectrum(wavelengths, intensity / norm, process)


def _main_lobe_half_width(process: QpmProcess, model: SellmeierModel, combo: ModeCombo, root: float) -> float:
    """Distance (um) from a root to the first zero of its sinc^2 curve, from the local Delta k slope."""
    h = 1e-6
    slope = (phase_mismatch(process, model, root + h, combo) - phase_mismatch(process, model, root - h, combo)) / (2 * h)
    if slope == 0:
        return DEFAULT_LOBE_UM
    return float(2 * np.pi / (process.crystal_length * 1e3 * abs(slope)))


def calibrate_offset(
    measured_peak: float,
    process: QpmProcess,
    model: SellmeierModel,
    search: tuple[float, float] = DEFAULT_SEARCH_UM,
) -> dict[ModeCombo, tuple[float, float, float]]:
    """Shift all calculated peaks by the common wavelength offset that puts the fundamental on `measured_peak`.

    Each combination keeps its distance to the fundamental; the shift is stored as an additive correction
    to its signal index offset.
    """
    try:
        fundamental_root = solve_phasematch(process, model, FUNDAMENTAL, search)
    except NoPhasematchError as e:
        raise CalibrationError(f"cannot calibrate, the fundamental combination does not phasematch: {e}") from e
    shift = measured_peak - fundamental_root
    logger.info(f"Calibrating peak positions: {fundamental_root * 1e3:.3f} nm -> {measured_peak * 1e3:.3f} nm")

    combos = process.combos if FUNDAMENTAL in process.combos else [FUNDAMENTAL, *process.combos]
    updated = {}
    for combo in combos:
        root = fundamental_root if combo == FUNDAMENTAL else solve_phasematch(process, model, combo, search)
        target = root + shift
        if not search[0] < target < search[1]:
            raise CalibrationError(
                f"calibrated peak of {combo_label(combo)} at {target:.6f} um leaves the search window {search} um"
            )
        correction = target * phase_mismatch(process, model, target, combo) / (2 * np.pi)
        dn_s, dn_i, dn_p = process.offsets(combo)
        updated[combo] = (dn_s + correction, dn_i, dn_p)
        logger.debug(f"{combo_label(combo)}: signal index offset {dn_s:.6g} -> {dn_s + correction:.6g}")

    root = solve_phasematch(process.replace(mode_offsets=updated), model, FUNDAMENTAL, search)
    if abs(root - measured_peak) > 1e-6:
        raise CalibrationError(f"calibration did not converge: root {root:.9f} um, wanted {measured_peak:.9f} um")
    return updated
