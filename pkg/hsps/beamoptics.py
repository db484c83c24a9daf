import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd

from hsps.errors import ConfigError, DomainError
from hsps.utils import comment_lines, data_path, header_fields, setup_logging

logger = setup_logging()


@dataclass(frozen=True)
class GaussianMode:
    """Aligned elliptical Gaussian mode, described by its 1/e^2 intensity diameters in um."""

    mfd_x: float
    mfd_y: float
    label: str = ""

    def __post_init__(self):
        if not (self.mfd_x > 0 and self.mfd_y > 0):
            raise DomainError(f"mode field diameters must be positive, got {self.mfd_x} x {self.mfd_y} um")

    @classmethod
    def circular(cls, mfd: float, label: str = "") -> "GaussianMode":
        return cls(mfd, mfd, label)

    @property
    def waist_x(self) -> float:
        return self.mfd_x / 2

    @property
    def waist_y(self) -> float:
        return self.mfd_y / 2


def overlap_efficiency(a: GaussianMode, b: GaussianMode) -> float:
    """Power coupling of two aligned, centered Gaussian modes."""
    x_term = a.mfd_x / b.mfd_x + b.mfd_x / a.mfd_x
    y_term = a.mfd_y / b.mfd_y + b.mfd_y / a.mfd_y
    return 4 / (x_term * y_term)


def overlap_integral(a: GaussianMode, b: GaussianMode, points: int = 400, extent: float = 6.0) -> float:
    """Numerical field-overlap on a square grid spanning `extent` intensity sigmas of the wider mode.

    |int Ea Eb|^2 / (int |Ea|^2 int |Eb|^2) with E = exp(-x^2/wx^2 - y^2/wy^2).
    """
    sigma = max(a.waist_x, a.waist_y, b.waist_x, b.waist_y) / 2  # intensity sigma = w/2
    x = np.linspace(-extent * sigma, extent * sigma, points)
    xx, yy = np.meshgrid(x, x, indexing="ij")

    def field(mode):
        return np.exp(-(xx**2) / mode.waist_x**2 - yy**2 / mode.waist_y**2)

    def integrate(values):
        return np.trapezoid(np.trapezoid(values, x, axis=1), x)

    ea, eb = field(a), field(b)
    return float(integrate(ea * eb) ** 2 / (integrate(ea**2) * integrate(eb**2)))


def efficiency_to_db(efficiency: float) -> float:
    if not 0 < efficiency <= 1:
        raise DomainError(f"efficiency must lie in (0, 1], got {efficiency}")
    return -10 * math.log10(efficiency)


def db_to_efficiency(loss_db: float) -> float:
    if loss_db < 0:
        raise DomainError(f"loss must be non-negative, got {loss_db} dB")
    return 10 ** (-loss_db / 10)


@dataclass
class LossBudget:
    entries: list[tuple[str, float]] = field(default_factory=list)
    wavelength_nm: float | None = None

    def __post_init__(self):
        for label, loss in self.entries:
            if loss < 0:
                raise ConfigError(f"loss budget entry '{label}' is negative ({loss} dB)")

    def add(self, label: str, loss_db: float):
        if loss_db < 0:
            raise ConfigError(f"loss budget entry '{label}' is negative ({loss_db} dB)")
        self.entries.append((label, loss_db))

    def add_coupling(self, label: str, a: GaussianMode, b: GaussianMode):
        self.add(label, efficiency_to_db(overlap_efficiency(a, b)))

    def to_frame(self) -> pd.DataFrame:
        frame = pd.DataFrame(self.entries, columns=["label", "loss_db"])
        total = pd.DataFrame([("total", total_loss(self))], columns=["label", "loss_db"])
        return pd.concat([frame, total], ignore_index=True)


def total_loss(budget: LossBudget) -> float:
    return math.fsum(loss for _, loss in budget.entries)


def transmission(budget: LossBudget) -> float:
    return db_to_efficiency(total_loss(budget))


def load_budget(path: str | Path) -> LossBudget:
    """Reads a budget file of `label loss_dB` lines with an optional `# wavelength_nm:` header."""
    path = Path(path)
    if not path.exists():
        shipped = data_path("budgets", path.name)
        if not shipped.exists():
            raise ConfigError(f"Budget file not found: {path}")
        path = shipped
    entries = []
    for line in comment_lines(path):
        parts = line.split()
        if len(parts) != 2:
            raise ConfigError(f"{path}: expected 'label loss_dB', got '{line}'")
        try:
            entries.append((parts[0], float(parts[1])))
        except ValueError as e:
            raise ConfigError(f"{path}: loss of '{parts[0]}' is not a number") from e
    wavelength = header_fields(path).get("wavelength_nm")
    budget = LossBudget(entries, float(wavelength) if wavelength else None)
    logger.debug(f"Loaded budget {path.name}: {len(entries)} entries, {total_loss(budget):.3f} dB")
    return budget
