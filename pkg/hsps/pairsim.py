import dataclasses
import os
from collections.abc import Iterator
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from enum import Enum

import numpy as np
import pandas as pd
from scipy import stats

from hsps.errors import ConfigError, TruncationError, UndefinedMetricError
from hsps.tagmetrics import CoincidenceConfig, car_rep, count, heralded_g2, heralding_efficiency
from hsps.tags import PS_PER_S, Channel, TagStream
from hsps.utils import setup_logging

logger = setup_logging()

TAIL_LIMIT = 1e-12
DEFAULT_N_MAX = 60
BLOCK_PULSES = 1_000_000


class Statistics(str, Enum):
    THERMAL = "thermal_single_mode"
    POISSONIAN = "poissonian"


def _ratio(numerator: float, denominator: float) -> float:
    return numerator / denominator if denominator > 0 else float("nan")


def _check_probability(name: str, value: float):
    if not 0 <= value <= 1:
        raise ConfigError(f"{name} must lie in [0, 1], got {value}")


@dataclass(frozen=True)
class SourceModel:
    mean_pairs_per_pulse: float
    statistics: Statistics = Statistics.THERMAL
    repetition_rate_hz: float = 10e6
    pulse_jitter_ps: float = 50.0

    def __post_init__(self):
        object.__setattr__(self, "statistics", Statistics(self.statistics))
        if self.mean_pairs_per_pulse < 0:
            raise ConfigError(f"mean_pairs_per_pulse must be >= 0, got {self.mean_pairs_per_pulse}")
        if not self.repetition_rate_hz > 0:
            raise ConfigError(f"repetition_rate_hz must be positive, got {self.repetition_rate_hz}")
        if self.pulse_jitter_ps < 0:
            raise ConfigError(f"pulse_jitter_ps must be >= 0, got {self.pulse_jitter_ps}")

    @property
    def period_ps(self) -> float:
        return PS_PER_S / self.repetition_rate_hz

    def with_mu(self, mu: float) -> "SourceModel":
        return dataclasses.replace(self, mean_pairs_per_pulse=mu)


@dataclass(frozen=True)
class ChannelModel:
    """Loss, splitting and detection between the source and the three detectors (signal, idler 1, idler 2).

    Transmissions are path products (module x filter); detector efficiencies are applied on top. Dark counts and
    residual pump background are independent per-pulse click probabilities inside the detection gate.
    """

    signal_transmission: float
    idler_transmission: float
    splitter_ratio: float = 0.5
    detector_efficiencies: tuple[float, float, float] = (0.65, 0.85, 0.85)
    dark_count_probs: tuple[float, float, float] = (0.0, 0.0, 0.0)
    background_probs: tuple[float, float, float] = (0.0, 0.0, 0.0)
    gate_ps: float = 1000.0

    def __post_init__(self):
        for name in ["signal_transmission", "idler_transmission", "splitter_ratio"]:
            _check_probability(name, getattr(self, name))
        for name in ["detector_efficiencies", "dark_count_probs", "background_probs"]:
            values = tuple(float(v) for v in getattr(self, name))
            if len(values) != 3:
                raise ConfigError(f"{name} needs one value per detector (S, I1, I2), got {len(values)}")
            for v in values:
                _check_probability(name, v)
            object.__setattr__(self, name, values)
        if self.gate_ps < 0:
            raise ConfigError(f"gate_ps must be >= 0, got {self.gate_ps}")

    @property
    def signal_click_efficiency(self) -> float:
        return self.signal_transmission * self.detector_efficiencies[Channel.S]

    @property
    def idler_click_efficiencies(self) -> tuple[float, float]:
        """Probability that one idler photon is detected at I1, resp. I2."""
        return (
            self.idler_transmission * self.splitter_ratio * self.detector_efficiencies[Channel.I1],
            self.idler_transmission * (1 - self.splitter_ratio) * self.detector_efficiencies[Channel.I2],
        )

    @property
    def idler_detector_efficiency(self) -> float:
        return (self.detector_efficiencies[Channel.I1] + self.detector_efficiencies[Channel.I2]) / 2

    @property
    def noise_probs(self) -> np.ndarray:
        dark, background = np.array(self.dark_count_probs), np.array(self.background_probs)
        return 1 - (1 - dark) * (1 - background)

    def swapped_idlers(self) -> "ChannelModel":
        return dataclasses.replace(
            self,
            splitter_ratio=1 - self.splitter_ratio,
            detector_efficiencies=tuple(self.detector_efficiencies[i] for i in (0, 2, 1)),
            dark_count_probs=tuple(self.dark_count_probs[i] for i in (0, 2, 1)),
            background_probs=tuple(self.background_probs[i] for i in (0, 2, 1)),
        )


def _number_law(source: SourceModel):
    mu = source.mean_pairs_per_pulse
    if source.statistics == Statistics.THERMAL:
        return stats.geom(1 / (1 + mu), loc=-1)
    return stats.poisson(mu)


def pair_number_distribution(source: SourceModel, n_max: int = DEFAULT_N_MAX) -> np.ndarray:
    """P(n) for n = 0..n_max pairs per pulse."""
    if n_max < 1:
        raise ConfigError(f"n_max must be at least 1, got {n_max}")
    n = np.arange(n_max + 1)
    if source.mean_pairs_per_pulse == 0:
        return (n == 0).astype(float)
    law = _number_law(source)
    tail = float(law.sf(n_max))
    if tail >= TAIL_LIMIT:
        raise TruncationError(
            f"pair number tail P(n > {n_max}) = {tail:.3g} at mu={source.mean_pairs_per_pulse}, raise n_max"
        )
    return law.pmf(n)


@dataclass(frozen=True)
class ClickProbabilities:
    s: float
    i1: float
    i2: float
    s_i1: float
    s_i2: float
    i1_i2: float
    s_i1_i2: float
    idler_detector_efficiency: float = 1.0

    def as_dict(self) -> dict[str, float]:
        return {f.name: getattr(self, f.name) for f in dataclasses.fields(self)[:7]}

    @property
    def heralding_efficiency(self) -> float:
        return _ratio(self.s_i1 + self.s_i2, self.s * self.idler_detector_efficiency)

    @property
    def heralded_g2(self) -> float:
        return _ratio(4 * self.s * self.s_i1_i2, (self.s_i1 + self.s_i2) ** 2)

    @property
    def car(self) -> float:
        """Same-pulse over different-pulse coincidences; pulses are independent so every shift gives the same."""
        return _ratio(self.s_i1 + self.s_i2, self.s * (self.i1 + self.i2))

    @property
    def idler_g2(self) -> float:
        """Unheralded idler autocorrelation p(i1 i2) / (p(i1) p(i2))."""
        return _ratio(self.i1_i2, self.i1 * self.i2)


def click_probabilities(source: SourceModel, channel: ChannelModel, n_max: int = DEFAULT_N_MAX) -> ClickProbabilities:
    """Exact click probabilities of the threshold detectors, summed over the pair number distribution.

    Given n pairs, the signal click and the idler routing are independent; idler photons go to I1 (detected with
    probability a), I2 (b) or are lost, so no-click probabilities are (1-e)^n, (1-a)^n, (1-b)^n and (1-a-b)^n.
    """
    p = pair_number_distribution(source, n_max)
    n = np.arange(len(p))
    e_s = channel.signal_click_efficiency
    a, b = channel.idler_click_efficiencies
    d_s, d_1, d_2 = channel.noise_probs

    no_s = (1 - e_s) ** n * (1 - d_s)
    no_1 = (1 - a) ** n * (1 - d_1)
    no_2 = (1 - b) ** n * (1 - d_2)
    no_12 = (1 - a - b) ** n * (1 - d_1) * (1 - d_2)

    def expect(values):
        return float(np.dot(p, values))

    q_s, q_1, q_2, q_12 = expect(no_s), expect(no_1), expect(no_2), expect(no_12)
    q_s1, q_s2, q_s12 = expect(no_s * no_1), expect(no_s * no_2), expect(no_s * no_12)
    return ClickProbabilities(
        s=1 - q_s,
        i1=1 - q_1,
        i2=1 - q_2,
        s_i1=1 - q_s - q_1 + q_s1,
        s_i2=1 - q_s - q_2 + q_s2,
        i1_i2=1 - q_1 - q_2 + q_12,
        s_i1_i2=1 - q_s - q_1 - q_2 + q_s1 + q_s2 + q_12 - q_s12,
        idler_detector_efficiency=channel.idler_detector_efficiency,
    )


def derive_seed(master_seed: int, index: int) -> int:
    """Deterministic 63-bit child seed for block or sweep point `index`."""
    state = np.random.SeedSequence([master_seed, index]).generate_state(2, np.uint32)
    return int((int(state[0]) << 31) ^ int(state[1]))


@dataclass(frozen=True)
class PulseOutcome:
    pulse_index: int
    clicks: tuple[bool, bool, bool]


@dataclass
class _Block:
    pulse_index: np.ndarray  # pulses with at least one click
    clicks: np.ndarray  # (k, 3) bool
    channels: np.ndarray
    timestamps: np.ndarray


def _simulate_block(source: SourceModel, channel: ChannelModel, start: int, n_pulses: int, seed: int) -> _Block:
    """One block of pulses. The order of random draws is fixed: pair numbers, signal, I1, I2, noise, timing."""
    rng = np.random.default_rng(seed)
    mu = source.mean_pairs_per_pulse
    if source.statistics == Statistics.THERMAL:
        pairs = rng.geometric(1 / (1 + mu), size=n_pulses) - 1
    else:
        pairs = rng.poisson(mu, size=n_pulses)

    photon = np.zeros((n_pulses, 3), dtype=bool)
    emitting = np.nonzero(pairs > 0)[0]
    if len(emitting):
        n = pairs[emitting]
        e_s = channel.signal_click_efficiency
        a, b = channel.idler_click_efficiencies
        k_s = rng.binomial(n, e_s)
        k_1 = rng.binomial(n, a)
        k_2 = rng.binomial(n - k_1, min(1.0, b / (1 - a)) if a < 1 else 0.0)
        photon[emitting] = np.column_stack([k_s > 0, k_1 > 0, k_2 > 0])

    noise = np.zeros((n_pulses, 3), dtype=bool)
    noise_probs = channel.noise_probs
    if np.any(noise_probs > 0):
        noise = rng.random((n_pulses, 3)) < noise_probs

    clicks = photon | noise
    clicked = np.nonzero(clicks.any(axis=1))[0]
    clicks, photon = clicks[clicked], photon[clicked]
    rows, columns = np.nonzero(clicks)
    pulse_times = np.rint((start + clicked[rows]) * source.period_ps).astype(np.int64)
    from_photon = photon[rows, columns]
    offsets = np.empty(len(rows))
    offsets[from_photon] = rng.normal(0.0, source.pulse_jitter_ps, size=int(from_photon.sum()))
    offsets[~from_photon] = rng.uniform(-channel.gate_ps / 2, channel.gate_ps / 2, size=int((~from_photon).sum()))
    return _Block(
        pulse_index=start + clicked,
        clicks=clicks,
        channels=columns.astype(np.uint8),
        timestamps=pulse_times + np.rint(offsets).astype(np.int64),
    )


def _blocks(source, channel, n_pulses, seed, block_pulses, workers) -> list[_Block]:
    if n_pulses < 1:
        raise ConfigError(f"n_pulses must be at least 1, got {n_pulses}")
    if seed is None:
        raise ConfigError("simulation needs an explicit seed")
    starts = range(0, n_pulses, block_pulses)
    jobs = [(start, min(block_pulses, n_pulses - start), derive_seed(seed, k)) for k, start in enumerate(starts)]
    workers = workers or min(4, os.cpu_count() or 1)
    if workers == 1 or len(jobs) == 1:
        return [_simulate_block(source, channel, *job) for job in jobs]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(lambda job: _simulate_block(source, channel, *job), jobs))


@dataclass
class PulseClicks:
    """Clicked pulses of a Monte-Carlo run; pulses without any click are omitted."""

    n_pulses: int
    pulse_index: np.ndarray
    clicks: np.ndarray

    def __iter__(self) -> Iterator[PulseOutcome]:
        for index, row in zip(self.pulse_index, self.clicks):
            yield PulseOutcome(int(index), (bool(row[0]), bool(row[1]), bool(row[2])))

    def tally(self) -> dict[str, int]:
        s, i1, i2 = self.clicks.T
        return {
            "s": int(s.sum()),
            "i1": int(i1.sum()),
            "i2": int(i2.sum()),
            "s_i1": int((s & i1).sum()),
            "s_i2": int((s & i2).sum()),
            "i1_i2": int((i1 & i2).sum()),
            "s_i1_i2": int((s & i1 & i2).sum()),
        }

    def frequencies(self) -> dict[str, float]:
        return {k: v / self.n_pulses for k, v in self.tally().items()}


def simulate_pulses(
    source: SourceModel,
    channel: ChannelModel,
    n_pulses: int,
    seed: int,
    block_pulses: int = BLOCK_PULSES,
    workers: int | None = None,
) -> PulseClicks:
    blocks = _blocks(source, channel, n_pulses, seed, block_pulses, workers)
    return PulseClicks(
        n_pulses,
        np.concatenate([b.pulse_index for b in blocks]),
        np.concatenate([b.clicks for b in blocks]).reshape(-1, 3),
    )


def simulate_stream(
    source: SourceModel,
    channel: ChannelModel,
    n_pulses: int,
    seed: int,
    block_pulses: int = BLOCK_PULSES,
    workers: int | None = None,
) -> TagStream:
    """Time-tagged detector events of `n_pulses` pump pulses.

    Pulses are simulated in blocks of `block_pulses`, block k seeded with derive_seed(seed, k); blocks may run
    in parallel and the merged stream does not depend on `workers`.
    """
    blocks = _blocks(source, channel, n_pulses, seed, block_pulses, workers)
    stream = TagStream(
        np.concatenate([b.channels for b in blocks]),
        np.concatenate([b.timestamps for b in blocks]),
        source.repetition_rate_hz,
        n_pulses / source.repetition_rate_hz,
        seed,
        {"source": dataclasses.asdict(source), "channel": dataclasses.asdict(channel), "n_pulses": n_pulses},
    )
    logger.debug(f"Simulated {n_pulses} pulses at mu={source.mean_pairs_per_pulse}: {len(stream)} events")
    return stream


def _metric(name: str, compute, mu: float) -> float:
    try:
        return compute()
    except UndefinedMetricError as e:
        logger.warning(f"{name} undefined at mu={mu}: {e}")
        return float("nan")


def power_sweep(
    source: SourceModel,
    channel: ChannelModel,
    n_pulses: int,
    seed: int,
    mus: list[float] | None = None,
    powers: list[float] | None = None,
    kappa: float | None = None,
    config: CoincidenceConfig | None = None,
    workers: int | None = None,
) -> pd.DataFrame:
    """Simulate and analyse one stream per point; point k uses seed derive_seed(seed, k).

    Points are given either as mean pair numbers `mus` or as pump `powers` with mu = kappa * power.
    """
    if (mus is None) == (powers is None):
        raise ConfigError("power_sweep needs exactly one of mus or powers")
    if powers is not None:
        if not kappa or kappa <= 0:
            raise ConfigError(f"kappa must be positive when sweeping powers, got {kappa}")
        mus = [kappa * p for p in powers]
    else:
        powers = [float("nan")] * len(mus)
    config = config or CoincidenceConfig(repetition_time_ps=source.period_ps)

    rows = []
    for k, (power, mu) in enumerate(zip(powers, mus)):
        point = source.with_mu(mu)
        stream = simulate_stream(point, channel, n_pulses, derive_seed(seed, k), workers=workers)
        summary = count(stream, config)
        model = click_probabilities(point, channel)
        row = {
            "power": power,
            "mu": mu,
            "R_s": summary.rate_s,
            "R_i1": summary.rate_i1,
            "R_i2": summary.rate_i2,
            "coincidences": summary.s_i1 + summary.s_i2,
            "eta_h": _metric("eta_h", lambda: heralding_efficiency(summary, channel.idler_detector_efficiency), mu),
            "g2_h": _metric("g2_h", lambda: heralded_g2(summary), mu),
        }
        for m in config.shifts:
            row[f"CAR_rep_{m}"] = _metric(f"CAR_rep({m})", lambda m=m: car_rep(summary, m), mu)
        row |= {"eta_h_model": model.heralding_efficiency, "g2_h_model": model.heralded_g2, "CAR_model": model.car}
        logger.info(f"Sweep point {k + 1}/{len(mus)}: mu={mu:.4g}, {len(stream)} events")
        rows.append(row)
    return pd.DataFrame(rows)
