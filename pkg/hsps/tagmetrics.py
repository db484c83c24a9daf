import math
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from hsps.errors import ConfigError, UndefinedMetricError
from hsps.tags import Channel, TagStream
from hsps.utils import setup_logging

logger = setup_logging()

MATCHING_MODES = ("greedy", "all_pairs")


@dataclass(frozen=True)
class CoincidenceConfig:
    window_ps: float = 5000.0
    delays_ps: tuple[float, float, float] = (0.0, 0.0, 0.0)
    repetition_time_ps: float = 100_000.0
    shifts: tuple[int, ...] = (1, 2)
    matching: str = "greedy"

    def __post_init__(self):
        if not self.window_ps > 0:
            raise ConfigError(f"coincidence window must be positive, got {self.window_ps} ps")
        if not self.repetition_time_ps > self.window_ps:
            raise ConfigError(
                f"repetition time {self.repetition_time_ps} ps must exceed the window {self.window_ps} ps"
            )
        if len(self.delays_ps) != 3:
            raise ConfigError(f"delays_ps needs one value per channel (S, I1, I2), got {len(self.delays_ps)}")
        if any(int(m) != m or m < 1 for m in self.shifts):
            raise ConfigError(f"pulse shifts must be positive integers, got {self.shifts}")
        if self.matching not in MATCHING_MODES:
            raise ConfigError(f"matching must be one of {MATCHING_MODES}, got '{self.matching}'")


@dataclass(frozen=True)
class CountSummary:
    """Singles, coincidences and shifted (accidental) coincidences of one stream.

    Counts are stored; rates are counts divided by the stream duration.
    """

    duration_s: float
    s: int
    i1: int
    i2: int
    s_i1: int
    s_i2: int
    i1_i2: int
    s_i1_i2: int
    shifted: dict[int, int] = field(default_factory=dict)  # m -> (S,I1) + (S,I2) coincidences at m pulse shifts
    empty: bool = False

    def rate(self, count: int) -> float:
        return count / self.duration_s if self.duration_s > 0 else 0.0

    @property
    def rate_s(self) -> float:
        return self.rate(self.s)

    @property
    def rate_i1(self) -> float:
        return self.rate(self.i1)

    @property
    def rate_i2(self) -> float:
        return self.rate(self.i2)

    @property
    def coincidences(self) -> int:
        return self.s_i1 + self.s_i2

    def to_frame(self) -> pd.DataFrame:
        names = ["s", "i1", "i2", "s_i1", "s_i2", "i1_i2", "s_i1_i2"]
        rows = [(name, getattr(self, name), self.rate(getattr(self, name))) for name in names]
        rows += [(f"s_i_shift_{m}", n, self.rate(n)) for m, n in sorted(self.shifted.items())]
        return pd.DataFrame(rows, columns=["quantity", "counts", "rate_hz"])


def match_greedy(a: np.ndarray, b: np.ndarray, half_window: float) -> tuple[np.ndarray, np.ndarray]:
    """Earliest-first one-to-one matching of two sorted timestamp arrays.

    Returns index arrays (ia, ib) of matched pairs with |a - b| <= half_window.
    """
    lo = np.searchsorted(b, a - half_window, side="left")
    hi = np.searchsorted(b, a + half_window, side="right")
    back = np.searchsorted(a, b + half_window, side="right") - np.searchsorted(a, b - half_window, side="left")
    if np.all(hi - lo <= 1) and np.all(back <= 1):
        # isolated candidate pairs, greedy keeps every one of them
        ia = np.nonzero(hi > lo)[0]
        return ia, lo[ia].astype(np.int64)

    a, b = a.tolist(), b.tolist()
    ia, ib = [], []
    i = j = 0
    while i < len(a) and j < len(b):
        difference = a[i] - b[j]
        if difference > half_window:
            j += 1
        elif difference < -half_window:
            i += 1
        else:
            ia.append(i)
            ib.append(j)
            i += 1
            j += 1
    return np.array(ia, dtype=np.int64), np.array(ib, dtype=np.int64)


def count_all_pairs(a: np.ndarray, b: np.ndarray, half_window: float) -> int:
    """Number of (a, b) pairs within the window, without the one-partner restriction."""
    lo = np.searchsorted(b, a - half_window, side="left")
    hi = np.searchsorted(b, a + half_window, side="right")
    return int(np.sum(hi - lo))


def _pair_count(a, b, config: CoincidenceConfig) -> int:
    half_window = config.window_ps / 2
    if config.matching == "all_pairs":
        return count_all_pairs(a, b, half_window)
    ia, _ = match_greedy(a, b, half_window)
    assert len(ia) <= min(len(a), len(b)), "greedy matching counted an event twice"
    return len(ia)


def _triple_count(s, i1, i2, config: CoincidenceConfig) -> int:
    half_window = config.window_ps / 2
    if config.matching == "all_pairs":
        lo1, hi1 = np.searchsorted(i1, s - half_window), np.searchsorted(i1, s + half_window, side="right")
        total = 0
        for k in np.nonzero(hi1 > lo1)[0]:
            for t1 in i1[lo1[k] : hi1[k]]:
                lo = max(s[k], t1) - half_window
                hi = min(s[k], t1) + half_window
                total += int(np.searchsorted(i2, hi, side="right") - np.searchsorted(i2, lo, side="left"))
        return total
    s_idx1, i1_idx = match_greedy(s, i1, half_window)
    s_idx2, i2_idx = match_greedy(s, i2, half_window)
    _, pos1, pos2 = np.intersect1d(s_idx1, s_idx2, assume_unique=True, return_indices=True)
    partner1, partner2 = i1[i1_idx[pos1]], i2[i2_idx[pos2]]
    return int(np.count_nonzero(np.abs(partner1 - partner2) <= half_window))


def count(stream: TagStream, config: CoincidenceConfig) -> CountSummary:
    """Singles and windowed coincidences; shifted counts add m repetition times to the idler timestamps."""
    if len(stream) == 0:
        logger.warning("Empty tag stream, all counts are zero")
        return CountSummary(stream.duration_s, 0, 0, 0, 0, 0, 0, 0, {m: 0 for m in config.shifts}, empty=True)
    if not stream.duration_s > 0:
        raise ConfigError(f"stream duration must be positive, got {stream.duration_s} s")
    times = {
        channel: np.sort(stream.channel_times(channel).astype(np.float64) + config.delays_ps[channel])
        for channel in Channel
    }
    s, i1, i2 = times[Channel.S], times[Channel.I1], times[Channel.I2]

    shifted = {}
    for m in config.shifts:
        offset = m * config.repetition_time_ps
        shifted[m] = _pair_count(s, i1 + offset, config) + _pair_count(s, i2 + offset, config)
    summary = CountSummary(
        duration_s=stream.duration_s,
        s=len(s),
        i1=len(i1),
        i2=len(i2),
        s_i1=_pair_count(s, i1, config),
        s_i2=_pair_count(s, i2, config),
        i1_i2=_pair_count(i1, i2, config),
        s_i1_i2=_triple_count(s, i1, i2, config),
        shifted=shifted,
    )
    logger.debug(f"Counted {summary}")
    return summary


def heralding_efficiency(summary: CountSummary, idler_detector_efficiency: float) -> float:
    """(R_s,i1 + R_s,i2) / (R_s * eta_det,i)."""
    if summary.s == 0:
        raise UndefinedMetricError("heralding efficiency is undefined without signal (herald) counts")
    if not 0 < idler_detector_efficiency <= 1:
        raise UndefinedMetricError(f"idler detector efficiency must lie in (0, 1], got {idler_detector_efficiency}")
    efficiency = (summary.s_i1 + summary.s_i2) / (summary.s * idler_detector_efficiency)
    if efficiency > 1:
        logger.warning(f"Heralding efficiency {efficiency:.4f} exceeds 1, check the detector efficiency and noise")
    return efficiency


def heralded_g2(summary: CountSummary) -> float:
    """4 R_s R_s,i1,i2 / (R_s,i1 + R_s,i2)^2, the dimensionless heralded autocorrelation at zero delay."""
    if summary.s_i1 + summary.s_i2 == 0:
        raise UndefinedMetricError("heralded g2 is undefined without signal-idler coincidences")
    return 4 * summary.s * summary.s_i1_i2 / (summary.s_i1 + summary.s_i2) ** 2


def car_rep(summary: CountSummary, m: int) -> float:
    """Coincidences at zero delay over coincidences with the idlers shifted by m pulses."""
    if m not in summary.shifted:
        raise UndefinedMetricError(f"no shifted coincidence count for m={m}, configured shifts {list(summary.shifted)}")
    accidental = summary.shifted[m]
    if accidental == 0 and summary.coincidences == 0:
        raise UndefinedMetricError(f"CAR_rep({m}) is undefined without coincidences")
    if accidental == 0:
        logger.warning(f"CAR_rep({m}) is infinite: {summary.coincidences} coincidences, 0 at {m} pulse shifts")
        return math.inf
    return summary.coincidences / accidental


@dataclass(frozen=True)
class KlyshkoEstimate:
    signal_path: float  # eta_s * eta_filter,s including the signal detector
    idler_path: float  # eta_i * eta_filter,i including the idler detectors
    pair_rate_hz: float


def klyshko_infer(summary: CountSummary) -> KlyshkoEstimate:
    """Path transmissions and pair rate from singles and coincidences.

    R_i is the splitter-summed idler rate R_i1 + R_i2; the returned transmissions still contain the detector
    efficiencies, which the caller divides out.
    """
    coincidences = summary.s_i1 + summary.s_i2
    idler = summary.i1 + summary.i2
    if coincidences == 0 or summary.s == 0 or idler == 0:
        raise UndefinedMetricError(
            f"Klyshko inference needs counts on all arms: S={summary.s}, I={idler}, coincidences={coincidences}"
        )
    return KlyshkoEstimate(
        signal_path=coincidences / idler,
        idler_path=coincidences / summary.s,
        pair_rate_hz=summary.rate(summary.s) * summary.rate(idler) / summary.rate(coincidences),
    )


def metrics_frame(summary: CountSummary, idler_detector_efficiency: float) -> pd.DataFrame:
    """Estimators of one summary as a table; undefined metrics become NaN with a warning."""
    estimators = {
        "eta_h": lambda: heralding_efficiency(summary, idler_detector_efficiency),
        "g2_h": lambda: heralded_g2(summary),
    }
    for m in sorted(summary.shifted):
        estimators[f"CAR_rep_{m}"] = lambda m=m: car_rep(summary, m)
    rows = []
    for name, estimate in estimators.items():
        try:
            rows.append((name, estimate()))
        except UndefinedMetricError as e:
            logger.warning(f"{name}: {e}")
            rows.append((name, float("nan")))
    try:
        klyshko = klyshko_infer(summary)
        rows += [
            ("klyshko_signal_path", klyshko.signal_path),
            ("klyshko_idler_path", klyshko.idler_path),
            ("klyshko_pair_rate_hz", klyshko.pair_rate_hz),
        ]
    except UndefinedMetricError as e:
        logger.warning(f"Klyshko: {e}")
    return pd.DataFrame(rows, columns=["metric", "value"])
