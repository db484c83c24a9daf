from dataclasses import dataclass, field
from enum import IntEnum
from pathlib import Path

import numpy as np
import pandas as pd

from hsps.errors import ConfigError
from hsps.utils import header_fields, setup_logging

logger = setup_logging()

MAGIC = b"HSPSTAG1"
FORMAT_VERSION = 1
PS_PER_S = 10**12

HEADER_DTYPE = np.dtype(
    [
        ("magic", "S8"),
        ("version", "<u4"),
        ("repetition_rate_hz", "<f8"),
        ("n_events", "<u8"),
        ("seed", "<u8"),
        ("duration_ps", "<u8"),
    ]
)
RECORD_DTYPE = np.dtype([("channel", "u1"), ("timestamp_ps", "<i8")])


class Channel(IntEnum):
    S = 0
    I1 = 1
    I2 = 2


class TagFileError(ConfigError):
    pass


@dataclass
class TagStream:
    """Detector events of the signal and the two idler detectors, in time order."""

    channels: np.ndarray  # uint8, Channel values
    timestamps: np.ndarray  # int64, ps
    repetition_rate_hz: float
    duration_s: float
    seed: int = 0
    model: dict = field(default_factory=dict)

    def __post_init__(self):
        self.channels = np.asarray(self.channels, dtype=np.uint8)
        self.timestamps = np.asarray(self.timestamps, dtype=np.int64)
        if self.channels.shape != self.timestamps.shape:
            raise TagFileError("channel and timestamp arrays differ in length")
        if np.any(self.channels > max(Channel)):
            raise TagFileError(f"unknown channel id {int(self.channels.max())}")
        if not self.repetition_rate_hz > 0:
            raise TagFileError(f"repetition rate must be positive, got {self.repetition_rate_hz}")
        order = np.lexsort((self.channels, self.timestamps))
        if np.any(order != np.arange(len(order))):
            self.channels, self.timestamps = self.channels[order], self.timestamps[order]

    def __len__(self):
        return len(self.timestamps)

    @property
    def duration_ps(self) -> int:
        return int(round(self.duration_s * PS_PER_S))

    def channel_times(self, channel: Channel) -> np.ndarray:
        return self.timestamps[self.channels == channel]

    def counts(self) -> dict[Channel, int]:
        return {channel: int(np.count_nonzero(self.channels == channel)) for channel in Channel}

    def shifted(self, offset_ps: int) -> "TagStream":
        return TagStream(
            self.channels, self.timestamps + offset_ps, self.repetition_rate_hz, self.duration_s, self.seed, self.model
        )

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({"channel": self.channels, "timestamp_ps": self.timestamps})


def write_binary(stream: TagStream, path: str | Path):
    header = np.zeros(1, dtype=HEADER_DTYPE)
    header[0] = (MAGIC, FORMAT_VERSION, stream.repetition_rate_hz, len(stream), stream.seed, stream.duration_ps)
    records = np.empty(len(stream), dtype=RECORD_DTYPE)
    records["channel"] = stream.channels
    records["timestamp_ps"] = stream.timestamps
    with open(path, "wb") as f:
        f.write(header.tobytes())
        f.write(records.tobytes())


def read_binary(path: str | Path) -> TagStream:
    data = Path(path).read_bytes()
    if len(data) < HEADER_DTYPE.itemsize:
        raise TagFileError(f"{path}: file is shorter than the tag stream header")
    header = np.frombuffer(data, dtype=HEADER_DTYPE, count=1)[0]
    if header["magic"] != MAGIC:
        raise TagFileError(f"{path}: bad magic {header['magic']!r}, not a tag stream file")
    if header["version"] != FORMAT_VERSION:
        raise TagFileError(f"{path}: unsupported tag stream version {header['version']}")
    n_events = int(header["n_events"])
    body = data[HEADER_DTYPE.itemsize :]
    if len(body) != n_events * RECORD_DTYPE.itemsize:
        raise TagFileError(f"{path}: header announces {n_events} events, body holds {len(body)} bytes")
    records = np.frombuffer(body, dtype=RECORD_DTYPE, count=n_events) if n_events else np.empty(0, RECORD_DTYPE)
    return TagStream(
        records["channel"].copy(),
        records["timestamp_ps"].copy(),
        float(header["repetition_rate_hz"]),
        int(header["duration_ps"]) / PS_PER_S,
        int(header["seed"]),
    )


def write_csv(stream: TagStream, path: str | Path):
    header = [
        f"# repetition_rate_hz: {stream.repetition_rate_hz!r}",
        f"# duration_ps: {stream.duration_ps}",
        f"# seed: {stream.seed}",
    ]
    with open(path, "w") as f:
        f.write("\n".join(header) + "\n")
        stream.to_frame().to_csv(f, index=False, lineterminator="\n")


def read_csv(path: str | Path) -> TagStream:
    fields = header_fields(path)
    try:
        frame = pd.read_csv(path, comment="#", dtype={"channel": "uint8", "timestamp_ps": "int64"})
        rate = float(fields["repetition_rate_hz"])
        duration_ps = int(fields["duration_ps"])
    except KeyError as e:
        raise TagFileError(f"{path}: missing {e}") from e
    except ValueError as e:
        raise TagFileError(f"{path}: {e}") from e
    seed = int(fields.get("seed", 0))
    return TagStream(frame["channel"].to_numpy(), frame["timestamp_ps"].to_numpy(), rate, duration_ps / PS_PER_S, seed)


def load_stream(path: str | Path) -> TagStream:
    """Reads a tag stream, choosing the codec from the file suffix (`.csv` or binary)."""
    path = Path(path)
    if not path.exists():
        raise TagFileError(f"Tag stream file not found: {path}")
    stream = read_csv(path) if path.suffix == ".csv" else read_binary(path)
    logger.info(f"Loaded {len(stream)} events ({stream.duration_s:.3g} s) from {path}")
    return stream


def save_stream(stream: TagStream, path: str | Path):
    path = Path(path)
    if path.suffix == ".csv":
        write_csv(stream, path)
    else:
        write_binary(stream, path)
    logger.info(f"Wrote {len(stream)} events to {path}")
