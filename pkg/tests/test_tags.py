import numpy as np
import pytest

from hsps.tags import (
    HEADER_DTYPE,
    Channel,
    TagFileError,
    TagStream,
    load_stream,
    read_binary,
    save_stream,
    write_binary,
)


@pytest.fixture
def stream():
    channels = [Channel.I1, Channel.S, Channel.I2, Channel.S]
    timestamps = [100_050, 99_980, 300_010, 0]
    return TagStream(channels, timestamps, 10e6, 4e-7, seed=42)


def test_stream_is_time_ordered(stream):
    assert list(stream.timestamps) == [0, 99_980, 100_050, 300_010]
    assert list(stream.channels) == [Channel.S, Channel.S, Channel.I1, Channel.I2]
    assert stream.counts() == {Channel.S: 2, Channel.I1: 1, Channel.I2: 1}
    assert stream.duration_ps == 400_000


@pytest.mark.parametrize("suffix", [".bin", ".csv"])
def test_file_formats_preserve_stream(stream, tmp_path, suffix):
    path = tmp_path / f"stream{suffix}"
    save_stream(stream, path)
    loaded = load_stream(path)
    np.testing.assert_array_equal(loaded.timestamps, stream.timestamps)
    np.testing.assert_array_equal(loaded.channels, stream.channels)
    assert loaded.repetition_rate_hz == stream.repetition_rate_hz
    assert loaded.duration_ps == stream.duration_ps
    assert loaded.seed == 42


def test_empty_stream(tmp_path):
    path = tmp_path / "empty.bin"
    write_binary(TagStream([], [], 10e6, 1e-3), path)
    loaded = read_binary(path)
    assert len(loaded) == 0
    assert loaded.duration_s == pytest.approx(1e-3)


def test_bad_magic(stream, tmp_path):
    path = tmp_path / "stream.bin"
    write_binary(stream, path)
    data = bytearray(path.read_bytes())
    data[:8] = b"NOTATAG!"
    path.write_bytes(bytes(data))
    with pytest.raises(TagFileError, match="magic"):
        read_binary(path)


def test_truncated_file(stream, tmp_path):
    path = tmp_path / "stream.bin"
    write_binary(stream, path)
    path.write_bytes(path.read_bytes()[:-3])
    with pytest.raises(TagFileError, match="announces 4 events"):
        read_binary(path)
    path.write_bytes(path.read_bytes()[: HEADER_DTYPE.itemsize - 1])
    with pytest.raises(TagFileError, match="shorter"):
        read_binary(path)


def test_unknown_channel():
    with pytest.raises(TagFileError, match="unknown channel"):
        TagStream([0, 7], [0, 10], 10e6, 1e-6)


def test_missing_file(tmp_path):
    with pytest.raises(TagFileError, match="not found"):
        load_stream(tmp_path / "nothing.bin")


def test_csv_needs_header(tmp_path):
    path = tmp_path / "bare.csv"
    path.write_text("channel,timestamp_ps\n0,10\n")
    with pytest.raises(TagFileError, match="missing"):
        load_stream(path)


def test_shifted_stream(stream):
    shifted = stream.shifted(1_000)
    np.testing.assert_array_equal(shifted.timestamps, stream.timestamps + 1_000)
    np.testing.assert_array_equal(shifted.channel_times(Channel.S), [1_000, 100_980])
