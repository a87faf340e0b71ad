import struct
import wave

import numpy as np
import pytest

from neuraleq.audio_io import (
    read_grid_csv,
    read_pgm,
    read_wav,
    write_grid_csv,
    write_pgm,
    write_signed_pgms,
    write_wav,
)
from neuraleq.dsp import AudioBuffer
from neuraleq.errors import WavFormatError


def test_wav_round_trip_is_exact_on_pcm_grid(tmp_path):
    pcm = np.random.default_rng(0).integers(-32768, 32768, 16000)
    audio = AudioBuffer(pcm / 32768.0)
    write_wav(tmp_path / "a.wav", audio)
    back = read_wav(tmp_path / "a.wav")
    assert back.sample_rate == 16000
    assert np.array_equal(back.samples, audio.samples)


def test_wav_write_clips_out_of_range(tmp_path):
    write_wav(tmp_path / "c.wav", AudioBuffer(np.array([2.0, -2.0, 0.5])))
    back = read_wav(tmp_path / "c.wav").samples
    assert back[0] == 32767 / 32768 and back[1] == -1.0 and back[2] == 0.5


def _write_raw(path, channels, width, rate):
    with wave.open(str(path), "wb") as w:
        w.setnchannels(channels)
        w.setsampwidth(width)
        w.setframerate(rate)
        w.writeframes(b"\x00" * (channels * width * 100))


@pytest.mark.parametrize(
    "channels,width,rate,field",
    [(2, 2, 16000, "num_channels"), (1, 1, 16000, "bits_per_sample"), (1, 2, 44100, "sample_rate")],
)
def test_wav_rejects_wrong_format_naming_field(tmp_path, channels, width, rate, field):
    path = tmp_path / "bad.wav"
    _write_raw(path, channels, width, rate)
    with pytest.raises(WavFormatError, match=field):
        read_wav(path)


def test_wav_rejects_float_format(tmp_path):
    data = struct.pack("<4f", 0.0, 0.1, -0.1, 0.0)
    fmt = struct.pack("<HHIIHH", 3, 1, 16000, 64000, 4, 32)
    body = b"WAVE" + b"fmt " + struct.pack("<I", len(fmt)) + fmt + b"data" + struct.pack("<I", len(data)) + data
    path = tmp_path / "float.wav"
    path.write_bytes(b"RIFF" + struct.pack("<I", len(body)) + body)
    with pytest.raises(WavFormatError, match="audio_format"):
        read_wav(path)


def test_csv_round_trip_is_bit_exact(tmp_path):
    grid = np.random.default_rng(1).normal(size=(7, 5))
    write_grid_csv(tmp_path / "g.csv", grid)
    assert np.array_equal(read_grid_csv(tmp_path / "g.csv"), grid)
    assert len((tmp_path / "g.csv").read_text().splitlines()) == 7


def test_pgm_round_trip_within_quantization(tmp_path):
    grid = np.random.default_rng(2).normal(size=(6, 9))
    lo, hi = write_pgm(tmp_path / "g.pgm", grid)
    raw = (tmp_path / "g.pgm").read_bytes()
    assert raw.startswith(b"P5\n# min=")
    back = read_pgm(tmp_path / "g.pgm")
    assert back.shape == grid.shape
    assert np.max(np.abs(back - grid)) <= (hi - lo) / 255 / 2 + 1e-12
    assert back.min() == pytest.approx(lo, abs=1e-12) and back.max() == pytest.approx(hi, abs=1e-12)


def test_pgm_constant_grid(tmp_path):
    write_pgm(tmp_path / "z.pgm", np.zeros((3, 4)))
    assert np.all(read_pgm(tmp_path / "z.pgm") == 0.0)


def test_signed_pgm_pair(tmp_path):
    grid = np.array([[1.0, -2.0], [0.0, 3.0]])
    pos, neg = write_signed_pgms(tmp_path / "s", grid)
    np.testing.assert_allclose(read_pgm(pos), np.maximum(grid, 0), atol=3 / 255)
    np.testing.assert_allclose(read_pgm(neg), np.maximum(-grid, 0), atol=2 / 255)
