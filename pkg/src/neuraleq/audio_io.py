"""WAV, CSV and PGM readers/writers.

Only 16-bit signed PCM, mono, 16 kHz WAV is accepted; anything else is
rejected with a message naming the offending header field.
"""

from __future__ import annotations

import io
import re
import wave
from pathlib import Path

import numpy as np

from .dsp import SAMPLE_RATE, AudioBuffer
from .errors import WavFormatError

PCM_SCALE = 32768.0


def read_wav(path) -> AudioBuffer:
    path = Path(path)
    try:
        with wave.open(str(path), "rb") as w:
            channels = w.getnchannels()
            width = w.getsampwidth()
            rate = w.getframerate()
            comptype = w.getcomptype()
            raw = w.readframes(w.getnframes())
    except wave.Error as exc:
        # the stdlib only decodes PCM; anything else surfaces here
        raise WavFormatError(f"{path}: audio_format: {exc}") from exc
    except EOFError as exc:
        raise WavFormatError(f"{path}: truncated header") from exc

    if comptype != "NONE":
        raise WavFormatError(f"{path}: audio_format: compressed ({comptype}), need PCM")
    if channels != 1:
        raise WavFormatError(f"{path}: num_channels={channels}, need 1 (mono)")
    if width != 2:
        raise WavFormatError(f"{path}: bits_per_sample={8 * width}, need 16")
    if rate != SAMPLE_RATE:
        raise WavFormatError(f"{path}: sample_rate={rate}, need {SAMPLE_RATE}")

    pcm = np.frombuffer(raw, dtype="<i2")
    return AudioBuffer(pcm.astype(np.float64) / PCM_SCALE, SAMPLE_RATE)


def to_pcm16(samples: np.ndarray) -> np.ndarray:
    q = np.round(np.asarray(samples, dtype=np.float64) * PCM_SCALE)
    return np.clip(q, -32768, 32767).astype("<i2")


def write_wav(path, audio: AudioBuffer) -> None:
    if audio.sample_rate != SAMPLE_RATE:
        raise WavFormatError(f"{path}: sample_rate={audio.sample_rate}, need {SAMPLE_RATE}")
    with wave.open(str(path), "wb") as w:
        w.setnchannels(1)
        w.setsampwidth(2)
        w.setframerate(SAMPLE_RATE)
        w.writeframes(to_pcm16(audio.samples).tobytes())


def write_grid_csv(path, grid: np.ndarray) -> None:
    """One row per frame, values in 17 significant digits."""
    np.savetxt(path, np.atleast_2d(grid), delimiter=",", fmt="%.17g")


def read_grid_csv(path) -> np.ndarray:
    return np.atleast_2d(np.loadtxt(path, delimiter=",", dtype=np.float64))


def write_pgm(path, grid: np.ndarray) -> tuple[float, float]:
    """Binary P5 greymap, rows = frames, min-max scaled to 0..255.

    The header comment carries the original min/max so values can be
    approximately recovered with `read_pgm`.
    """
    grid = np.atleast_2d(np.asarray(grid, dtype=np.float64))
    lo, hi = float(grid.min()), float(grid.max())
    span = hi - lo
    if span > 0:
        pixels = np.round((grid - lo) / span * 255.0)
    else:
        pixels = np.zeros_like(grid)
    rows, cols = grid.shape
    header = f"P5\n# min={lo!r} max={hi!r}\n{cols} {rows}\n255\n".encode("ascii")
    with open(path, "wb") as fh:
        fh.write(header + pixels.astype(np.uint8).tobytes())
    return lo, hi


_PGM_COMMENT = re.compile(rb"#\s*min=(\S+)\s+max=(\S+)")


def read_pgm(path) -> np.ndarray:
    """Inverse of `write_pgm`, up to 8-bit quantization."""
    data = Path(path).read_bytes()
    buf = io.BytesIO(data)
    if buf.readline().strip() != b"P5":
        raise ValueError(f"{path}: not a binary PGM")
    lo = hi = None
    tokens: list[bytes] = []
    while len(tokens) < 3:
        line = buf.readline()
        if not line:
            raise ValueError(f"{path}: truncated PGM header")
        m = _PGM_COMMENT.search(line)
        if m:
            lo, hi = float(m.group(1)), float(m.group(2))
            continue
        if line.startswith(b"#"):
            continue
        tokens.extend(line.split())
    cols, rows, maxval = (int(t) for t in tokens)
    pixels = np.frombuffer(buf.read(rows * cols), dtype=np.uint8).reshape(rows, cols)
    values = pixels.astype(np.float64) / maxval
    if lo is None:
        return values
    return lo + values * (hi - lo)


def write_signed_pgms(prefix, grid: np.ndarray) -> tuple[Path, Path]:
    """Split a signed map into positive and negative parts, one PGM each."""
    pos = Path(f"{prefix}_pos.pgm")
    neg = Path(f"{prefix}_neg.pgm")
    write_pgm(pos, np.maximum(grid, 0.0))
    write_pgm(neg, np.maximum(-grid, 0.0))
    return pos, neg
