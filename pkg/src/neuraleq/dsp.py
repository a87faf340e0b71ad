"""Audio <-> log-magnitude spectrogram conversion and additive masking.

Framing is fixed: 16 kHz audio, 480-sample (30 ms) periodic Hann window,
160-sample (10 ms) hop, 512-point FFT, no centering. With hop = window/3 the
squared window overlap-adds to a constant, so weighted overlap-add inverts the
analysis exactly in the interior.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import SampleRateMismatch, ShapeMismatch, TooShort

SAMPLE_RATE = 16000


@dataclass(frozen=True)
class StftConfig:
    fft_size: int = 512
    window_len: int = 480
    hop: int = 160
    log_epsilon: float = 1e-6

    def __post_init__(self):
        if self.window_len > self.fft_size:
            raise ValueError("window_len must not exceed fft_size")
        if self.hop <= 0 or self.window_len % self.hop:
            raise ValueError("hop must divide window_len")
        if not self.log_epsilon > 0:
            raise ValueError("log_epsilon must be positive")

    @property
    def n_bins(self) -> int:
        return self.fft_size // 2 + 1

    @property
    def log_floor(self) -> float:
        return float(np.log(self.log_epsilon))

    def n_frames(self, n_samples: int) -> int:
        return (n_samples - self.window_len) // self.hop + 1

    def to_dict(self) -> dict:
        return {
            "fft_size": self.fft_size,
            "window_len": self.window_len,
            "hop": self.hop,
            "log_epsilon": self.log_epsilon,
        }


@dataclass
class AudioBuffer:
    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1:
            raise ShapeMismatch(f"audio must be mono (1-D), got shape {self.samples.shape}")
        if not np.all(np.isfinite(self.samples)):
            raise ValueError("audio samples must be finite")

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate


@dataclass
class Spectrogram:
    log_mag: np.ndarray
    phase: np.ndarray
    config: StftConfig = field(default_factory=StftConfig)
    n_samples: int = 0

    def __post_init__(self):
        if self.log_mag.shape != self.phase.shape:
            raise ShapeMismatch(
                f"log_mag shape {self.log_mag.shape} != phase shape {self.phase.shape}"
            )

    @property
    def shape(self) -> tuple[int, int]:
        return self.log_mag.shape

    @property
    def magnitude(self) -> np.ndarray:
        return np.maximum(np.exp(self.log_mag) - self.config.log_epsilon, 0.0)


@dataclass
class Mask:
    values: np.ndarray

    @classmethod
    def zeros(cls, shape) -> "Mask":
        return cls(np.zeros(shape))

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape


def hann_periodic(n: int) -> np.ndarray:
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n) / n)


def stft(audio: AudioBuffer, config: StftConfig | None = None) -> Spectrogram:
    config = config or StftConfig()
    if audio.sample_rate != SAMPLE_RATE:
        raise SampleRateMismatch(f"expected {SAMPLE_RATE} Hz, got {audio.sample_rate} Hz")
    x = audio.samples
    if len(x) < config.window_len:
        raise TooShort(f"{len(x)} samples is shorter than one {config.window_len}-sample window")

    frames = sliding_window_view(x, config.window_len)[:: config.hop]
    spec = np.fft.rfft(frames * hann_periodic(config.window_len), n=config.fft_size, axis=1)
    mag = np.abs(spec)
    phase = np.angle(spec)
    phase[mag == 0] = 0.0
    phase[phase == -np.pi] = np.pi
    return Spectrogram(
        log_mag=np.log(mag + config.log_epsilon),
        phase=phase,
        config=config,
        n_samples=len(x),
    )


def istft(spec: Spectrogram) -> AudioBuffer:
    cfg = spec.config
    if spec.log_mag.shape != spec.phase.shape:
        raise ShapeMismatch("log_mag and phase grids disagree")
    if spec.log_mag.shape[1] != cfg.n_bins:
        raise ShapeMismatch(f"expected {cfg.n_bins} bins, got {spec.log_mag.shape[1]}")

    n_frames = spec.log_mag.shape[0]
    window = hann_periodic(cfg.window_len)
    frames = np.fft.irfft(spec.magnitude * np.exp(1j * spec.phase), n=cfg.fft_size, axis=1)
    frames = frames[:, : cfg.window_len] * window

    length = max(spec.n_samples, (n_frames - 1) * cfg.hop + cfg.window_len)
    out = np.zeros(length)
    norm = np.zeros(length)
    wsq = window**2
    for t in range(n_frames):
        start = t * cfg.hop
        out[start : start + cfg.window_len] += frames[t]
        norm[start : start + cfg.window_len] += wsq
    ok = norm >= 1e-12
    out[ok] /= norm[ok]
    return AudioBuffer(out[: spec.n_samples], SAMPLE_RATE)


def apply_mask(spec: Spectrogram, mask: Mask) -> Spectrogram:
    if mask.values.shape != spec.log_mag.shape:
        raise ShapeMismatch(
            f"mask shape {mask.values.shape} != spectrogram shape {spec.log_mag.shape}"
        )
    log_mag = np.maximum(spec.log_mag + mask.values, spec.config.log_floor)
    return replace(spec, log_mag=log_mag, phase=spec.phase.copy())


def crop_or_pad(audio: AudioBuffer, n_samples: int) -> AudioBuffer:
    x = audio.samples[:n_samples]
    if len(x) < n_samples:
        x = np.concatenate([x, np.zeros(n_samples - len(x))])
    return AudioBuffer(x, audio.sample_rate)


def snr_db(reference: np.ndarray, estimate: np.ndarray) -> float:
    noise = np.sum((reference - estimate) ** 2)
    signal = np.sum(reference**2)
    if noise == 0:
        return float("inf")
    return float(10.0 * np.log10(signal / noise))


def support_correlation(a: np.ndarray, b: np.ndarray, threshold: float) -> float:
    """Uncentred correlation |A & B| / sqrt(|A| |B|) of the supports above `threshold`.

    Uncentred, because real spectrograms are mostly "on" and a centred
    (Pearson) coefficient of near-constant vectors is meaningless.
    Two empty supports count as identical.
    """
    sa = a > threshold
    sb = b > threshold
    na, nb = int(sa.sum()), int(sb.sum())
    if na == 0 or nb == 0:
        return 1.0 if na == nb else 0.0
    return float(np.sum(sa & sb) / np.sqrt(float(na) * float(nb)))
