"""Synthetic two-timbre corpus: "premium" vs "cheap" bowed-string tones.

Both classes are rendered from the same seeded note sequence with the same
additive model; only the timbre parameters differ (resonances, spectral tilt,
vibrato depth, attack, noise level, high-harmonic decay). Every difference is
therefore a re-weighting of the same time-frequency support.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .audio_io import read_wav, write_wav
from .dsp import SAMPLE_RATE, AudioBuffer
from .errors import InvalidDuration, ManifestError

PREMIUM = 0
CHEAP = 1
CLASS_NAMES = {PREMIUM: "premium", CHEAP: "cheap"}

N_HARMONICS = 16
PEAK_LEVEL = 0.7
RELEASE_TIME = 0.02
SUSTAIN_DECAY_DB_PER_S = 3.0
MIN_NOTE = 0.25
MAX_NOTE = 1.0
VIBRATO_MIN_NOTE = 0.5
VIBRATO_PROB = 0.7
MIDI_LOW, MIDI_HIGH = 36, 60  # C2 (65.4 Hz) .. C4 (261.6 Hz)


@dataclass(frozen=True)
class Resonance:
    center: float  # Hz
    bandwidth: float  # Hz
    gain_db: float


@dataclass(frozen=True)
class TimbreProfile:
    class_label: int
    resonances: tuple[Resonance, Resonance]
    tilt_db_per_octave: float
    vibrato_rate: float
    vibrato_depth: float
    attack_time: float
    noise_gain: float
    high_harmonic_decay: float  # dB/s, harmonics above 6

    def __post_init__(self):
        if not 0.0 <= self.vibrato_depth <= 0.03:
            raise ValueError("vibrato_depth must lie in [0, 0.03]")
        if self.attack_time <= 0:
            raise ValueError("attack_time must be positive")

    def gain_db_at(self, freq, f0: float) -> np.ndarray:
        """Envelope in dB at absolute frequency `freq` for a note at `f0`.

        Tilt is measured in octaves above the fundamental; each resonance is a
        Lorentzian bump in dB whose half-gain width equals its bandwidth.
        """
        freq = np.asarray(freq, dtype=np.float64)
        octaves = np.log2(np.maximum(freq, f0) / f0)
        db = self.tilt_db_per_octave * octaves
        for r in self.resonances:
            db = db + r.gain_db / (1.0 + ((freq - r.center) / (0.5 * r.bandwidth)) ** 2)
        return db

    def envelope(self, k, f0: float) -> np.ndarray:
        """Linear gain of harmonic `k` of a note at `f0`."""
        k = np.asarray(k, dtype=np.float64)
        return 10.0 ** (self.gain_db_at(k * f0, f0) / 20.0)


PREMIUM_PROFILE = TimbreProfile(
    class_label=PREMIUM,
    resonances=(Resonance(300.0, 150.0, 6.0), Resonance(700.0, 250.0, 4.0)),
    tilt_db_per_octave=-3.0,
    vibrato_rate=5.5,
    vibrato_depth=0.015,
    attack_time=0.060,
    noise_gain=0.02,
    high_harmonic_decay=0.0,
)

CHEAP_PROFILE = TimbreProfile(
    class_label=CHEAP,
    resonances=(Resonance(450.0, 60.0, 8.0), Resonance(1800.0, 80.0, 6.0)),
    tilt_db_per_octave=-8.0,
    vibrato_rate=5.5,
    vibrato_depth=0.004,
    attack_time=0.015,
    noise_gain=0.08,
    high_harmonic_decay=12.0,
)

PROFILES = {PREMIUM: PREMIUM_PROFILE, CHEAP: CHEAP_PROFILE}


@dataclass(frozen=True)
class NoteSpec:
    f0: float
    duration: float
    onset: float
    has_vibrato: bool


def _check_duration(duration: float) -> None:
    if not 1.0 <= duration <= 30.0:
        raise InvalidDuration(f"clip duration {duration} s outside [1, 30] s")


def generate_notes(seed: int, duration: float = 3.0) -> list[NoteSpec]:
    """Seeded legato note sequence filling `duration` seconds.

    A 3 s clip gets 4-8 notes; longer or shorter clips scale the count. Notes
    last 0.25-1.0 s and follow each other without gaps; any remainder after
    the last note stays silent.
    """
    _check_duration(duration)
    rng = np.random.default_rng([seed, 0])
    scale = duration / 3.0
    lo = max(1, int(round(4 * scale)))
    hi = min(max(lo, int(round(8 * scale))), int(duration / MIN_NOTE))
    n = int(rng.integers(lo, hi + 1))

    notes = []
    t = 0.0
    for i in range(n):
        remaining = duration - t
        room = remaining - MIN_NOTE * (n - i - 1)
        longest = min(MAX_NOTE, room)
        if i == n - 1:
            dur = longest
        else:
            dur = float(rng.uniform(MIN_NOTE, longest))
        midi = int(rng.integers(MIDI_LOW, MIDI_HIGH + 1))
        f0 = 440.0 * 2.0 ** ((midi - 69) / 12.0)
        vib = bool(rng.random() < VIBRATO_PROB) and dur >= VIBRATO_MIN_NOTE
        notes.append(NoteSpec(f0=f0, duration=dur, onset=t, has_vibrato=vib))
        t += dur
    return notes


def _amplitude_envelope(n: int, profile: TimbreProfile) -> np.ndarray:
    t = np.arange(n) / SAMPLE_RATE
    dur = n / SAMPLE_RATE
    attack = np.minimum(t / profile.attack_time, 1.0)
    sustain = 10.0 ** (-SUSTAIN_DECAY_DB_PER_S * t / 20.0)
    release = np.clip((dur - t) / RELEASE_TIME, 0.0, 1.0)
    return attack * sustain * release


def _filtered_noise(n: int, note: NoteSpec, profile: TimbreProfile, rng) -> np.ndarray:
    white = rng.standard_normal(n)
    spec = np.fft.rfft(white)
    freqs = np.fft.rfftfreq(n, 1.0 / SAMPLE_RATE)
    gain = 10.0 ** (profile.gain_db_at(freqs, note.f0) / 20.0)
    return np.fft.irfft(spec * gain, n=n)


def render_note(note: NoteSpec, profile: TimbreProfile, rng=None) -> np.ndarray:
    n = int(round(note.duration * SAMPLE_RATE))
    t = np.arange(n) / SAMPLE_RATE
    inst_f = np.full(n, note.f0)
    if note.has_vibrato:
        inst_f = note.f0 * (1.0 + profile.vibrato_depth * np.sin(2 * np.pi * profile.vibrato_rate * t))
    phase = 2.0 * np.pi * np.cumsum(inst_f) / SAMPLE_RATE

    out = np.zeros(n)
    for k in range(1, N_HARMONICS + 1):
        if k * note.f0 * (1.0 + profile.vibrato_depth) >= SAMPLE_RATE / 2:
            break
        amp = profile.envelope(k, note.f0)
        if k > 6 and profile.high_harmonic_decay:
            amp = amp * 10.0 ** (-profile.high_harmonic_decay * t / 20.0)
        out += amp * np.sin(k * phase)

    if profile.noise_gain and rng is not None:
        noise = _filtered_noise(n, note, profile, rng)
        out += profile.noise_gain * noise
    return out * _amplitude_envelope(n, profile)


def render_notes(
    notes: list[NoteSpec], profile: TimbreProfile, duration: float, noise_seed=None
) -> AudioBuffer:
    """Additively render `notes` into a peak-normalized buffer."""
    total = int(round(duration * SAMPLE_RATE))
    out = np.zeros(total)
    rng = np.random.default_rng(noise_seed) if noise_seed is not None else None
    for note in notes:
        start = int(round(note.onset * SAMPLE_RATE))
        seg = render_note(note, profile, rng)[: max(total - start, 0)]
        out[start : start + len(seg)] += seg
    peak = np.max(np.abs(out))
    if peak > 0:
        out *= PEAK_LEVEL / peak
    return AudioBuffer(out, SAMPLE_RATE)


def render_clip(seed: int, profile: TimbreProfile, duration: float = 3.0) -> AudioBuffer:
    notes = generate_notes(seed, duration)
    return render_notes(notes, profile, duration, noise_seed=[seed, 1])


def frame_note_labels(notes: list[NoteSpec], n_frames: int, hop: int = 160, window_len: int = 480):
    """Per-frame label from the note whose span contains the frame centre.

    Returns an int array: 1 = vibrato note, 0 = steady note, -1 = no note.
    """
    centres = (np.arange(n_frames) * hop + window_len / 2) / SAMPLE_RATE
    labels = np.full(n_frames, -1)
    for note in notes:
        inside = (centres >= note.onset) & (centres < note.onset + note.duration)
        labels[inside] = 1 if note.has_vibrato else 0
    return labels


@dataclass(frozen=True)
class ManifestEntry:
    path: str  # relative to the manifest's root_dir
    label: int
    split: str
    seed: int
    sequence_id: int


@dataclass
class DatasetManifest:
    entries: list[ManifestEntry]
    root_dir: Path = field(default_factory=Path)

    MANIFEST_NAME = "manifest.csv"
    COLUMNS = ("path", "label", "split", "seed", "sequence_id")

    def split(self, name: str) -> list[ManifestEntry]:
        return [e for e in self.entries if e.split == name]

    def resolve(self, entry: ManifestEntry) -> Path:
        return self.root_dir / entry.path

    def write(self, path=None) -> Path:
        path = Path(path) if path is not None else self.root_dir / self.MANIFEST_NAME
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(self.COLUMNS)
            for e in self.entries:
                writer.writerow([e.path, e.label, e.split, e.seed, e.sequence_id])
        return path

    @classmethod
    def read(cls, path) -> "DatasetManifest":
        path = Path(path)
        try:
            fh = open(path, newline="")
        except OSError as exc:
            raise ManifestError(f"{path}: {exc.strerror}") from exc
        with fh:
            rows = list(csv.reader(fh))
        if not rows or tuple(rows[0]) != cls.COLUMNS:
            raise ManifestError(f"{path}: row 1: header must be {','.join(cls.COLUMNS)}")
        entries = []
        for lineno, row in enumerate(rows[1:], start=2):
            try:
                p, label, split, seed, seq = row
                entry = ManifestEntry(p, int(label), split, int(seed), int(seq))
            except ValueError as exc:
                raise ManifestError(f"{path}: row {lineno}: {exc}") from exc
            if entry.label not in CLASS_NAMES or entry.split not in ("train", "test"):
                raise ManifestError(f"{path}: row {lineno}: bad label or split")
            entries.append(entry)
        return cls(entries, path.parent)


def clip_seed(base_seed: int, sequence_id: int) -> int:
    return int(np.random.SeedSequence([base_seed, sequence_id]).generate_state(1)[0])


def build_dataset(
    out_dir,
    n_sequences: int = 50,
    seed: int = 0,
    clip_duration: float = 3.0,
    test_fraction: float = 0.2,
) -> DatasetManifest:
    """Render both timbres of `n_sequences` note sequences and write a manifest.

    The train/test split is made over sequence ids, so the two renderings of a
    sequence always land in the same split.
    """
    if n_sequences < 20:
        raise ValueError("n_sequences must be at least 20")
    _check_duration(clip_duration)
    out_dir = Path(out_dir)
    wav_dir = out_dir / "wav"
    wav_dir.mkdir(parents=True, exist_ok=True)

    order = np.random.default_rng([seed, 2]).permutation(n_sequences)
    n_test = int(round(test_fraction * n_sequences))
    test_ids = set(int(i) for i in order[:n_test])

    entries = []
    for seq in range(n_sequences):
        cs = clip_seed(seed, seq)
        split = "test" if seq in test_ids else "train"
        for label in (PREMIUM, CHEAP):
            rel = f"wav/seq{seq:04d}_{CLASS_NAMES[label]}.wav"
            audio = render_clip(cs, PROFILES[label], clip_duration)
            write_wav(out_dir / rel, audio)
            entries.append(ManifestEntry(rel, label, split, cs, seq))

    manifest = DatasetManifest(entries, out_dir)
    manifest.write()
    return manifest


def validate_manifest(manifest: DatasetManifest) -> None:
    """Check every path decodes and no sequence straddles both splits."""
    splits: dict[int, str] = {}
    for e in manifest.entries:
        if splits.setdefault(e.sequence_id, e.split) != e.split:
            raise ManifestError(f"sequence {e.sequence_id} appears in both splits")
        read_wav(manifest.resolve(e))
