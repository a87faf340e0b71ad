import dataclasses
import hashlib

import numpy as np
import pytest

from neuraleq.audio_io import read_wav
from neuraleq.dsp import StftConfig, stft, support_correlation
from neuraleq.errors import InvalidDuration, ManifestError
from neuraleq.synthdata import (
    CHEAP,
    CHEAP_PROFILE,
    PREMIUM,
    PREMIUM_PROFILE,
    DatasetManifest,
    NoteSpec,
    TimbreProfile,
    build_dataset,
    frame_note_labels,
    generate_notes,
    render_clip,
    render_notes,
    validate_manifest,
)

SUPPORT_THRESHOLD = StftConfig().log_floor + 3.0


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("corpus")
    return build_dataset(root, n_sequences=50, seed=0)


def test_same_seed_gives_same_note_sequence_for_both_timbres():
    notes = generate_notes(1234)
    assert notes == generate_notes(1234)
    premium = render_clip(1234, PREMIUM_PROFILE)
    cheap = render_clip(1234, CHEAP_PROFILE)
    assert len(premium.samples) == len(cheap.samples) == 48000
    assert not np.array_equal(premium.samples, cheap.samples)


def test_different_seeds_give_different_sequences():
    assert generate_notes(1) != generate_notes(2)


@pytest.mark.parametrize("seed", range(20))
def test_note_sequence_contract(seed):
    notes = generate_notes(seed)
    assert 4 <= len(notes) <= 8
    t = 0.0
    for n in notes:
        assert n.onset == pytest.approx(t)
        assert 0.25 - 1e-12 <= n.duration <= 1.0 + 1e-12
        assert 65.0 <= n.f0 <= 262.0
        if n.has_vibrato:
            assert n.duration >= 0.5
        t += n.duration
    assert t <= 3.0 + 1e-9


def test_harmonic_energy_concentration_without_noise():
    """Brute-force DFT of every frame: energy sits within +/-2 bins of a harmonic."""
    profile = dataclasses.replace(PREMIUM_PROFILE, noise_gain=0.0)
    f0 = 220.0
    audio = render_notes([NoteSpec(f0, 1.0, 0.0, False)], profile, 1.0)

    n = np.arange(480)
    window = 0.5 - 0.5 * np.cos(2 * np.pi * n / 480)
    k = np.arange(257)[:, None]
    basis = np.exp(-2j * np.pi * k * np.arange(480)[None, :] / 512)
    x = audio.samples
    power = np.zeros(257)
    for start in range(0, len(x) - 480 + 1, 160):
        power += np.abs(basis @ (x[start : start + 480] * window)) ** 2

    near = np.zeros(257, dtype=bool)
    for h in range(1, 17):
        centre = h * f0 * 512 / 16000
        near |= np.abs(np.arange(257) - centre) <= 2
    assert power[~near].sum() <= 0.01 * power.sum()


def test_peak_normalised():
    for seed in range(10):
        for profile in (PREMIUM_PROFILE, CHEAP_PROFILE):
            peak = np.max(np.abs(render_clip(seed, profile).samples))
            assert peak <= 0.7 + 1e-9
            assert peak == pytest.approx(0.7)


def test_render_is_deterministic():
    a = render_clip(9, CHEAP_PROFILE).samples
    b = render_clip(9, CHEAP_PROFILE).samples
    assert np.array_equal(a, b)


def test_invalid_duration():
    with pytest.raises(InvalidDuration):
        render_clip(0, PREMIUM_PROFILE, 0.5)
    with pytest.raises(InvalidDuration):
        render_clip(0, PREMIUM_PROFILE, 31.0)


def test_other_durations_render():
    assert len(render_clip(0, PREMIUM_PROFILE, 1.0).samples) == 16000
    notes = generate_notes(3, 10.0)
    assert sum(n.duration for n in notes) <= 10.0 + 1e-9


def test_profiles_share_form_and_bound_vibrato():
    assert {f.name for f in dataclasses.fields(PREMIUM_PROFILE)} == {f.name for f in dataclasses.fields(CHEAP_PROFILE)}
    with pytest.raises(ValueError):
        dataclasses.replace(PREMIUM_PROFILE, vibrato_depth=0.05)
    assert PREMIUM_PROFILE.class_label == PREMIUM and CHEAP_PROFILE.class_label == CHEAP


def test_envelope_peaks_at_resonance():
    p: TimbreProfile = CHEAP_PROFILE
    f0 = 112.5  # harmonic 16 lands on 1800 Hz
    assert p.gain_db_at(1800.0, f0) > p.gain_db_at(1700.0, f0)
    assert p.envelope(1, f0) == pytest.approx(10 ** (p.gain_db_at(f0, f0) / 20))


def test_frame_labels():
    notes = [NoteSpec(100.0, 1.0, 0.0, True), NoteSpec(100.0, 1.0, 1.0, False)]
    labels = frame_note_labels(notes, 298)
    assert labels[0] == 1 and labels[150] == 0 and labels[-1] == -1


def test_dataset_counts_and_split(corpus):
    assert len(corpus.entries) == 100
    train, test = corpus.split("train"), corpus.split("test")
    assert len(train) == 80 and len(test) == 20
    for part in (train, test):
        labels = [e.label for e in part]
        assert labels.count(PREMIUM) == labels.count(CHEAP)
    assert not {e.sequence_id for e in train} & {e.sequence_id for e in test}
    validate_manifest(corpus)
    for e in corpus.entries[:4]:
        assert read_wav(corpus.resolve(e)).sample_rate == 16000


def test_manifest_round_trip(corpus, tmp_path):
    path = corpus.write(tmp_path / "m.csv")
    back = DatasetManifest.read(path)
    assert back.entries == corpus.entries
    assert path.read_text().splitlines()[0] == "path,label,split,seed,sequence_id"


def test_manifest_rejects_corrupt_row(corpus, tmp_path):
    path = corpus.write(tmp_path / "m.csv")
    lines = path.read_text().splitlines()
    lines[5] = "wav/x.wav,zero,train,1,2"
    path.write_text("\n".join(lines) + "\n")
    with pytest.raises(ManifestError, match="row 6"):
        DatasetManifest.read(path)


def test_rebuild_is_byte_identical(corpus, tmp_path):
    again = build_dataset(tmp_path, n_sequences=50, seed=0)
    assert again.entries == corpus.entries

    def digest(root):
        h = hashlib.sha256()
        for p in sorted(root.rglob("*")):
            if p.is_file():
                h.update(p.relative_to(root).as_posix().encode())
                h.update(p.read_bytes())
        return h.hexdigest()

    assert digest(tmp_path) == digest(corpus.root_dir)


def test_paired_clips_share_support(corpus):
    by_seq = {}
    for e in corpus.entries:
        by_seq.setdefault(e.sequence_id, {})[e.label] = e
    for pair in list(by_seq.values())[:10]:
        a = stft(read_wav(corpus.resolve(pair[PREMIUM]))).log_mag
        b = stft(read_wav(corpus.resolve(pair[CHEAP]))).log_mag
        assert support_correlation(a, b, SUPPORT_THRESHOLD) >= 0.9


def test_classes_linearly_separable(corpus):
    """Least-squares linear classifier on mean-over-time log magnitude."""

    def features(split):
        entries = corpus.split(split)
        x = np.array([stft(read_wav(corpus.resolve(e))).log_mag.mean(axis=0) for e in entries])
        y = np.array([e.label for e in entries], dtype=float)
        return x, y

    xa, ya = features("train")
    xb, yb = features("test")
    mu, sd = xa.mean(0), xa.std(0) + 1e-9
    design = np.hstack([(xa - mu) / sd, np.ones((len(xa), 1))])
    ridge = 1.0
    w = np.linalg.solve(design.T @ design + ridge * np.eye(design.shape[1]), design.T @ (2 * ya - 1))
    pred = np.hstack([(xb - mu) / sd, np.ones((len(xb), 1))]) @ w > 0
    assert np.mean(pred == (yb == 1)) >= 0.85
