"""End-to-end acceptance checks on the default 50-sequence synthetic corpus.

Each test records a PASS/FAIL line through the `criterion` fixture; the lines
are repeated in the terminal summary. The corpus, the default-trained model
and the per-clip mask optimisations are computed once per session.
"""

import contextlib
import io
import time
from pathlib import Path

import numpy as np
import pytest

from neuraleq import cli, saliency
from neuraleq.align_eval import aligned_distance, dtw_align
from neuraleq.dsp import AudioBuffer, Mask, Spectrogram, apply_mask, istft, snr_db, stft
from neuraleq.gradcheck import check_network
from neuraleq.maskopt import (
    BlockInitSpec,
    GaussianInit,
    OptimConfig,
    check_objective_gradient,
    init_mask_blocks,
    mask_total_variation,
    optimize_mask,
)
from neuraleq.scorer import clip_spectrogram, load_model
from neuraleq.synthdata import CHEAP, PREMIUM, DatasetManifest, frame_note_labels, generate_notes
from neuraleq.tensor_nn import Conv2d, Dense, Dropout, GlobalAvgPool, MaxPool2x2, Network, ReLU, Sigmoid, init_params


def run_cli(*argv) -> tuple[int, dict]:
    buf = io.StringIO()
    with contextlib.redirect_stdout(buf):
        code = cli.main([str(a) for a in argv])
    pairs = dict(line.split("=", 1) for line in buf.getvalue().splitlines() if "=" in line)
    return code, pairs


@pytest.fixture(scope="session")
def workdir(tmp_path_factory) -> Path:
    return tmp_path_factory.mktemp("acceptance")


@pytest.fixture(scope="session")
def corpus(workdir) -> DatasetManifest:
    code, _ = run_cli("synth", "--out", workdir / "data")
    assert code == 0
    return DatasetManifest.read(workdir / "data" / "manifest.csv")


@pytest.fixture(scope="session")
def trained(workdir, corpus):
    t0 = time.perf_counter()
    code, out = run_cli("train", "--manifest", workdir / "data" / "manifest.csv", "--model", workdir / "model.json")
    seconds = time.perf_counter() - t0
    assert code == 0
    return load_model(workdir / "model.json"), float(out["test_accuracy"]), seconds


def split_entries(corpus, label):
    return [e for e in corpus.split("test") if e.label == label]


def lsd(a: Spectrogram, b: Spectrogram) -> float:
    return aligned_distance(a, b, dtw_align(a, b))[1]


@pytest.fixture(scope="session")
def transforms(corpus, trained):
    """Default (blocks) and gaussian/unconstrained runs on every cheap test clip."""
    model = trained[0]
    twins = {e.sequence_id: e for e in split_entries(corpus, PREMIUM)}
    runs = []
    for e in split_entries(corpus, CHEAP):
        x = clip_spectrogram(corpus.resolve(e))
        twin = clip_spectrogram(corpus.resolve(twins[e.sequence_id]))
        blocks = optimize_mask(model, x, OptimConfig())
        gauss = optimize_mask(model, x, OptimConfig(alpha=0.0, beta=0.0, init=GaussianInit(0.1, 0)))
        rendered = stft(istft(apply_mask(x, blocks.mask)))
        runs.append({"blocks": blocks, "gauss": gauss, "before": lsd(x, twin), "after": lsd(rendered, twin)})
    return runs


def test_criterion_1_scorer_discrimination(criterion, trained):
    _, acc, seconds = trained
    ok = criterion(1, acc >= 0.90 and seconds < 900, f"test_accuracy={acc:.3f} (>= 0.90), train {seconds:.0f} s (< 900 s)")
    assert ok


def test_default_training_loss_falls_over_first_epochs(trained):
    mse = trained[0].train_report["train_mse"][:6]
    assert len(mse) == 6
    assert all(b <= a for a, b in zip(mse, mse[1:]))


def test_criterion_2_transform_efficacy(criterion, transforms):
    n = len(transforms)
    reached = sum(r["blocks"].stopped_reason == "target_reached" and r["blocks"].iterations_run <= 2000 for r in transforms)
    closer = sum(r["after"] < r["before"] for r in transforms)
    ok = criterion(
        2,
        reached >= 0.8 * n and closer >= 0.7 * n,
        f"target reached {reached}/{n} (>= 80%), closer to premium twin {closer}/{n} (>= 70%)",
    )
    assert ok


def test_criterion_3_adversarial_contrast(criterion, transforms):
    runs = transforms[:10]
    ratios = [mask_total_variation(r["gauss"].mask) / mask_total_variation(r["blocks"].mask) for r in runs]
    both = all(r["blocks"].stopped_reason == r["gauss"].stopped_reason == "target_reached" for r in runs)
    ok = criterion(
        3,
        len(runs) == 10 and both and min(ratios) >= 5.0,
        f"{len(runs)} pairs, all reach target={both}, min TV ratio {min(ratios):.1f} (>= 5)",
    )
    assert ok


LAYERS = [
    (lambda: Conv2d(2, 3), (2, 6, 5)),
    (ReLU, (2, 6, 5)),
    (MaxPool2x2, (2, 7, 5)),
    (GlobalAvgPool, (3, 4, 5)),
    (lambda: Dense(7, 4), (7,)),
    (Sigmoid, (9,)),
    (lambda: Dropout(0.4), (2, 6, 5)),
]


def test_criterion_4_gradient_correctness(criterion, corpus, trained):
    model = trained[0]
    entries = corpus.split("test")
    worst_layer, worst_obj, checked, failures = 0.0, 0.0, 0, 0
    for seed in range(5):
        rng = np.random.default_rng(seed)
        for make, shape in LAYERS:
            net = Network([make()], shape)
            init_params(net, seed)
            for p in net.params:
                if "biases" in p:
                    p["biases"][:] = rng.normal(size=p["biases"].shape)
            x = rng.normal(size=shape)
            rep = check_network(net, x, rng.normal(size=net.output_shape), seed=seed, mode="train", dropout_seed=seed)
            worst_layer = max(worst_layer, rep.max_rel_error)
            failures += len(rep.failures)
        x = clip_spectrogram(corpus.resolve(entries[seed]))
        # the whole trained scorer: at h = 1e-5 round-off in f(+h) - f(-h) exceeds 1e-5 of its smallest gradients
        rep = check_network(model.network, model.prepare(x.log_mag), np.ones(1), n_params=100, n_inputs=50, h=1e-4, seed=seed)
        worst_layer = max(worst_layer, rep.max_rel_error)
        failures += len(rep.failures)
        m = init_mask_blocks(BlockInitSpec(seed=seed), x.log_mag.shape)
        rep = check_objective_gradient(model, x, m, 1e-4, 1e-2, n_coords=200, seed=seed)
        worst_obj = max(worst_obj, rep.max_rel_error)
        failures += len(rep.failures)
        checked += rep.checked
    ok = criterion(
        4,
        failures == 0 and worst_layer < 1e-5 and worst_obj < 1e-4 and checked > 0,
        f"5 seeds, layer max rel err {worst_layer:.1e} (< 1e-5), objective max rel err {worst_obj:.1e} (< 1e-4) "
        f"over {checked} unskipped coordinates",
    )
    assert ok


def test_criterion_5_reconstruction(criterion):
    snrs, identical = [], True
    interior = slice(480, 48000 - 480)
    for seed in range(20):
        clip = AudioBuffer(np.random.default_rng(seed).uniform(-0.9, 0.9, 48000))
        spec = stft(clip)
        snrs.append(snr_db(clip.samples[interior], istft(spec).samples[interior]))
        passed = apply_mask(spec, Mask.zeros(spec.log_mag.shape))
        identical &= np.array_equal(passed.log_mag, spec.log_mag) and np.array_equal(passed.phase, spec.phase)
    ok = criterion(5, min(snrs) >= 80.0 and identical, f"min interior SNR {min(snrs):.1f} dB (>= 80), zero mask bit-identical={identical}")
    assert ok


def all_paths(n: int, m: int):
    """Every monotone path from (0, 0) to (n-1, m-1), by exhaustive recursion."""

    def extend(path):
        i, j = path[-1]
        if (i, j) == (n - 1, m - 1):
            yield path
            return
        for di, dj in ((1, 1), (1, 0), (0, 1)):
            if i + di < n and j + dj < m:
                yield from extend(path + [(i + di, j + dj)])

    yield from extend([(0, 0)])


def test_criterion_6_dtw_oracle(criterion):
    rng = np.random.default_rng(123)
    matches = 0
    for _ in range(100):
        n, m = rng.integers(1, 9, size=2)
        a, b = rng.normal(size=(n, 3)), rng.normal(size=(m, 3))
        d = np.linalg.norm(a[:, None, :] - b[None, :, :], axis=2)
        best = min(sum(d[i, j] for i, j in p) for p in all_paths(n, m))
        got = dtw_align(a, b)
        own = sum(d[i, j] for i, j in got.steps)
        matches += abs(got.cost - best) <= 1e-12 * max(1.0, best) and abs(own - got.cost) <= 1e-12 * max(1.0, own)
    ok = criterion(6, matches == 100, f"{matches}/100 instances equal the exhaustive optimum")
    assert ok


def test_criterion_7_saliency(criterion, corpus, trained):
    model = trained[0]
    passed, total = 0, 0
    for e in split_entries(corpus, PREMIUM):
        x = clip_spectrogram(corpus.resolve(e))
        labels = frame_note_labels(generate_notes(e.seed), x.log_mag.shape[0])
        contrast = saliency.frame_contrast(saliency.cam(model, x).values, labels)
        if contrast is None:
            continue
        total += 1
        passed += contrast[0] > contrast[1]
    ok = criterion(7, total > 0 and passed >= 0.7 * total, f"vibrato |CAM| > steady |CAM| on {passed}/{total} premium test clips (>= 70%)")
    assert ok


def same_tree(a: Path, b: Path) -> bool:
    fa = sorted(p.relative_to(a) for p in a.rglob("*") if p.is_file())
    fb = sorted(p.relative_to(b) for p in b.rglob("*") if p.is_file())
    return fa == fb and all((a / f).read_bytes() == (b / f).read_bytes() for f in fa)


def test_criterion_8_determinism(criterion, workdir, corpus):
    code, _ = run_cli("synth", "--out", workdir / "data_again")
    synth_ok = code == 0 and same_tree(workdir / "data", workdir / "data_again")

    manifest = workdir / "data" / "manifest.csv"
    for name in ("a", "b"):
        assert run_cli("train", "--manifest", manifest, "--model", workdir / f"det_{name}.json", "--epochs", 2)[0] == 0
    train_ok = (workdir / "det_a.json").read_bytes() == (workdir / "det_b.json").read_bytes()

    src = corpus.resolve(split_entries(corpus, CHEAP)[0])
    for name in ("a", "b"):
        out = workdir / f"tr_{name}"
        out.mkdir()
        code, _ = run_cli("transform", "--model", workdir / "det_a.json", "--in", src, "--out", out / "o.wav", "--export-mask", out / "mask")
        assert code == 0
    transform_ok = same_tree(workdir / "tr_a", workdir / "tr_b")

    ok = criterion(8, synth_ok and train_ok and transform_ok, f"synth={synth_ok} train={train_ok} transform={transform_ok} byte-identical")
    assert ok


def test_criterion_9_objective_monotone(criterion, transforms):
    results = [r[k] for r in transforms for k in ("blocks", "gauss")]
    bad = 0
    for res in results:
        values = [res.initial.value] + [t.value for t in res.trajectory]
        bad += any(b > a for a, b in zip(values, values[1:]))
    ok = criterion(9, bad == 0, f"{len(results) - bad}/{len(results)} trajectories non-increasing")
    assert ok
