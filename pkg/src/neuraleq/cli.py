"""Command-line entry point: neuraleq {synth,train,transform,score,saliency,eval}.

Results go to stdout as key=value lines; diagnostics go to stderr.
Exit codes: 0 ok, 2 usage/format/IO error, 3 training failure,
4 mask optimization failure.

Every subcommand accepts --config FILE.json; keys are the long option names
with dashes replaced by underscores, and flags given on the command line
override the file.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import align_eval, audio_io, maskopt, saliency, scorer, synthdata
from .dsp import apply_mask, istft, stft
from .errors import ModelFileError, NeuralEqError, NonFiniteLoss, NonFiniteObjective

log = logging.getLogger("neuraleq")

EXIT_OK, EXIT_USAGE, EXIT_TRAIN, EXIT_OPTIM = 0, 2, 3, 4

UNCONSTRAINED_WARNING = "unconstrained optimization may produce noisy masks"

DEFAULTS = {
    "synth": {"sequences": 50, "seed": 0, "duration": 3.0},
    "train": {
        "epochs": scorer.TrainConfig.epochs,
        "batch_size": scorer.TrainConfig.batch_size,
        "lr": scorer.TrainConfig.learning_rate,
        "dropout": scorer.TrainConfig.dropout_rate,
        "seed": scorer.TrainConfig.seed,
    },
    "transform": {
        "alpha": maskopt.OptimConfig.alpha,
        "beta": maskopt.OptimConfig.beta,
        "lr": maskopt.OptimConfig.learning_rate,
        "iters": maskopt.OptimConfig.max_iters,
        "target": maskopt.OptimConfig.target_score,
        "init": "blocks",
        "sigma": 0.1,
        "init_seed": 0,
        "n_blocks": maskopt.BlockInitSpec.n_blocks,
        "smooth": maskopt.BlockInitSpec.smoothing_kernel,
    },
    "saliency": {"method": "cam"},
}


class UsageError(Exception):
    pass


def _fmt(v) -> str:
    return format(v, ".17g") if isinstance(v, float) else str(v)


def warn(msg: str) -> None:
    print(f"warning: {msg}", file=sys.stderr)


def emit(**pairs) -> None:
    for k, v in pairs.items():
        print(f"{k}={_fmt(v)}")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="neuraleq",
        description="Learned-loss adaptive EQ: train a spectrogram quality scorer and optimise per-input masks against it.",
    )
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, help_text):
        sp = sub.add_parser(name, help=help_text, description=help_text)
        sp.add_argument("--config", type=Path, help="JSON file of option values (flags override it)")
        sp.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS, help="log progress to stderr")
        return sp

    d = DEFAULTS["synth"]
    sp = add("synth", "render the two-timbre synthetic corpus")
    sp.add_argument("--out", type=Path, required=True, help="output directory")
    sp.add_argument("--sequences", type=int, help=f"number of note sequences (default {d['sequences']})")
    sp.add_argument("--seed", type=int, help=f"corpus seed (default {d['seed']})")
    sp.add_argument("--duration", type=float, help=f"clip length in seconds (default {d['duration']})")

    d = DEFAULTS["train"]
    sp = add("train", "train the scorer on a manifest")
    sp.add_argument("--manifest", type=Path, required=True)
    sp.add_argument("--model", type=Path, required=True, help="output model file")
    sp.add_argument("--epochs", type=int, help=f"default {d['epochs']}")
    sp.add_argument("--batch-size", type=int, help=f"default {d['batch_size']}")
    sp.add_argument("--lr", type=float, help=f"SGD learning rate (default {d['lr']})")
    sp.add_argument("--dropout", type=float, help=f"dropout rate (default {d['dropout']})")
    sp.add_argument("--seed", type=int, help=f"default {d['seed']}")

    d = DEFAULTS["transform"]
    sp = add("transform", "optimise a mask for one clip and render the result")
    sp.add_argument("--model", type=Path, required=True)
    sp.add_argument("--in", dest="input", type=Path, required=True, help="input WAV (first 3 s used)")
    sp.add_argument("--out", type=Path, required=True, help="output WAV")
    sp.add_argument("--alpha", type=float, help=f"proximity weight (default {d['alpha']})")
    sp.add_argument("--beta", type=float, help=f"mask variance weight (default {d['beta']})")
    sp.add_argument("--lr", type=float, help=f"step size (default {d['lr']})")
    sp.add_argument("--iters", type=int, help=f"iteration budget (default {d['iters']})")
    sp.add_argument("--target", type=float, help=f"stop once the score drops below this (default {d['target']})")
    sp.add_argument("--init", choices=("blocks", "gaussian", "zeros"), help=f"default {d['init']}")
    sp.add_argument("--sigma", type=float, help=f"gaussian init std (default {d['sigma']})")
    sp.add_argument("--init-seed", type=int, help=f"seed for blocks/gaussian init (default {d['init_seed']})")
    sp.add_argument("--n-blocks", type=int, help=f"blocks init count (default {d['n_blocks']})")
    sp.add_argument("--smooth", type=int, help=f"blocks init box-filter size, odd (default {d['smooth']})")
    sp.add_argument("--export-mask", metavar="PFX", help="write PFX.csv, PFX.pgm and PFX_trajectory.csv")

    sp = add("score", "score one clip")
    sp.add_argument("--model", type=Path, required=True)
    sp.add_argument("--in", dest="input", type=Path, required=True)

    sp = add("saliency", "saliency map of one clip")
    sp.add_argument("--model", type=Path, required=True)
    sp.add_argument("--in", dest="input", type=Path, required=True)
    sp.add_argument("--method", choices=("cam", "gradient"), help="default cam")
    sp.add_argument("--out", required=True, metavar="PFX", help="writes PFX.csv, PFX_pos.pgm, PFX_neg.pgm")

    sp = add("eval", "DTW-align two clips and report spectral distances")
    sp.add_argument("--a", type=Path, required=True)
    sp.add_argument("--b", type=Path, required=True)
    sp.add_argument("--path-csv", type=Path, help="write the alignment path here")
    return p


def resolve(args: argparse.Namespace) -> dict:
    """Merge defaults < config file < explicit flags."""
    opts = dict(DEFAULTS.get(args.command, {}))
    if args.config is not None:
        try:
            file_opts = json.loads(args.config.read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {args.config}: {exc}") from exc
        if not isinstance(file_opts, dict):
            raise UsageError(f"config {args.config} must hold a JSON object")
        opts.update(file_opts)
    for k, v in vars(args).items():
        if v is not None and k not in ("command", "config", "verbose"):
            opts[k] = v
    return opts


def cmd_synth(o: dict) -> int:
    manifest = synthdata.build_dataset(
        o["out"], n_sequences=int(o["sequences"]), seed=int(o["seed"]), clip_duration=float(o["duration"])
    )
    n_p = sum(e.label == synthdata.PREMIUM for e in manifest.entries)
    n_c = len(manifest.entries) - n_p
    emit(manifest=manifest.root_dir / manifest.MANIFEST_NAME, clips=len(manifest.entries), premium=n_p, cheap=n_c)
    emit(summary=f"{len(manifest.entries)} clips ({n_p} premium / {n_c} cheap)")
    return EXIT_OK


def cmd_train(o: dict) -> int:
    config = scorer.TrainConfig(
        epochs=int(o["epochs"]),
        batch_size=int(o["batch_size"]),
        learning_rate=float(o["lr"]),
        dropout_rate=float(o["dropout"]),
        seed=int(o["seed"]),
    )
    manifest = synthdata.DatasetManifest.read(o["manifest"])
    model = scorer.train(config, manifest)
    scorer.save_model(model, o["model"])
    emit(model=o["model"], train_mse=model.train_report["train_mse"][-1],
         test_accuracy=model.train_report["final_test_accuracy"])  # fmt: skip
    return EXIT_OK


def _load_clip(path):
    audio = audio_io.read_wav(path)
    if len(audio.samples) < scorer.CLIP_SAMPLES:
        raise UsageError(f"{path}: {audio.duration:.3f} s is shorter than the 3 s the scorer needs")
    if len(audio.samples) > scorer.CLIP_SAMPLES:
        warn(f"{path}: longer than 3 s, using the first 3 s")
        audio = audio_io.AudioBuffer(audio.samples[: scorer.CLIP_SAMPLES])
    return audio


def cmd_transform(o: dict) -> int:
    if o["init"] == "blocks":
        init = maskopt.BlockInitSpec(n_blocks=int(o["n_blocks"]), smoothing_kernel=int(o["smooth"]), seed=int(o["init_seed"]))
    elif o["init"] == "gaussian":
        init = maskopt.GaussianInit(sigma=float(o["sigma"]), seed=int(o["init_seed"]))
    else:
        init = maskopt.ZerosInit()
    config = maskopt.OptimConfig(
        alpha=float(o["alpha"]),
        beta=float(o["beta"]),
        learning_rate=float(o["lr"]),
        max_iters=int(o["iters"]),
        target_score=float(o["target"]),
        init=init,
    )
    if o["init"] == "gaussian" and config.alpha == 0 and config.beta == 0:
        warn(UNCONSTRAINED_WARNING)

    model = scorer.load_model(o["model"])
    spec = stft(_load_clip(o["input"]), model.stft_config)
    result = maskopt.optimize_mask(model, spec, config)
    transformed = apply_mask(spec, result.mask)
    audio_io.write_wav(o["out"], istft(transformed))

    if o.get("export_mask"):
        pfx = o["export_mask"]
        audio_io.write_grid_csv(f"{pfx}.csv", result.mask.values)
        audio_io.write_pgm(f"{pfx}.pgm", result.mask.values)
        maskopt.write_trajectory_csv(f"{pfx}_trajectory.csv", result)

    emit(
        initial_score=result.initial.score,
        final_score=scorer.score(model, transformed),
        iterations=result.iterations_run,
        stopped_reason=result.stopped_reason,
        mask_total_variation=maskopt.mask_total_variation(result.mask),
        out=o["out"],
    )
    return EXIT_OK


def cmd_score(o: dict) -> int:
    model = scorer.load_model(o["model"])
    spec = stft(_load_clip(o["input"]), model.stft_config)
    emit(score=scorer.score(model, spec))
    return EXIT_OK


def cmd_saliency(o: dict) -> int:
    model = scorer.load_model(o["model"])
    spec = stft(_load_clip(o["input"]), model.stft_config)
    if o["method"] == "cam":
        smap = saliency.cam(model, spec)
    else:
        smap = saliency.input_gradient_saliency(model, spec)
    pfx = o["out"]
    audio_io.write_grid_csv(f"{pfx}.csv", smap.values)
    pos, neg = audio_io.write_signed_pgms(pfx, smap.values)
    emit(method=smap.method, csv=f"{pfx}.csv", pgm_pos=pos, pgm_neg=neg,
         min=float(smap.values.min()), max=float(smap.values.max()))  # fmt: skip
    return EXIT_OK


def cmd_eval(o: dict) -> int:
    a = stft(audio_io.read_wav(o["a"]))
    b = stft(audio_io.read_wav(o["b"]))
    path = align_eval.dtw_align(a, b)
    mean_dist, lsd = align_eval.aligned_distance(a, b, path)
    if o.get("path_csv"):
        align_eval.write_path_csv(o["path_csv"], path)
    emit(dtw_cost=path.cost, mean_frame_dist=mean_dist, log_spectral_dist=lsd, path_length=len(path.steps))
    return EXIT_OK


COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "transform": cmd_transform,
    "score": cmd_score,
    "saliency": cmd_saliency,
    "eval": cmd_eval,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        opts = resolve(args)
        # divergence is detected explicitly and reported with its own exit code
        with np.errstate(over="ignore", invalid="ignore"):
            return COMMANDS[args.command](opts)
    except NonFiniteLoss as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_TRAIN
    except NonFiniteObjective as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_OPTIM
    except (UsageError, NeuralEqError, ModelFileError, OSError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
