"""Convolutional quality scorer: log-magnitude spectrogram -> score in (0, 1).

Label convention: premium -> 0.0, cheap -> 1.0. Lower scores are "better".
The network is deliberately shallow and ends in global average pooling plus
a single dense unit, which makes class activation maps exact.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .audio_io import read_wav
from .dsp import Spectrogram, StftConfig, crop_or_pad, stft
from .errors import (
    BadMagic,
    CorruptPayload,
    EmptySplit,
    NonFiniteLoss,
    ShapeMismatch,
    VersionUnsupported,
)
from .synthdata import DatasetManifest
from .tensor_nn import (
    Conv2d,
    Dense,
    Dropout,
    GlobalAvgPool,
    Layer,
    MaxPool2x2,
    Network,
    ReLU,
    Sigmoid,
    init_params,
    sgd_step,
)

log = logging.getLogger(__name__)

MODEL_MAGIC = "neqm"
MODEL_VERSION = 1
INPUT_FRAMES = 298
INPUT_BINS = 257
CLIP_SAMPLES = 48000


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 8
    learning_rate: float = 1.0
    dropout_rate: float = 0.3
    seed: int = 0
    reference_quantile: float = 99.0  # train-set percentile mapped to zero input

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must lie in [0, 1)")
        if not 0.0 <= self.reference_quantile <= 100.0:
            raise ValueError("reference_quantile must lie in [0, 100]")


def build_network(dropout_rate: float = 0.3, input_shape=(1, INPUT_FRAMES, INPUT_BINS)) -> Network:
    layers: list[Layer] = [
        Conv2d(1, 8), ReLU(), MaxPool2x2(), Dropout(dropout_rate),
        Conv2d(8, 16), ReLU(), MaxPool2x2(), Dropout(dropout_rate),
        Conv2d(16, 32), ReLU(),
        GlobalAvgPool(), Dense(32, 1), Sigmoid(),
    ]  # fmt: skip
    return Network(layers, input_shape)


@dataclass
class ScorerModel:
    """Scorer network plus the fixed input normalisation.

    The network sees (log_mag - normalizer_offset) / normalizer_scale, two
    scalars fixed from the training set, so no per-clip statistic enters.
    """

    network: Network
    stft_config: StftConfig = field(default_factory=StftConfig)
    normalizer_offset: float = 0.0
    normalizer_scale: float = 1.0
    input_frames: int = INPUT_FRAMES
    input_bins: int = INPUT_BINS
    train_report: dict = field(default_factory=dict)

    @classmethod
    def initial(cls, seed: int = 0, dropout_rate: float = 0.3, offset: float = 0.0, scale: float = 1.0) -> "ScorerModel":
        net = build_network(dropout_rate)
        init_params(net, seed)
        return cls(net, normalizer_offset=offset, normalizer_scale=scale)

    @classmethod
    def zeros(cls, dropout_rate: float = 0.3) -> "ScorerModel":
        return cls(build_network(dropout_rate))

    def prepare(self, log_mag: np.ndarray) -> np.ndarray:
        if log_mag.shape != (self.input_frames, self.input_bins):
            raise ShapeMismatch(
                f"scorer expects {self.input_frames}x{self.input_bins} log-magnitude grid "
                f"(a 3 s clip), got {log_mag.shape[0]}x{log_mag.shape[1]}"
            )
        return ((log_mag - self.normalizer_offset) / self.normalizer_scale)[None, :, :]

    def input_grad(self, dx: np.ndarray) -> np.ndarray:
        """Map a gradient w.r.t. the network input back to log-magnitude units."""
        return dx[0] / self.normalizer_scale

    def score_log_mag(self, log_mag: np.ndarray) -> float:
        out, _ = self.network.forward(self.prepare(log_mag))
        return float(out[0])

    def score_and_grad(self, log_mag: np.ndarray) -> tuple[float, np.ndarray]:
        """Eval-mode score and its gradient w.r.t. the log-magnitude grid."""
        out, cache = self.network.forward(self.prepare(log_mag))
        _, dx = self.network.backward(cache, np.ones(1))
        return float(out[0]), self.input_grad(dx)

    def params_equal(self, other: "ScorerModel") -> bool:
        if len(self.network.layers) != len(other.network.layers):
            return False
        for a, b in zip(self.network.params, other.network.params):
            if a.keys() != b.keys() or any(not np.array_equal(a[k], b[k]) for k in a):
                return False
        return True

    def __eq__(self, other):
        if not isinstance(other, ScorerModel):
            return NotImplemented
        return (
            self.params_equal(other)
            and [l.kind for l in self.network.layers] == [l.kind for l in other.network.layers]
            and self.stft_config == other.stft_config
            and self.normalizer_offset == other.normalizer_offset
            and self.normalizer_scale == other.normalizer_scale
            and self.input_frames == other.input_frames
            and self.input_bins == other.input_bins
            and self.train_report == other.train_report
        )


def score(model: ScorerModel, spec: Spectrogram) -> float:
    return model.score_log_mag(spec.log_mag)


def clip_spectrogram(path, config: StftConfig | None = None) -> Spectrogram:
    """Read a WAV and return the spectrogram of exactly its first 3 s."""
    audio = crop_or_pad(read_wav(path), CLIP_SAMPLES)
    return stft(audio, config)


def load_split(manifest: DatasetManifest, split: str, config: StftConfig | None = None):
    entries = manifest.split(split)
    if not entries:
        raise EmptySplit(f"split {split!r} has no entries")
    specs = np.stack([clip_spectrogram(manifest.resolve(e), config).log_mag for e in entries])
    labels = np.array([float(e.label) for e in entries])
    return specs, labels


def evaluate_arrays(model: ScorerModel, specs: np.ndarray, labels: np.ndarray) -> tuple[float, float]:
    if len(specs) == 0:
        raise EmptySplit("nothing to evaluate")
    scores = np.array([model.score_log_mag(s) for s in specs])
    return accuracy_mse(scores, labels)


def accuracy_mse(scores: np.ndarray, labels: np.ndarray) -> tuple[float, float]:
    """Accuracy with the strict threshold score > 0.5 => cheap; plus MSE."""
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels, dtype=float)
    if scores.size == 0:
        raise EmptySplit("nothing to evaluate")
    acc = float(np.mean((scores > 0.5) == (labels == 1.0)))
    mse = float(np.mean((scores - labels) ** 2))
    return acc, mse


def evaluate(model: ScorerModel, manifest: DatasetManifest, split: str = "test") -> tuple[float, float]:
    specs, labels = load_split(manifest, split, model.stft_config)
    return evaluate_arrays(model, specs, labels)


def input_normalizer(train_x: np.ndarray, quantile: float) -> tuple[float, float]:
    """(offset, scale): a high train-set percentile of log-magnitude and the global std.

    Anchoring zero near the level of the strongest partials, rather than at
    the mean, lets zero-bias ReLU units start out as detectors of prominent
    spectral peaks. Plain SGD from the mean-centred input stalls on a long
    plateau.
    """
    offset = float(np.percentile(train_x, quantile))
    scale = float(np.std(train_x))
    if not scale > 0:
        raise EmptySplit("training spectrograms are constant")
    return offset, scale


def train(config: TrainConfig, manifest: DatasetManifest, data=None) -> ScorerModel:
    """Fit the scorer by minibatch SGD on mean squared error.

    `data` optionally supplies preloaded ((train_x, train_y), (test_x, test_y))
    arrays; otherwise the manifest's WAVs are read.
    """
    if data is None:
        data = (load_split(manifest, "train"), load_split(manifest, "test"))
    (train_x, train_y), (test_x, test_y) = data
    if len(train_x) == 0 or len(test_x) == 0:
        raise EmptySplit("both train and test splits must be non-empty")
    for name, y in (("train", train_y), ("test", test_y)):
        if set(np.unique(y)) != {0.0, 1.0}:
            raise EmptySplit(f"{name} split must contain both classes")

    offset, scale = input_normalizer(train_x, config.reference_quantile)
    model = ScorerModel.initial(config.seed, config.dropout_rate, offset=offset, scale=scale)
    net = model.network
    n = len(train_x)
    history = {"train_mse": [], "test_accuracy": [], "test_mse": []}

    def record():
        _, mse = evaluate_arrays(model, train_x, train_y)
        acc, tmse = evaluate_arrays(model, test_x, test_y)
        history["train_mse"].append(mse)
        history["test_accuracy"].append(acc)
        history["test_mse"].append(tmse)
        return mse, acc

    mse0, acc0 = record()
    log.info("epoch 0: train_mse=%.4f test_acc=%.3f", mse0, acc0)
    batch_index = 0
    for epoch in range(config.epochs):
        order = np.random.default_rng([config.seed, epoch, 1]).permutation(n)
        for start in range(0, n, config.batch_size):
            batch = order[start : start + config.batch_size]
            grads = None
            loss = 0.0
            for k, i in enumerate(batch):
                x = model.prepare(train_x[i])
                out, cache = net.forward(x, "train", seed=[config.seed, epoch, int(i), 2])
                err = float(out[0]) - train_y[i]
                loss += err * err / len(batch)
                g, _ = net.backward(cache, np.array([2.0 * err / len(batch)]), need_input_grad=False)
                grads = g if grads is None else [{p: acc[p] + gi[p] for p in acc} for acc, gi in zip(grads, g)]
            if not np.isfinite(loss):
                raise NonFiniteLoss(batch_index, loss)
            net.set_params(sgd_step(net.params, grads, config.learning_rate))
            batch_index += 1
        mse, acc = record()
        log.info("epoch %d: train_mse=%.4f test_acc=%.3f", epoch + 1, mse, acc)

    model.train_report = {
        "epochs": config.epochs,
        "batch_size": config.batch_size,
        "learning_rate": config.learning_rate,
        "dropout_rate": config.dropout_rate,
        "seed": config.seed,
        "reference_quantile": config.reference_quantile,
        "train_mse": history["train_mse"],
        "test_mse": history["test_mse"],
        "test_accuracy": history["test_accuracy"],
        "final_test_accuracy": history["test_accuracy"][-1],
    }
    return model


# model files ---------------------------------------------------------------


def _fmt_array(a: np.ndarray) -> str:
    return "[" + ",".join(format(float(v), ".17g") for v in np.ravel(a)) + "]"


def _fmt_value(v) -> str:
    if isinstance(v, float):
        return format(v, ".17g")
    if isinstance(v, list):
        return "[" + ",".join(_fmt_value(x) for x in v) + "]"
    if isinstance(v, dict):
        return "{" + ",".join(f"{json.dumps(k)}:{_fmt_value(x)}" for k, x in v.items()) + "}"
    return json.dumps(v)


def _layer_record(layer: Layer) -> dict:
    rec: dict = {"kind": layer.kind}
    if isinstance(layer, (Conv2d, Dense)):
        rec["shape"] = list(layer.params["weights"].shape)
        rec["weights"] = layer.params["weights"]
        rec["biases"] = layer.params["biases"]
    else:
        rec["shape"] = []
        rec["weights"] = []
        rec["biases"] = []
    if isinstance(layer, Dropout):
        rec["rate"] = layer.rate
    return rec


def dumps_model(model: ScorerModel) -> str:
    parts = [
        f'"magic":{json.dumps(MODEL_MAGIC)}',
        f'"version":{MODEL_VERSION}',
        f'"stft_config":{_fmt_value(model.stft_config.to_dict())}',
        f'"normalizer_offset":{format(model.normalizer_offset, ".17g")}',
        f'"normalizer_scale":{format(model.normalizer_scale, ".17g")}',
        f'"input_frames":{model.input_frames}',
        f'"input_bins":{model.input_bins}',
    ]
    layers = []
    for layer in model.network.layers:
        rec = _layer_record(layer)
        fields = [f'"kind":{json.dumps(rec["kind"])}', f'"shape":{json.dumps(rec["shape"])}']
        fields.append(f'"weights":{_fmt_array(rec["weights"])}')
        fields.append(f'"biases":{_fmt_array(rec["biases"])}')
        if "rate" in rec:
            fields.append(f'"rate":{format(rec["rate"], ".17g")}')
        layers.append("{" + ",".join(fields) + "}")
    parts.append('"layers":[\n' + ",\n".join(layers) + "\n]")
    parts.append(f'"train_report":{_fmt_value(model.train_report)}')
    return "{\n" + ",\n".join(parts) + "\n}\n"


def save_model(model: ScorerModel, path) -> None:
    Path(path).write_text(dumps_model(model), encoding="utf-8")


def _build_layer(rec: dict) -> Layer:
    kind = rec["kind"]
    shape = tuple(rec["shape"])
    if kind in ("conv2d", "dense"):
        weights = np.array(rec["weights"], dtype=np.float64)
        biases = np.array(rec["biases"], dtype=np.float64)
        if weights.size != int(np.prod(shape)) or biases.size != shape[0]:
            raise CorruptPayload(f"{kind} layer payload does not match shape {list(shape)}")
        weights = weights.reshape(shape)
        if kind == "conv2d":
            return Conv2d(shape[1], shape[0], weights, biases)
        return Dense(shape[1], shape[0], weights, biases)
    simple = {"relu": ReLU, "maxpool2x2": MaxPool2x2, "global_avg_pool": GlobalAvgPool, "sigmoid": Sigmoid}
    if kind in simple:
        return simple[kind]()
    if kind == "dropout":
        return Dropout(float(rec["rate"]))
    raise CorruptPayload(f"unknown layer kind {kind!r}")


def loads_model(text: str) -> ScorerModel:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise CorruptPayload(f"model file is not valid JSON: {exc}") from exc
    if not isinstance(doc, dict) or doc.get("magic") != MODEL_MAGIC:
        raise BadMagic(f"expected magic {MODEL_MAGIC!r}")
    if doc.get("version") != MODEL_VERSION:
        raise VersionUnsupported(f"model file version {doc.get('version')!r} unsupported (need {MODEL_VERSION})")
    try:
        frames, bins = int(doc["input_frames"]), int(doc["input_bins"])
        layers = [_build_layer(rec) for rec in doc["layers"]]
        network = Network(layers, (1, frames, bins))
        return ScorerModel(
            network=network,
            stft_config=StftConfig(**doc["stft_config"]),
            normalizer_offset=float(doc["normalizer_offset"]),
            normalizer_scale=float(doc["normalizer_scale"]),
            input_frames=frames,
            input_bins=bins,
            train_report=doc.get("train_report", {}),
        )
    except (KeyError, TypeError, ValueError, IndexError) as exc:
        if isinstance(exc, CorruptPayload):
            raise
        raise CorruptPayload(f"malformed model payload: {exc!r}") from exc


def load_model(path) -> ScorerModel:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except UnicodeDecodeError as exc:
        raise CorruptPayload(f"{path}: not UTF-8") from exc
    return loads_model(text)
