"""Shared-trunk multi-task network: emotion + gender classification, age regression.

One trunk (a two-block 1-D CNN or a plain three-layer FCN) feeds three small
dense heads off the same 56-d representation. Training minimizes the plain sum
of the three task losses: cross-entropy for emotion and gender, MSE for age.
Age is learned on a z-score (training-set statistics) so its loss lives on the
same scale as the cross-entropies, and is converted back to years for output.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from . import nn
from .features import FeatureType

EMOTIONS = ("anger", "disgust", "fear", "happy", "neutral", "sad")
GENDERS = ("female", "male")

AGE_MIN_YEARS = 1.0
AGE_MAX_YEARS = 100.0

FCN_WIDTHS = (200, 128, 56)


class ModelConfigError(ValueError):
    pass


class TrainingAbort(RuntimeError):
    """Training hit a non-finite loss and stopped."""


@dataclass(frozen=True)
class ModelConfig:
    arch: str  # "fcn" or "cnn"
    feature_type: FeatureType
    seed: int = 0
    conv_channels: tuple = (32, 64)
    conv_kernel: int = 3
    fcn_widths: tuple = FCN_WIDTHS
    n_emotions: int = len(EMOTIONS)
    n_genders: int = len(GENDERS)

    @property
    def input_dim(self) -> int:
        return self.feature_type.dim

    def validate(self) -> None:
        if self.arch not in ("fcn", "cnn"):
            raise ModelConfigError(f"unknown architecture {self.arch!r}; expected fcn or cnn")
        if tuple(self.fcn_widths) != FCN_WIDTHS:
            raise ModelConfigError(f"trunk widths are fixed at {FCN_WIDTHS}")
        if self.arch == "cnn":
            self.cnn_flat_width()  # raises when input_dim is too small

    def cnn_flat_width(self) -> int:
        """Flattened width after two conv(k)/pool(2,2) blocks on input_dim."""
        length = self.input_dim
        for _ in range(2):
            length = (length - self.conv_kernel + 1) // 2
            if length < 1:
                raise ModelConfigError(
                    f"input_dim {self.input_dim} too small for two conv/pool blocks"
                )
        return self.conv_channels[1] * length


def param_order(config: ModelConfig) -> list[tuple[str, tuple]]:
    """Names and shapes of every trainable tensor, in canonical order."""
    config.validate()
    order: list[tuple[str, tuple]] = []
    if config.arch == "cnn":
        c1, c2 = config.conv_channels
        k = config.conv_kernel
        order += [
            ("conv1.kernel", (c1, 1, k)),
            ("conv1.bias", (c1,)),
            ("conv2.kernel", (c2, c1, k)),
            ("conv2.bias", (c2,)),
        ]
        width = config.cnn_flat_width()
    else:
        width = config.input_dim
    for i, out in enumerate(config.fcn_widths, start=1):
        order += [(f"fc{i}.weight", (out, width)), (f"fc{i}.bias", (out,))]
        width = out
    order += [
        ("head_emotion.weight", (config.n_emotions, width)),
        ("head_emotion.bias", (config.n_emotions,)),
        ("head_gender.weight", (config.n_genders, width)),
        ("head_gender.bias", (config.n_genders,)),
        ("head_age.weight", (1, width)),
        ("head_age.bias", (1,)),
    ]
    return order


def config_hash(config: ModelConfig) -> str:
    payload = json.dumps(config_to_dict(config), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(payload.encode()).hexdigest()[:16]


def config_to_dict(config: ModelConfig) -> dict:
    return {
        "arch": config.arch,
        "feature_type": config.feature_type.name.lower(),
        "input_dim": config.input_dim,
        "seed": config.seed,
        "conv_channels": list(config.conv_channels),
        "conv_kernel": config.conv_kernel,
        "fcn_widths": list(config.fcn_widths),
        "n_emotions": config.n_emotions,
        "n_genders": config.n_genders,
    }


def config_from_dict(d: dict) -> ModelConfig:
    return ModelConfig(
        arch=d["arch"],
        feature_type=FeatureType.from_name(d["feature_type"]),
        seed=int(d["seed"]),
        conv_channels=tuple(d["conv_channels"]),
        conv_kernel=int(d["conv_kernel"]),
        fcn_widths=tuple(d["fcn_widths"]),
        n_emotions=int(d["n_emotions"]),
        n_genders=int(d["n_genders"]),
    )


@dataclass
class ModelParams:
    config: ModelConfig
    weights: dict[str, np.ndarray]
    feature_mean: np.ndarray
    feature_std: np.ndarray
    age_mean: float = 0.0
    age_std: float = 1.0
    emotion_vocab: tuple = EMOTIONS
    gender_vocab: tuple = GENDERS
    provenance: dict = field(default_factory=dict)

    @property
    def model_id(self) -> str:
        return self.provenance.get("config_hash", config_hash(self.config))


@dataclass
class TaskOutputs:
    emotion_probs: np.ndarray  # (B, 6)
    gender_probs: np.ndarray  # (B, 2)
    age_z: np.ndarray  # (B,)
    age_years: np.ndarray  # (B,)


@dataclass
class LossParts:
    emotion: float
    gender: float
    age: float

    @property
    def total(self) -> float:
        return self.emotion + self.gender + self.age


@dataclass
class Prediction:
    emotion_label: str
    emotion_probs: dict[str, float]
    gender_label: str
    gender_probs: dict[str, float]
    age_years: float


@dataclass
class EvalMetrics:
    emotion_acc: float  # percent
    gender_acc: float  # percent
    age_rmse: float  # years
    emotion_confusion: np.ndarray  # (6, 6), rows = true class


def build_model(config: ModelConfig) -> ModelParams:
    """Seeded He-uniform trunk / Glorot-uniform head initialization, zero biases."""
    config.validate()
    rng = np.random.default_rng(config.seed)
    weights: dict[str, np.ndarray] = {}
    for name, shape in param_order(config):
        if name.endswith(".bias"):
            weights[name] = np.zeros(shape)
            continue
        if name.startswith("conv"):
            fan_in = shape[1] * shape[2]
            fan_out = shape[0] * shape[2]
        else:
            fan_in = shape[1]
            fan_out = shape[0]
        if name.startswith("head_"):
            limit = np.sqrt(6.0 / (fan_in + fan_out))
        else:
            limit = np.sqrt(6.0 / fan_in)
        weights[name] = rng.uniform(-limit, limit, size=shape)
    dim = config.input_dim
    return ModelParams(
        config=config,
        weights=weights,
        feature_mean=np.zeros(dim),
        feature_std=np.ones(dim),
    )


def _trunk_forward(params: ModelParams, xz: np.ndarray) -> tuple[np.ndarray, dict]:
    w = params.weights
    cache: dict = {}
    if params.config.arch == "cnn":
        h = xz[:, None, :]
        for i in (1, 2):
            cache[f"conv{i}.x"] = h
            z = nn.conv1d_forward(h, w[f"conv{i}.kernel"], w[f"conv{i}.bias"])
            cache[f"conv{i}.z"] = z
            a = nn.relu(z)
            h, arg = nn.maxpool1d_forward(a)
            cache[f"pool{i}.arg"] = arg
            cache[f"pool{i}.in_len"] = a.shape[2]
        cache["flat.shape"] = h.shape
        h = h.reshape(h.shape[0], -1)
    else:
        h = xz
    for i in (1, 2, 3):
        cache[f"fc{i}.x"] = h
        z = nn.dense_forward(h, w[f"fc{i}.weight"], w[f"fc{i}.bias"])
        cache[f"fc{i}.z"] = z
        h = nn.relu(z)
    cache["trunk.out"] = h
    return h, cache


def forward(params: ModelParams, x) -> tuple[TaskOutputs, dict]:
    """Run the trunk once and all three heads on its output.

    Accepts one vector or a batch; outputs always carry a batch axis. Inputs
    are standardized with the stored per-dimension statistics.
    """
    x2 = np.atleast_2d(np.asarray(x, dtype=np.float64))
    if x2.shape[1] != params.config.input_dim:
        raise nn.ShapeError(
            f"input has {x2.shape[1]} dims, model expects {params.config.input_dim}"
        )
    xz = (x2 - params.feature_mean) / params.feature_std
    h, cache = _trunk_forward(params, xz)
    w = params.weights
    emotion_probs = nn.softmax(nn.dense_forward(h, w["head_emotion.weight"], w["head_emotion.bias"]))
    gender_probs = nn.softmax(nn.dense_forward(h, w["head_gender.weight"], w["head_gender.bias"]))
    age_z = nn.dense_forward(h, w["head_age.weight"], w["head_age.bias"])[:, 0]
    outputs = TaskOutputs(
        emotion_probs=emotion_probs,
        gender_probs=gender_probs,
        age_z=age_z,
        age_years=age_z * params.age_std + params.age_mean,
    )
    return outputs, cache


def total_loss(outputs: TaskOutputs, y_emotion, y_gender, age_z) -> LossParts:
    """Unweighted sum of the three per-task batch-mean losses."""
    return LossParts(
        emotion=nn.cross_entropy(outputs.emotion_probs, y_emotion),
        gender=nn.cross_entropy(outputs.gender_probs, y_gender),
        age=nn.mse(outputs.age_z, age_z),
    )


def backward(
    params: ModelParams,
    cache: dict,
    outputs: TaskOutputs,
    y_emotion,
    y_gender,
    age_z,
    loss_weights=(1.0, 1.0, 1.0),
) -> dict[str, np.ndarray]:
    """Gradients of the summed loss for every weight tensor.

    The trunk gradient is the sum of the three head-path gradients.
    loss_weights exists to probe gradient structure; training always uses
    the default 1/1/1.
    """
    w = params.weights
    grads: dict[str, np.ndarray] = {}
    dz_emotion = loss_weights[0] * nn.cross_entropy_grad_logits(outputs.emotion_probs, y_emotion)
    dz_gender = loss_weights[1] * nn.cross_entropy_grad_logits(outputs.gender_probs, y_gender)
    dz_age = loss_weights[2] * nn.mse_grad(outputs.age_z, np.asarray(age_z))[:, None]
    h = cache["trunk.out"]
    dh = np.zeros_like(h)
    for head, dz in (
        ("head_emotion", dz_emotion),
        ("head_gender", dz_gender),
        ("head_age", dz_age),
    ):
        dx, dw, db = nn.dense_backward(dz, h, w[f"{head}.weight"])
        grads[f"{head}.weight"] = dw
        grads[f"{head}.bias"] = db
        dh += dx
    for i in (3, 2, 1):
        dz = nn.relu_backward(dh, cache[f"fc{i}.z"])
        dh, dw, db = nn.dense_backward(dz, cache[f"fc{i}.x"], w[f"fc{i}.weight"])
        grads[f"fc{i}.weight"] = dw
        grads[f"fc{i}.bias"] = db
    if params.config.arch == "cnn":
        dh = dh.reshape(cache["flat.shape"])
        for i in (2, 1):
            da = nn.maxpool1d_backward(dh, cache[f"pool{i}.arg"], cache[f"pool{i}.in_len"])
            dz = nn.relu_backward(da, cache[f"conv{i}.z"])
            dh, dk, db = nn.conv1d_backward(dz, cache[f"conv{i}.x"], w[f"conv{i}.kernel"])
            grads[f"conv{i}.kernel"] = dk
            grads[f"conv{i}.bias"] = db
    return grads


def train_step(
    params: ModelParams,
    optimizer: nn.Adam,
    x,
    y_emotion,
    y_gender,
    age_years,
    loss_weights=(1.0, 1.0, 1.0),
) -> LossParts:
    """One forward/backward/Adam update on a batch; returns the loss breakdown."""
    age_z = (np.asarray(age_years, dtype=np.float64) - params.age_mean) / params.age_std
    outputs, cache = forward(params, x)
    parts = total_loss(outputs, y_emotion, y_gender, age_z)
    if not np.isfinite(parts.total):
        raise TrainingAbort(f"non-finite training loss {parts.total}")
    grads = backward(params, cache, outputs, y_emotion, y_gender, age_z, loss_weights)
    optimizer.step(params.weights, grads)
    return parts


def predict(params: ModelParams, x) -> Prediction:
    """Single-input prediction with human-readable labels and age in years."""
    outputs, _ = forward(params, x)
    e_row = outputs.emotion_probs[0]
    g_row = outputs.gender_probs[0]
    age = float(np.clip(outputs.age_years[0], AGE_MIN_YEARS, AGE_MAX_YEARS))
    return Prediction(
        emotion_label=params.emotion_vocab[int(e_row.argmax())],
        emotion_probs={label: float(p) for label, p in zip(params.emotion_vocab, e_row)},
        gender_label=params.gender_vocab[int(g_row.argmax())],
        gender_probs={label: float(p) for label, p in zip(params.gender_vocab, g_row)},
        age_years=age,
    )


def metrics_from_predictions(
    pred_emotion, pred_gender, pred_age_years, y_emotion, y_gender, age_years, n_emotions=6
) -> EvalMetrics:
    """Accuracy (%) for the two classifiers, RMSE in years, emotion confusion."""
    pred_emotion = np.asarray(pred_emotion)
    y_emotion = np.asarray(y_emotion)
    if pred_emotion.size == 0:
        raise ValueError("cannot evaluate an empty example set")
    confusion = np.zeros((n_emotions, n_emotions), dtype=np.int64)
    np.add.at(confusion, (y_emotion, pred_emotion), 1)
    return EvalMetrics(
        emotion_acc=float((pred_emotion == y_emotion).mean() * 100.0),
        gender_acc=float((np.asarray(pred_gender) == np.asarray(y_gender)).mean() * 100.0),
        age_rmse=float(
            np.sqrt(((np.asarray(pred_age_years) - np.asarray(age_years)) ** 2).mean())
        ),
        emotion_confusion=confusion,
    )


def evaluate(params: ModelParams, x, y_emotion, y_gender, age_years) -> EvalMetrics:
    """Run the model over labeled examples and score all three tasks."""
    x2 = np.atleast_2d(np.asarray(x, dtype=np.float64))
    if x2.shape[0] == 0:
        raise ValueError("cannot evaluate an empty example set")
    outputs, _ = forward(params, x2)
    return metrics_from_predictions(
        outputs.emotion_probs.argmax(axis=1),
        outputs.gender_probs.argmax(axis=1),
        outputs.age_years,
        y_emotion,
        y_gender,
        age_years,
        n_emotions=params.config.n_emotions,
    )
