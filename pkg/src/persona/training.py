"""Dataset manifests, k-fold protocol, early stopping, and the fold trainer.

The protocol: stratified 5-fold split, train on 4 folds / test on 1, with a
10% validation carve-out from the training folds to drive early stopping and
plateau learning-rate decay. Normalization statistics come from the training
split only; the test fold never influences them.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field

import numpy as np

from . import model as mt
from . import nn
from .audio import ingest_wav_bytes
from .features import FeatureType, extract_mfcc_vector, read_embedding_file

STD_FLOOR = 1e-8


class ManifestError(ValueError):
    pass


class TrainingDataError(ValueError):
    pass


@dataclass
class LabeledExample:
    clip_id: str
    audio_path: str | None
    embedding_path: str | None
    emotion: str
    gender: str
    age: int
    speaker_id: str


@dataclass
class TrainConfig:
    folds: int = 5
    epochs: int = 20
    lr: float = 1e-3
    batch_size: int = 32
    seed: int = 0
    patience_early: int = 5
    min_delta: float = 1e-4
    lr_decay_factor: float = 0.5
    lr_decay_patience: int = 3
    lr_floor: float = 1e-5
    validation_fraction: float = 0.1

    def validate(self) -> None:
        if self.folds < 2:
            raise ValueError(f"folds must be >= 2, got {self.folds}")
        if not 0.0 < self.validation_fraction < 0.5:
            raise ValueError(f"validation_fraction {self.validation_fraction} outside (0, 0.5)")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")


@dataclass
class FoldReport:
    fold_index: int
    emotion_acc: float
    gender_acc: float
    age_rmse: float
    epochs_run: int
    final_lr: float
    best_epoch: int
    best_val_loss: float
    n_train: int
    n_test: int

    def to_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass
class CvReport:
    arch: str
    feature_type: str
    config: TrainConfig
    folds: list[FoldReport]
    best_fold_index: int

    @property
    def mean_emotion_acc(self) -> float:
        return float(np.mean([f.emotion_acc for f in self.folds]))

    @property
    def mean_gender_acc(self) -> float:
        return float(np.mean([f.gender_acc for f in self.folds]))

    @property
    def mean_age_rmse(self) -> float:
        return float(np.mean([f.age_rmse for f in self.folds]))

    def to_dict(self) -> dict:
        return {
            "arch": self.arch,
            "feature_type": self.feature_type,
            "train_config": dict(self.config.__dict__),
            "folds": [f.to_dict() for f in self.folds],
            "mean": {
                "emotion_acc": self.mean_emotion_acc,
                "gender_acc": self.mean_gender_acc,
                "age_rmse": self.mean_age_rmse,
            },
            "best_fold_index": self.best_fold_index,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)

    def format_table(self) -> str:
        """Mean scores over folds, one row per representation/architecture."""
        name = f"{self.feature_type} ({self.arch})"
        lines = [
            f"{'Representation':<20}{'Emotion %':>12}{'Gender %':>12}{'Age RMSE':>12}",
            "-" * 56,
            f"{name:<20}{self.mean_emotion_acc:>12.2f}{self.mean_gender_acc:>12.2f}"
            f"{self.mean_age_rmse:>12.4f}",
        ]
        return "\n".join(lines)


# --- manifest ------------------------------------------------------------------

_COLUMNS = ("clip_id", "audio_path", "embedding_path", "emotion", "gender", "age", "speaker_id")


def load_manifest(path) -> list[LabeledExample]:
    """Read and validate the dataset CSV; raises naming the offending row."""
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.DictReader(f)
        missing = set(_COLUMNS) - set(reader.fieldnames or ())
        if missing:
            raise ManifestError(f"manifest missing column(s): {', '.join(sorted(missing))}")
        examples: list[LabeledExample] = []
        seen: set[str] = set()
        for row_no, row in enumerate(reader, start=2):
            clip_id = (row["clip_id"] or "").strip()
            if not clip_id:
                raise ManifestError(f"empty clip_id, row {row_no}")
            if clip_id in seen:
                raise ManifestError(f"duplicate clip_id {clip_id!r}, row {row_no}")
            seen.add(clip_id)
            emotion = (row["emotion"] or "").strip().lower()
            if emotion not in mt.EMOTIONS:
                raise ManifestError(f"unknown emotion {emotion!r}, row {row_no}")
            gender = (row["gender"] or "").strip().lower()
            if gender not in mt.GENDERS:
                raise ManifestError(f"unknown gender {gender!r}, row {row_no}")
            try:
                age = int((row["age"] or "").strip())
            except ValueError:
                raise ManifestError(f"non-integer age {row['age']!r}, row {row_no}")
            if age <= 0:
                raise ManifestError(f"non-positive age {age}, row {row_no}")
            examples.append(
                LabeledExample(
                    clip_id=clip_id,
                    audio_path=(row["audio_path"] or "").strip() or None,
                    embedding_path=(row["embedding_path"] or "").strip() or None,
                    emotion=emotion,
                    gender=gender,
                    age=age,
                    speaker_id=(row["speaker_id"] or "").strip(),
                )
            )
    return examples


# --- splits ----------------------------------------------------------------------


def kfold_split(examples, k: int = 5, seed: int = 0) -> list[list[LabeledExample]]:
    """k disjoint folds, stratified by emotion, sizes within 1 of each other."""
    if k < 2:
        raise ValueError(f"k must be >= 2, got {k}")
    if k > len(examples):
        raise ValueError(f"k={k} exceeds the {len(examples)} available examples")
    rng = np.random.default_rng([seed, 101])
    folds: list[list[LabeledExample]] = [[] for _ in range(k)]
    position = 0  # running round-robin pointer keeps global sizes balanced
    for emotion in mt.EMOTIONS:
        members = [ex for ex in examples if ex.emotion == emotion]
        for j in rng.permutation(len(members)):
            folds[position % k].append(members[int(j)])
            position += 1
    return folds


def stratified_carve(examples, fraction: float, seed) -> tuple[list, list]:
    """Split off a validation subset, stratified by emotion, seeded."""
    rng = np.random.default_rng(seed)
    train: list[LabeledExample] = []
    val: list[LabeledExample] = []
    for emotion in mt.EMOTIONS:
        members = [ex for ex in examples if ex.emotion == emotion]
        order = rng.permutation(len(members))
        n_val = int(round(len(members) * fraction))
        for pos, j in enumerate(order):
            (val if pos < n_val else train).append(members[int(j)])
    if not val and train:
        val.append(train.pop())  # degenerate tiny sets still need a monitor signal
    return train, val


def fit_normalizers(features: np.ndarray, ages: np.ndarray):
    """Per-dimension feature mean/std and age mean/std (population, floored)."""
    features = np.asarray(features, dtype=np.float64)
    ages = np.asarray(ages, dtype=np.float64)
    if features.size == 0:
        raise ValueError("cannot fit normalizers on an empty set")
    mean = features.mean(axis=0)
    std = np.maximum(features.std(axis=0), STD_FLOOR)
    return mean, std, float(ages.mean()), float(max(ages.std(), STD_FLOOR))


# --- schedule state ---------------------------------------------------------------


@dataclass
class EarlyStopping:
    """Stop after `patience` consecutive epochs without val-loss improvement."""

    patience: int = 5
    min_delta: float = 1e-4
    best_loss: float = field(default=float("inf"))
    best_epoch: int = 0
    epoch: int = 0
    num_bad: int = 0

    def update(self, val_loss: float) -> bool:
        """Record one epoch's validation loss; True means stop now."""
        self.epoch += 1
        if val_loss < self.best_loss - self.min_delta:
            self.best_loss = val_loss
            self.best_epoch = self.epoch
            self.num_bad = 0
        else:
            self.num_bad += 1
        return self.num_bad >= self.patience

    @property
    def improved(self) -> bool:
        return self.best_epoch == self.epoch


@dataclass
class PlateauLrDecay:
    """Halve the learning rate after sustained non-improvement, down to a floor."""

    lr: float
    factor: float = 0.5
    patience: int = 3
    floor: float = 1e-5
    min_delta: float = 1e-4
    best_loss: float = field(default=float("inf"))
    num_bad: int = 0

    def update(self, val_loss: float) -> float:
        if val_loss < self.best_loss - self.min_delta:
            self.best_loss = val_loss
            self.num_bad = 0
        else:
            self.num_bad += 1
            if self.num_bad >= self.patience:
                self.lr = max(self.lr * self.factor, self.floor)
                self.num_bad = 0
        return self.lr


# --- feature resolution -------------------------------------------------------------


def resolve_features(examples, feature_type: FeatureType):
    """Load one feature vector per example; fails listing every bad clip_id.

    MFCC comes from the audio file through the full ingest pipeline; embedding
    types read PERS files and must match the requested type.
    """
    rows = []
    labels_e = []
    labels_g = []
    ages = []
    failures = []
    for ex in examples:
        try:
            if feature_type is FeatureType.MFCC:
                if not ex.audio_path:
                    raise TrainingDataError("no audio_path")
                with open(ex.audio_path, "rb") as f:
                    clip = ingest_wav_bytes(f.read(), source_name=ex.clip_id)
                vec = extract_mfcc_vector(clip)
            else:
                if not ex.embedding_path:
                    raise TrainingDataError("no embedding_path")
                vec = read_embedding_file(ex.embedding_path)
                if vec.feature_type is not feature_type:
                    raise TrainingDataError(
                        f"embedding is {vec.feature_type.name}, expected {feature_type.name}"
                    )
        except (OSError, ValueError) as err:
            failures.append(f"{ex.clip_id}: {err}")
            continue
        rows.append(vec.values)
        labels_e.append(mt.EMOTIONS.index(ex.emotion))
        labels_g.append(mt.GENDERS.index(ex.gender))
        ages.append(float(ex.age))
    if failures:
        raise TrainingDataError(
            "could not resolve features for: " + "; ".join(failures)
        )
    return (
        np.array(rows),
        np.array(labels_e, dtype=np.int64),
        np.array(labels_g, dtype=np.int64),
        np.array(ages),
    )


# --- fold training --------------------------------------------------------------------


def train_fold(
    train_set,
    test_fold,
    config: TrainConfig,
    arch: str,
    feature_type: FeatureType,
    fold_index: int = 0,
) -> tuple[FoldReport, mt.ModelParams]:
    """Train one model on train_set and score it once on test_fold.

    Early stopping monitors total validation loss on a stratified carve-out;
    the best epoch's weights are restored before the test evaluation.
    """
    config.validate()
    inner_train, val_set = stratified_carve(
        train_set, config.validation_fraction, seed=[config.seed, fold_index, 1]
    )
    x_train, ye_train, yg_train, age_train = resolve_features(inner_train, feature_type)
    x_val, ye_val, yg_val, age_val = resolve_features(val_set, feature_type)

    f_mean, f_std, a_mean, a_std = fit_normalizers(x_train, age_train)
    params = mt.build_model(
        mt.ModelConfig(arch=arch, feature_type=feature_type, seed=config.seed + fold_index)
    )
    params.feature_mean = f_mean
    params.feature_std = f_std
    params.age_mean = a_mean
    params.age_std = a_std

    optimizer = nn.Adam(lr=config.lr)
    stopper = EarlyStopping(patience=config.patience_early, min_delta=config.min_delta)
    decay = PlateauLrDecay(
        lr=config.lr,
        factor=config.lr_decay_factor,
        patience=config.lr_decay_patience,
        floor=config.lr_floor,
        min_delta=config.min_delta,
    )
    rng = np.random.default_rng([config.seed, fold_index, 2])
    age_z_val = (age_val - a_mean) / a_std

    best_weights = {k: v.copy() for k, v in params.weights.items()}
    best_val = float("inf")
    epochs_run = 0
    for _epoch in range(config.epochs):
        order = rng.permutation(len(x_train))
        for start in range(0, len(order), config.batch_size):
            batch = order[start : start + config.batch_size]
            mt.train_step(
                params, optimizer, x_train[batch], ye_train[batch], yg_train[batch],
                age_train[batch],
            )
        val_outputs, _ = mt.forward(params, x_val)
        val_loss = mt.total_loss(val_outputs, ye_val, yg_val, age_z_val).total
        epochs_run += 1
        stop = stopper.update(val_loss)
        if stopper.improved:
            best_weights = {k: v.copy() for k, v in params.weights.items()}
            best_val = val_loss
        optimizer.lr = decay.update(val_loss)
        if stop:
            break

    params.weights = best_weights
    x_test, ye_test, yg_test, age_test = resolve_features(test_fold, feature_type)
    metrics = mt.evaluate(params, x_test, ye_test, yg_test, age_test)
    report = FoldReport(
        fold_index=fold_index,
        emotion_acc=metrics.emotion_acc,
        gender_acc=metrics.gender_acc,
        age_rmse=metrics.age_rmse,
        epochs_run=epochs_run,
        final_lr=optimizer.lr,
        best_epoch=stopper.best_epoch,
        best_val_loss=best_val,
        n_train=len(train_set),
        n_test=len(test_fold),
    )
    return report, params


def run_cross_validation(
    examples,
    config: TrainConfig,
    arch: str,
    feature_type: FeatureType,
) -> tuple[CvReport, mt.ModelParams]:
    """Independent train_fold runs over the k-fold partition, plus the best model.

    "Best" is the fold with the lowest validation loss at its best epoch, so
    model selection never peeks at test scores.
    """
    config.validate()
    folds = kfold_split(examples, k=config.folds, seed=config.seed)
    reports: list[FoldReport] = []
    models: list[mt.ModelParams] = []
    for i, test_fold in enumerate(folds):
        train_set = [ex for j, fold in enumerate(folds) if j != i for ex in fold]
        report, params = train_fold(train_set, test_fold, config, arch, feature_type, fold_index=i)
        reports.append(report)
        models.append(params)
    best = min(range(len(reports)), key=lambda i: (reports[i].best_val_loss, i))
    cv = CvReport(
        arch=arch,
        feature_type=feature_type.name.lower(),
        config=config,
        folds=reports,
        best_fold_index=best,
    )
    best_model = models[best]
    best_model.provenance.update(
        {
            "seed": config.seed,
            "config_hash": mt.config_hash(best_model.config),
            "metrics": {
                "mean_emotion_acc": cv.mean_emotion_acc,
                "mean_gender_acc": cv.mean_gender_acc,
                "mean_age_rmse": cv.mean_age_rmse,
            },
        }
    )
    return cv, best_model
