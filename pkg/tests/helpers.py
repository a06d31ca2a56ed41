"""Shared test utilities: WAV synthesis and a synthetic clustered dataset."""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from persona.features import FeatureType, FeatureVector, write_embedding_file
from persona.model import EMOTIONS, GENDERS
from persona.training import LabeledExample


def make_wav(pcm: np.ndarray, rate: int, channels: int = 1) -> bytes:
    """RIFF/WAVE bytes from int16 samples (interleaved for stereo)."""
    pcm = np.asarray(pcm, dtype="<i2")
    payload = pcm.tobytes()
    header = struct.pack(
        "<4sI4s4sIHHIIHH4sI",
        b"RIFF",
        36 + len(payload),
        b"WAVE",
        b"fmt ",
        16,
        1,
        channels,
        rate,
        rate * channels * 2,
        channels * 2,
        16,
        b"data",
        len(payload),
    )
    return header + payload


def tone_wav(freq_hz: float, seconds: float, rate: int = 16000, amp: float = 0.5) -> bytes:
    t = np.arange(int(round(seconds * rate))) / rate
    pcm = np.round(amp * 32767 * np.sin(2 * np.pi * freq_hz * t)).astype("<i2")
    return make_wav(pcm, rate)


def synthetic_dataset(
    tmp_dir,
    n: int = 200,
    seed: int = 5,
    feature_type: FeatureType = FeatureType.XVECTOR,
    age_noise: float = 1.0,
) -> list[LabeledExample]:
    """Cleanly clustered embeddings: 12 clusters fix emotion and gender, age is
    a cluster-dependent mean plus unit-variance noise."""
    rng = np.random.default_rng(seed)
    dim = feature_type.dim
    centers = rng.normal(size=(12, dim))
    examples = []
    tmp_dir = Path(tmp_dir)
    for i in range(n):
        cluster = i % 12
        values = centers[cluster] + 0.1 * rng.normal(size=dim)
        values = values.astype(np.float32).astype(np.float64)  # PERS payload is f32
        path = tmp_dir / f"clip{i:04d}.pers"
        write_embedding_file(FeatureVector(values, feature_type, f"clip{i:04d}"), path)
        examples.append(
            LabeledExample(
                clip_id=f"clip{i:04d}",
                audio_path=None,
                embedding_path=str(path),
                emotion=EMOTIONS[cluster // 2],
                gender=GENDERS[cluster % 2],
                age=max(1, int(round(20 + 5 * cluster + age_noise * rng.normal()))),
                speaker_id=f"spk{cluster}",
            )
        )
    return examples


def write_manifest(path, examples) -> None:
    lines = ["clip_id,audio_path,embedding_path,emotion,gender,age,speaker_id"]
    for ex in examples:
        lines.append(
            f"{ex.clip_id},{ex.audio_path or ''},{ex.embedding_path or ''},"
            f"{ex.emotion},{ex.gender},{ex.age},{ex.speaker_id}"
        )
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
