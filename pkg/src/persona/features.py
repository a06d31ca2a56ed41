"""Feature extraction: the MFCC pipeline and embedding-vector file I/O.

Three fixed-length representations feed the models: 40-d MFCC statistics
computed here from audio, plus 512-d speaker embeddings and 768-d
self-supervised embeddings that arrive precomputed in PERS files (an
external exporter runs those networks; this package only ingests vectors).
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from enum import Enum
from functools import lru_cache
from pathlib import Path

import numpy as np

from .audio import AudioClip


class FeatureError(ValueError):
    """Bad input to the feature pipeline."""


class MfccConfigError(ValueError):
    """Inconsistent MFCC configuration."""


class EmbeddingFormatError(ValueError):
    """Malformed PERS embedding file. `code` names the failed check."""

    def __init__(self, code: str, message: str):
        super().__init__(message)
        self.code = code


class FeatureType(Enum):
    MFCC = 0
    XVECTOR = 1
    WAVLM = 2

    @property
    def dim(self) -> int:
        return _FEATURE_DIMS[self]

    @classmethod
    def from_name(cls, name: str) -> "FeatureType":
        try:
            return cls[name.upper()]
        except KeyError:
            raise FeatureError(f"unknown feature type {name!r}; expected mfcc, xvector, or wavlm")


_FEATURE_DIMS = {FeatureType.MFCC: 40, FeatureType.XVECTOR: 512, FeatureType.WAVLM: 768}


@dataclass(frozen=True)
class MfccConfig:
    """25 ms / 10 ms framing at 16 kHz, 26 mel filters, 20 cepstral coefficients.

    The served vector is mean+std pooling over frames, so its length is
    2 * n_coeffs = 40.
    """

    pre_emphasis: float = 0.97
    frame_len: int = 400
    hop: int = 160
    fft_size: int = 512
    n_mels: int = 26
    n_coeffs: int = 20
    fmin_hz: float = 0.0
    fmax_hz: float = 8000.0
    log_floor: float = 1e-10

    def validate(self, sample_rate: int) -> None:
        if not 0.0 <= self.pre_emphasis < 1.0:
            raise MfccConfigError(f"pre_emphasis {self.pre_emphasis} outside [0, 1)")
        if self.n_coeffs > self.n_mels:
            raise MfccConfigError(f"n_coeffs {self.n_coeffs} > n_mels {self.n_mels}")
        if self.frame_len > self.fft_size:
            raise MfccConfigError(f"frame_len {self.frame_len} > fft_size {self.fft_size}")
        if self.fft_size & (self.fft_size - 1):
            raise MfccConfigError(f"fft_size {self.fft_size} is not a power of two")
        if self.fmax_hz > sample_rate / 2:
            raise MfccConfigError(f"fmax_hz {self.fmax_hz} above Nyquist for {sample_rate} Hz")
        if self.frame_len <= 0 or self.hop <= 0:
            raise MfccConfigError("frame_len and hop must be positive")


@dataclass
class FeatureVector:
    values: np.ndarray
    feature_type: FeatureType
    clip_id: str = ""

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 1 or self.values.size != self.feature_type.dim:
            raise FeatureError(
                f"{self.feature_type.name} vector must have {self.feature_type.dim} values, "
                f"got shape {self.values.shape}"
            )
        if not np.all(np.isfinite(self.values)):
            raise FeatureError("feature vector contains non-finite values")


# --- frame-level DSP ---------------------------------------------------------


def pre_emphasize(x: np.ndarray, alpha: float) -> np.ndarray:
    """y[t] = x[t] - alpha * x[t-1], with y[0] = x[0]."""
    if not 0.0 <= alpha < 1.0:
        raise FeatureError(f"pre-emphasis coefficient {alpha} outside [0, 1)")
    x = np.asarray(x, dtype=np.float64)
    y = x.copy()
    y[1:] = x[1:] - alpha * x[:-1]
    return y


def frame_signal(x: np.ndarray, frame_len: int, hop: int) -> np.ndarray:
    """Slice x into overlapping frames; shorter-than-one-frame input is zero-padded."""
    if frame_len <= 0 or hop <= 0:
        raise FeatureError("frame_len and hop must be positive")
    x = np.asarray(x, dtype=np.float64)
    if x.size == 0:
        raise FeatureError("cannot frame an empty signal")
    if x.size < frame_len:
        frame = np.zeros((1, frame_len))
        frame[0, : x.size] = x
        return frame
    return np.lib.stride_tricks.sliding_window_view(x, frame_len)[::hop].copy()


def hamming_window(n: int) -> np.ndarray:
    if n < 2:
        raise FeatureError(f"hamming window needs n >= 2, got {n}")
    k = np.arange(n)
    return 0.54 - 0.46 * np.cos(2.0 * np.pi * k / (n - 1))


@lru_cache(maxsize=8)
def _fft_tables(n: int) -> tuple[np.ndarray, tuple[np.ndarray, ...]]:
    bits = n.bit_length() - 1
    idx = np.arange(n)
    rev = np.zeros(n, dtype=np.int64)
    for b in range(bits):
        rev |= ((idx >> b) & 1) << (bits - 1 - b)
    twiddles = tuple(
        np.exp(-2j * np.pi * np.arange(1 << s) / (2 << s)) for s in range(bits)
    )
    return rev, twiddles


def _fft_radix2(frames: np.ndarray) -> np.ndarray:
    """Iterative decimation-in-time radix-2 DFT over the last axis (batched)."""
    n = frames.shape[-1]
    if n & (n - 1) or n < 1:
        raise FeatureError(f"FFT length {n} is not a power of two")
    rev, twiddles = _fft_tables(n)
    a = np.asarray(frames, dtype=np.complex128)[..., rev]
    lead = a.shape[:-1]
    a = a.reshape(-1, n)
    for stage, tw in enumerate(twiddles):
        m = 2 << stage
        half = m >> 1
        blocks = a.reshape(-1, n // m, m)
        lower = blocks[:, :, :half]
        t = blocks[:, :, half:] * tw
        blocks[:, :, half:] = lower - t
        lower += t
    return a.reshape(*lead, n)


def _rfft_packed(frames: np.ndarray) -> np.ndarray:
    """Real-input DFT bins 0..n/2 via one half-size complex radix-2 transform.

    Packs even samples into the real part and odd samples into the imaginary
    part, transforms, then untangles the two interleaved spectra.
    """
    n = frames.shape[-1]
    half = n // 2
    z = frames[:, 0::2] + 1j * frames[:, 1::2]
    zf = _fft_radix2(z)
    k = np.arange(half + 1)
    a = zf[:, k % half]
    b = np.conj(zf[:, (-k) % half])
    even_part = 0.5 * (a + b)
    odd_part = -0.5j * (a - b)
    return even_part + np.exp(-1j * np.pi * k / half) * odd_part


def power_spectrum(frame: np.ndarray, fft_size: int) -> np.ndarray:
    """|DFT|^2 of the zero-padded frame, bins 0..fft_size/2, no normalization."""
    frame = np.asarray(frame, dtype=np.float64)
    single = frame.ndim == 1
    frames = np.atleast_2d(frame)
    if frames.shape[-1] > fft_size:
        raise FeatureError(f"frame length {frames.shape[-1]} exceeds fft_size {fft_size}")
    if fft_size < 2 or fft_size & (fft_size - 1):
        raise FeatureError(f"fft_size {fft_size} is not a power of two")
    n_frames = frames.shape[0]
    power = np.empty((n_frames, fft_size // 2 + 1))
    block = 2048  # keep the per-chunk working set cache-sized
    padded = np.zeros((min(block, n_frames), fft_size))
    for start in range(0, n_frames, block):
        chunk = frames[start : start + block]
        buf = padded[: chunk.shape[0]]
        buf[:, : chunk.shape[1]] = chunk
        buf[:, chunk.shape[1] :] = 0.0
        spec = _rfft_packed(buf)
        power[start : start + block] = spec.real**2 + spec.imag**2
    return power[0] if single else power


def mel_from_hz(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def hz_from_mel(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


@lru_cache(maxsize=8)
def _cached_filterbank(config: MfccConfig, sample_rate: int) -> np.ndarray:
    fb = build_mel_filterbank(config, sample_rate)
    fb.setflags(write=False)
    return fb


def build_mel_filterbank(config: MfccConfig, sample_rate: int) -> np.ndarray:
    """Triangular mel filters, one row per filter, unit peak at the center bin."""
    config.validate(sample_rate)
    n_bins = config.fft_size // 2 + 1
    points = np.linspace(
        mel_from_hz(config.fmin_hz), mel_from_hz(config.fmax_hz), config.n_mels + 2
    )
    bins = np.floor((config.fft_size + 1) * hz_from_mel(points) / sample_rate).astype(int)
    centers = bins[1:-1]
    if len(np.unique(centers)) != len(centers) or np.any(centers >= bins[2:]):
        raise MfccConfigError(
            f"n_mels {config.n_mels} too large for fft_size {config.fft_size}: "
            "duplicate filter center bins"
        )
    fb = np.zeros((config.n_mels, n_bins))
    for m in range(config.n_mels):
        lo, center, hi = bins[m], bins[m + 1], bins[m + 2]
        for i in range(lo, center):
            fb[m, i] = (i - lo) / (center - lo)
        for i in range(center, hi):
            fb[m, i] = (hi - i) / (hi - center)
    return fb


def apply_filterbank_log(power: np.ndarray, fb: np.ndarray, log_floor: float) -> np.ndarray:
    """ln(max(fb @ power, log_floor)) per filter; the floor keeps silence finite."""
    power = np.asarray(power, dtype=np.float64)
    if power.shape[-1] != fb.shape[1]:
        raise FeatureError(f"spectrum has {power.shape[-1]} bins, filterbank expects {fb.shape[1]}")
    return np.log(np.maximum(power @ fb.T, log_floor))


def dct2(e: np.ndarray, n_coeffs: int) -> np.ndarray:
    """Orthonormal DCT-II truncated to the first n_coeffs coefficients."""
    e = np.asarray(e, dtype=np.float64)
    m = e.shape[-1]
    if n_coeffs > m:
        raise FeatureError(f"n_coeffs {n_coeffs} exceeds input length {m}")
    j = np.arange(n_coeffs)[:, None]
    grid = np.arange(m)[None, :] + 0.5
    basis = np.cos(np.pi * j * grid / m)
    scale = np.full(n_coeffs, math.sqrt(2.0 / m))
    scale[0] = math.sqrt(1.0 / m)
    return (e @ basis.T) * scale


def mfcc_frames(clip: AudioClip, config: MfccConfig | None = None) -> np.ndarray:
    """Per-frame cepstral coefficients, shape (n_frames, n_coeffs)."""
    cfg = config or MfccConfig()
    if clip.sample_rate_hz != 16000:
        raise FeatureError(f"MFCC extraction expects 16 kHz input, got {clip.sample_rate_hz} Hz")
    if clip.samples.ndim != 1:
        raise FeatureError("MFCC extraction expects a mono clip")
    if clip.num_samples == 0:
        raise FeatureError("cannot extract features from an empty clip")
    emphasized = pre_emphasize(clip.samples, cfg.pre_emphasis)
    frames = frame_signal(emphasized, cfg.frame_len, cfg.hop) * hamming_window(cfg.frame_len)
    power = power_spectrum(frames, cfg.fft_size)
    fb = _cached_filterbank(cfg, clip.sample_rate_hz)
    log_energies = apply_filterbank_log(power, fb, cfg.log_floor)
    return dct2(log_energies, cfg.n_coeffs)


def extract_mfcc_vector(clip: AudioClip, config: MfccConfig | None = None) -> FeatureVector:
    """40-d clip-level vector: per-frame MFCCs pooled as concat(mean, std) over time."""
    coeffs = mfcc_frames(clip, config)
    # identical frames (e.g. silence, or a single frame) must pool to std == 0
    spread = coeffs.max(axis=0) - coeffs.min(axis=0)
    std = np.where(spread == 0.0, 0.0, coeffs.std(axis=0))
    vec = np.concatenate([coeffs.mean(axis=0), std])
    return FeatureVector(vec, FeatureType.MFCC, clip_id=clip.source_name)


# --- PERS embedding files ----------------------------------------------------
#
# Little-endian layout: magic "PERS", version u8 = 1, feature-type u8
# (0=MFCC, 1=XVECTOR, 2=WAVLM), dim u32, then dim IEEE-754 f32 values.
# Fallback: a .csv file holding one comma-separated line of decimals.

PERS_MAGIC = b"PERS"
PERS_VERSION = 1


def embedding_to_bytes(vec: FeatureVector) -> bytes:
    header = PERS_MAGIC + struct.pack(
        "<BBI", PERS_VERSION, vec.feature_type.value, vec.values.size
    )
    return header + vec.values.astype("<f4").tobytes()


def embedding_from_bytes(data: bytes, clip_id: str = "") -> FeatureVector:
    if len(data) < 4 or data[:4] != PERS_MAGIC:
        raise EmbeddingFormatError("bad_magic", f"bad magic {data[:4]!r}, expected {PERS_MAGIC!r}")
    if len(data) < 10:
        raise EmbeddingFormatError("truncated", f"header truncated at {len(data)} bytes")
    version, type_code, dim = struct.unpack_from("<BBI", data, 4)
    if version != PERS_VERSION:
        raise EmbeddingFormatError(
            "bad_version", f"unsupported version {version}, expected {PERS_VERSION}"
        )
    try:
        feature_type = FeatureType(type_code)
    except ValueError:
        raise EmbeddingFormatError("bad_feature_type", f"unknown feature-type code {type_code}")
    if dim != feature_type.dim:
        raise EmbeddingFormatError(
            "dim_mismatch",
            f"file declares {feature_type.name} with dim {dim}, expected {feature_type.dim}",
        )
    payload = data[10:]
    if len(payload) < 4 * dim:
        raise EmbeddingFormatError(
            "truncated", f"payload holds {len(payload)} bytes, need {4 * dim}"
        )
    values = np.frombuffer(payload[: 4 * dim], dtype="<f4").astype(np.float64)
    return FeatureVector(values, feature_type, clip_id=clip_id)


def write_embedding_file(vec: FeatureVector, path) -> None:
    Path(path).write_bytes(embedding_to_bytes(vec))


def read_embedding_file(path) -> FeatureVector:
    path = Path(path)
    if path.suffix.lower() == ".csv":
        return _read_embedding_csv(path)
    return embedding_from_bytes(path.read_bytes(), clip_id=path.stem)


def _read_embedding_csv(path: Path) -> FeatureVector:
    text = path.read_text(encoding="utf-8").strip()
    if not text:
        raise EmbeddingFormatError("truncated", f"{path} is empty")
    values = np.array([float(v) for v in text.split(",")])
    by_dim = {ft.dim: ft for ft in FeatureType}
    if values.size not in by_dim:
        raise EmbeddingFormatError(
            "dim_mismatch",
            f"{path} holds {values.size} values; expected one of {sorted(by_dim)}",
        )
    return FeatureVector(values, by_dim[values.size], clip_id=path.stem)
