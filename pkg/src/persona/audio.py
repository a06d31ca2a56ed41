"""WAV decoding, channel mixdown, and sample-rate conversion to 16 kHz.

The ingest pipeline is decode_wav -> to_mono -> resample_16k; after it runs,
every clip is a mono float64 buffer in [-1, 1] at exactly 16 kHz.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass

import numpy as np

TARGET_RATE = 16000
MIN_RATE = 8000
MAX_RATE = 48000

# Polyphase resampler design: Kaiser-windowed sinc, 16 taps per phase
# (the kernel is stretched by the decimation ratio when downsampling so the
# anti-aliasing cutoff keeps 16 taps across its main lobe span).
TAPS_PER_PHASE = 16
KAISER_BETA = 8.0


class AudioError(ValueError):
    """Raised when audio bytes cannot be decoded or converted."""


@dataclass
class AudioClip:
    """Decoded PCM audio.

    samples is float64 in [-1, 1]: shape (n,) once mono, or (channels, n)
    straight out of the decoder before mixdown.
    """

    samples: np.ndarray
    sample_rate_hz: int
    source_name: str = ""

    @property
    def channels(self) -> int:
        return 1 if self.samples.ndim == 1 else self.samples.shape[0]

    @property
    def num_samples(self) -> int:
        return self.samples.shape[-1]

    @property
    def duration_s(self) -> float:
        return self.num_samples / self.sample_rate_hz


def _parse_fmt_chunk(body: bytes) -> tuple[int, int]:
    if len(body) < 16:
        raise AudioError(f"fmt chunk too short: {len(body)} bytes, need 16")
    fmt_tag, channels, rate, _byte_rate, _block_align, bits = struct.unpack_from(
        "<HHIIHH", body, 0
    )
    if fmt_tag != 1:
        raise AudioError(
            f"unsupported codec: format tag {fmt_tag}, only uncompressed PCM (1) is accepted"
        )
    if bits != 16:
        raise AudioError(f"unsupported bit depth: {bits}-bit, only 16-bit PCM is accepted")
    if channels not in (1, 2):
        raise AudioError(f"unsupported channel count: {channels}, only mono or stereo")
    if not MIN_RATE <= rate <= MAX_RATE:
        raise AudioError(
            f"unsupported sample rate: {rate} Hz, supported range {MIN_RATE}-{MAX_RATE}"
        )
    return channels, rate


def decode_wav(data: bytes, source_name: str = "upload.wav") -> AudioClip:
    """Decode a RIFF/WAVE container holding 16-bit signed PCM.

    Integer samples are scaled by 1/32768 into [-1, 1]. The sample rate comes
    straight from the header; resampling is a separate step. Stereo clips come
    back with shape (2, n) for to_mono to fold down.
    """
    if len(data) < 12:
        raise AudioError(f"not a RIFF file: {len(data)} bytes is shorter than the 12-byte header")
    if data[0:4] != b"RIFF":
        raise AudioError(f"bad RIFF magic {data[0:4]!r}")
    if data[8:12] != b"WAVE":
        raise AudioError(f"bad WAVE form type {data[8:12]!r}")

    fmt: tuple[int, int] | None = None
    payload: bytes | None = None
    pos = 12
    while pos + 8 <= len(data):
        chunk_id = data[pos : pos + 4]
        (size,) = struct.unpack_from("<I", data, pos + 4)
        body = data[pos + 8 : pos + 8 + size]
        if len(body) < size:
            raise AudioError(
                f"truncated chunk {chunk_id!r}: declares {size} bytes, {len(body)} present"
            )
        if chunk_id == b"fmt ":
            fmt = _parse_fmt_chunk(body)
        elif chunk_id == b"data":
            payload = body
        pos += 8 + size + (size & 1)  # chunks are word-aligned

    if fmt is None:
        raise AudioError("missing fmt chunk")
    if payload is None:
        raise AudioError("missing data chunk")
    channels, rate = fmt
    if len(payload) == 0:
        raise AudioError("zero-length data chunk")
    frame_size = 2 * channels
    if len(payload) % frame_size != 0:
        raise AudioError(
            f"data chunk length {len(payload)} is not a multiple of the {frame_size}-byte frame"
        )

    samples = np.frombuffer(payload, dtype="<i2").astype(np.float64) / 32768.0
    if channels == 2:
        samples = samples.reshape(-1, 2).T.copy()
    return AudioClip(samples=samples, sample_rate_hz=rate, source_name=source_name)


def to_mono(clip: AudioClip) -> AudioClip:
    """Fold a clip down to one channel (sample-wise mean for stereo)."""
    if clip.samples.ndim == 1:
        return clip
    if clip.channels > 2:
        raise AudioError(f"unsupported channel layout: {clip.channels} channels")
    mixed = clip.samples.mean(axis=0)
    return AudioClip(mixed, clip.sample_rate_hz, clip.source_name)


def _kaiser(u: np.ndarray) -> np.ndarray:
    # Continuous Kaiser window on [-1, 1], zero outside.
    w = np.zeros_like(u)
    inside = np.abs(u) <= 1.0
    w[inside] = np.i0(KAISER_BETA * np.sqrt(1.0 - u[inside] ** 2)) / np.i0(KAISER_BETA)
    return w


def _phase_filters(up: int, down: int) -> tuple[np.ndarray, int]:
    """Tap table for rational resampling by up/down, one row per phase.

    Phase p approximates the ideal output point base + p/up with taps at
    input offsets -T+1..T. Each row is normalized to unit sum so constant
    signals pass through exactly.
    """
    cutoff = min(1.0, up / down)  # as a fraction of input Nyquist
    support = (TAPS_PER_PHASE // 2) / cutoff
    half_taps = math.ceil(support)
    offsets = np.arange(-half_taps + 1, half_taps + 1, dtype=np.float64)
    frac = (np.arange(up, dtype=np.float64) / up)[:, None]
    u = offsets[None, :] - frac
    h = cutoff * np.sinc(cutoff * u) * _kaiser(u / support)
    h /= h.sum(axis=1, keepdims=True)
    return h, half_taps


def resample_16k(clip: AudioClip) -> AudioClip:
    """Convert a mono clip to exactly 16 kHz.

    Already-16 kHz input is returned untouched. Everything else goes through
    a polyphase windowed-sinc filter (see module constants for the design).
    """
    if clip.samples.ndim != 1:
        raise AudioError("resample_16k expects a mono clip; call to_mono first")
    rate = clip.sample_rate_hz
    if rate == TARGET_RATE:
        return clip
    if not MIN_RATE <= rate <= MAX_RATE:
        raise AudioError(
            f"unsupported sample rate: {rate} Hz, supported range {MIN_RATE}-{MAX_RATE}"
        )

    g = math.gcd(TARGET_RATE, rate)
    up, down = TARGET_RATE // g, rate // g
    taps, half_taps = _phase_filters(up, down)

    x = clip.samples
    n_in = x.size
    if n_in == 0:
        raise AudioError("cannot resample an empty clip")
    n_out = (2 * n_in * up + down) // (2 * down)  # round(n_in * up / down)

    pos = np.arange(n_out, dtype=np.int64) * down
    base = pos // up
    phase = pos - base * up
    padded = np.pad(x, (half_taps - 1, half_taps))
    tap_idx = np.arange(2 * half_taps, dtype=np.int64)  # offsets already folded into padding

    out = np.empty(n_out)
    block = 1 << 16  # bound the gather working set for long clips
    for start in range(0, n_out, block):
        end = min(start + block, n_out)
        gathered = padded[base[start:end, None] + tap_idx[None, :]]
        out[start:end] = np.einsum("ij,ij->i", gathered, taps[phase[start:end]])
    np.clip(out, -1.0, 1.0, out=out)
    return AudioClip(out, TARGET_RATE, clip.source_name)


def ingest_wav_bytes(data: bytes, source_name: str = "upload.wav") -> AudioClip:
    """Full pipeline: decode, mix down, resample to 16 kHz."""
    return resample_16k(to_mono(decode_wav(data, source_name)))
