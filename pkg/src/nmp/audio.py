"""WAV decoding, mono mixdown and sample-rate conversion.

Everything downstream of this module works at 22050 Hz mono. The reader
accepts RIFF/WAVE containers with PCM 16-bit, PCM 24-bit or IEEE float32
payloads (fmt codes 1 and 3) and ignores unknown chunks. Compressed formats
are out of scope; convert externally.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field

import numpy as np
from scipy.signal import resample_poly

WORKING_SAMPLE_RATE = 22050

# Polyphase anti-alias filter: Kaiser window, 96 taps per phase (phases =
# max(up, down)). The extra tap makes the filter odd-length so its group
# delay is an integer. 96 taps keeps the passband flat to ~10.1 kHz for 2:1
# decimation from 44100 Hz; shorter filters droop inside the audible band.
_KAISER_BETA = 12.0
_TAPS_PER_PHASE = 96

_MAX_CHANNELS = 8


class WavFormatError(ValueError):
    """Malformed RIFF/WAVE container."""


class UnsupportedWavError(WavFormatError):
    """Structurally valid WAV using a codec outside PCM16/PCM24/float32."""


@dataclass(frozen=True)
class AudioBuffer:
    """Mono audio: float samples in [-1, 1] at a known sample rate."""

    samples: np.ndarray = field(repr=False)
    sample_rate: int

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64)
        if samples.ndim != 1:
            raise ValueError("AudioBuffer samples must be one-dimensional")
        if not np.all(np.isfinite(samples)):
            raise ValueError("AudioBuffer samples must be finite")
        if int(self.sample_rate) <= 0:
            raise ValueError("sample_rate must be positive")
        object.__setattr__(self, "samples", samples)
        object.__setattr__(self, "sample_rate", int(self.sample_rate))

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def duration_s(self) -> float:
        return len(self.samples) / self.sample_rate


def _parse_chunks(data: bytes):
    """Yield (chunk_id, payload) pairs from a RIFF body, skipping pad bytes."""
    pos = 12
    while pos + 8 <= len(data):
        cid = data[pos:pos + 4]
        (size,) = struct.unpack_from("<I", data, pos + 4)
        payload = data[pos + 8:pos + 8 + size]
        if len(payload) < size:
            raise WavFormatError(
                "chunk %r truncated: header claims %d bytes, %d available"
                % (cid, size, len(payload)))
        yield cid, payload
        pos += 8 + size + (size & 1)


def decode_wav(data: bytes) -> AudioBuffer:
    """Decode a WAV byte string to a mono AudioBuffer.

    Channels are averaged; integer samples are scaled by 2^(bits-1); the
    result is clipped to [-1, 1].
    """
    if len(data) < 12 or data[:4] != b"RIFF" or data[8:12] != b"WAVE":
        raise WavFormatError("not a RIFF/WAVE file")

    fmt = None
    payload = None
    for cid, body in _parse_chunks(data):
        if cid == b"fmt " and fmt is None:
            if len(body) < 16:
                raise WavFormatError("fmt chunk too short (%d bytes)" % len(body))
            fmt = struct.unpack_from("<HHIIHH", body, 0)
        elif cid == b"data" and payload is None:
            payload = body
        # any other chunk id is ignored

    if fmt is None:
        raise WavFormatError("missing fmt chunk")
    if payload is None:
        raise WavFormatError("missing data chunk")

    audio_format, channels, sample_rate, _byte_rate, _block_align, bits = fmt
    if channels < 1 or channels > _MAX_CHANNELS:
        raise UnsupportedWavError("unsupported channel count %d" % channels)
    if sample_rate <= 0:
        raise WavFormatError("invalid sample rate %d" % sample_rate)

    if audio_format == 1 and bits == 16:
        raw = np.frombuffer(payload[:len(payload) // 2 * 2], dtype="<i2")
        x = raw.astype(np.float64) / 2.0 ** 15
    elif audio_format == 1 and bits == 24:
        usable = len(payload) // 3 * 3
        b = np.frombuffer(payload[:usable], dtype=np.uint8).reshape(-1, 3)
        raw = (b[:, 0].astype(np.int32)
               | (b[:, 1].astype(np.int32) << 8)
               | (b[:, 2].astype(np.int32) << 16))
        raw -= (raw & 0x800000) << 1  # sign extend
        x = raw.astype(np.float64) / 2.0 ** 23
    elif audio_format == 3 and bits == 32:
        raw = np.frombuffer(payload[:len(payload) // 4 * 4], dtype="<f4")
        x = raw.astype(np.float64)
    else:
        raise UnsupportedWavError(
            "unsupported codec: format=%d bits=%d (PCM16/PCM24/float32 only)"
            % (audio_format, bits))

    frames = len(x) // channels
    x = x[:frames * channels].reshape(frames, channels).mean(axis=1)
    np.clip(x, -1.0, 1.0, out=x)
    return AudioBuffer(x, sample_rate)


def encode_wav(buf: AudioBuffer, fmt: str = "float32") -> bytes:
    """Encode a buffer as WAV bytes; float32 round-trips bit-exactly."""
    if fmt == "float32":
        payload = buf.samples.astype("<f4").tobytes()
        code, bits = 3, 32
    elif fmt == "pcm16":
        scaled = np.clip(np.round(buf.samples * 2.0 ** 15), -32768, 32767)
        payload = scaled.astype("<i2").tobytes()
        code, bits = 1, 16
    else:
        raise ValueError("fmt must be 'float32' or 'pcm16'")
    block = bits // 8
    header = struct.pack(
        "<4sI4s4sIHHIIHH4sI",
        b"RIFF", 36 + len(payload), b"WAVE",
        b"fmt ", 16, code, 1, buf.sample_rate,
        buf.sample_rate * block, block, bits,
        b"data", len(payload))
    return header + payload


def _design_lowpass(up: int, down: int) -> np.ndarray:
    n_taps = _TAPS_PER_PHASE * max(up, down) + 1
    t = np.arange(n_taps) - (n_taps - 1) / 2.0
    cutoff = 1.0 / max(up, down)
    h = up * cutoff * np.sinc(cutoff * t)
    return h * np.kaiser(n_taps, _KAISER_BETA)


def resample(buf: AudioBuffer, target_rate: int) -> AudioBuffer:
    """Band-limited resampling to target_rate.

    Output length is round(n * target / source). Equal rates return the
    input samples unchanged.
    """
    target_rate = int(target_rate)
    if target_rate <= 0:
        raise ValueError("target_rate must be positive")
    if target_rate == buf.sample_rate:
        return AudioBuffer(buf.samples.copy(), target_rate)

    g = math.gcd(target_rate, buf.sample_rate)
    up, down = target_rate // g, buf.sample_rate // g
    y = resample_poly(buf.samples, up, down, window=_design_lowpass(up, down))

    out_len = int(math.floor(len(buf.samples) * target_rate / buf.sample_rate + 0.5))
    if len(y) < out_len:
        y = np.pad(y, (0, out_len - len(y)))
    return AudioBuffer(y[:out_len], target_rate)
