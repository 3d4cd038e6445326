"""Vocal preprocessing and time-slice augmentation.

WAV parsing, windowed-sinc resampling to 16 kHz, whole-clip standardization,
one-second segmentation with a 0.2 s hop, and the 256 x 250 magnitude
spectrogram (Hann 512, hop 64).
"""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass, replace
from fractions import Fraction

import numpy as np

from .errors import ContractError, WavParseError
from .temporal import FrameSequence

TARGET_RATE = 16000
N_FFT = 512
HOP = 64
N_BINS = 256
SEGMENT_SECONDS = 1.0
HOP_SECONDS = 0.2


@dataclass
class AudioClip:
    samples: np.ndarray
    sample_rate: float

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=float)
        if self.sample_rate <= 0:
            raise ContractError(f"sample rate must be positive, got {self.sample_rate}")

    @property
    def duration(self):
        return len(self.samples) / self.sample_rate


# ---------------------------------------------------------------- WAV I/O

def load_wav(path) -> AudioClip:
    """Read a 16-bit PCM RIFF/WAVE file; stereo is averaged to mono."""
    with open(path, "rb") as fh:
        data = fh.read()
    return parse_wav(data)


def parse_wav(data: bytes) -> AudioClip:
    if len(data) < 12:
        raise WavParseError("file too short for a RIFF header", len(data))
    if data[0:4] != b"RIFF":
        raise WavParseError(f"expected 'RIFF', found {data[0:4]!r}", 0)
    if data[8:12] != b"WAVE":
        raise WavParseError(f"expected 'WAVE', found {data[8:12]!r}", 8)
    off = 12
    fmt = None
    pcm = None
    while off + 8 <= len(data):
        cid = data[off : off + 4]
        (size,) = struct.unpack_from("<I", data, off + 4)
        body = off + 8
        if body + size > len(data):
            raise WavParseError(f"chunk {cid!r} of size {size} overruns the file", off)
        if cid == b"fmt ":
            if size < 16:
                raise WavParseError(f"fmt chunk too small ({size} bytes)", off)
            tag, channels, rate, _, _, bits = struct.unpack_from("<HHIIHH", data, body)
            if tag == 0xFFFE and size >= 40:
                tag = struct.unpack_from("<H", data, body + 24)[0]
            if tag != 1:
                raise WavParseError(f"unsupported format tag {tag} (only PCM)", body)
            if bits != 16:
                raise WavParseError(f"unsupported sample width {bits} bits (only 16)", body + 14)
            if channels not in (1, 2):
                raise WavParseError(f"unsupported channel count {channels}", body + 2)
            fmt = (channels, rate)
        elif cid == b"data":
            if fmt is None:
                raise WavParseError("data chunk before fmt chunk", off)
            pcm = (body, size)
        off = body + size + (size & 1)
    if fmt is None:
        raise WavParseError("no fmt chunk", off)
    if pcm is None:
        raise WavParseError("no data chunk", off)
    channels, rate = fmt
    body, size = pcm
    frame_bytes = 2 * channels
    n = size // frame_bytes
    x = np.frombuffer(data, dtype="<i2", count=n * channels, offset=body).astype(float) / 32768.0
    x = x.reshape(n, channels).mean(axis=1)
    return AudioClip(x, float(rate))


def write_wav(path, clip: AudioClip | np.ndarray, sample_rate=None, channels=1):
    """Write mono (or ``[n, 2]`` stereo) samples in [-1, 1) as 16-bit PCM."""
    if isinstance(clip, AudioClip):
        samples, rate = clip.samples, clip.sample_rate
    else:
        samples, rate = np.asarray(clip, dtype=float), sample_rate
    samples = np.asarray(samples)
    if samples.ndim == 2:
        channels = samples.shape[1]
    q = np.clip(np.round(samples * 32768.0), -32768, 32767).astype("<i2")
    raw = q.tobytes()
    rate = int(rate)
    hdr = b"RIFF" + struct.pack("<I", 36 + len(raw)) + b"WAVE"
    hdr += b"fmt " + struct.pack("<IHHIIHH", 16, 1, channels, rate, rate * 2 * channels, 2 * channels, 16)
    hdr += b"data" + struct.pack("<I", len(raw))
    with open(path, "wb") as fh:
        fh.write(hdr + raw)


# ---------------------------------------------------------------- resampling

def resample(x: np.ndarray, rate_in: float, rate_out: float, taps=16, beta=8.6) -> np.ndarray:
    """Kaiser-windowed sinc interpolation.

    Each output sample sums ``taps`` kernel taps measured at the lower of the
    two rates (so the kernel stretches when decimating). Equal rates return a copy.
    """
    x = np.asarray(x, dtype=float)
    if rate_in == rate_out:
        return x.copy()
    ratio = Fraction(rate_out).limit_denominator(10**6) / Fraction(rate_in).limit_denominator(10**6)
    n_out = int(math.floor(len(x) * ratio))
    cutoff = min(1.0, float(ratio))  # relative to the input Nyquist
    half = taps / 2 / cutoff  # kernel half-width in input samples
    k = np.arange(-int(math.ceil(half)), int(math.ceil(half)) + 1)
    out = np.empty(n_out)
    step = 1.0 / float(ratio)
    chunk = 4096
    for s in range(0, n_out, chunk):
        n = np.arange(s, min(n_out, s + chunk))
        t = n * step
        base = np.floor(t).astype(int)
        idx = base[:, None] + k[None, :]
        d = t[:, None] - idx
        w = np.where(np.abs(d) <= half, _kaiser(d / half, beta), 0.0)
        h = cutoff * np.sinc(cutoff * d) * w
        valid = (idx >= 0) & (idx < len(x))
        vals = x[np.clip(idx, 0, len(x) - 1)] * valid
        out[n] = (h * vals).sum(axis=1)
    return out


def _kaiser(u, beta):
    u = np.clip(u, -1.0, 1.0)
    return np.i0(beta * np.sqrt(1.0 - u * u)) / np.i0(beta)


def standardize(x: np.ndarray) -> np.ndarray:
    mu = x.mean()
    sd = x.std()
    if sd < 1e-12:
        return np.zeros_like(x)
    return (x - mu) / sd


def resample_standardize(clip: AudioClip) -> AudioClip:
    if len(clip.samples) == 0:
        raise ContractError("cannot preprocess an empty clip")
    x = resample(clip.samples, clip.sample_rate, TARGET_RATE)
    return AudioClip(standardize(x), float(TARGET_RATE))


# ---------------------------------------------------------------- spectrogram

def hann(n=N_FFT):
    # periodic Hann, the usual STFT convention
    return 0.5 - 0.5 * np.cos(2 * np.pi * np.arange(n) / n)


def spectrogram_1s(segment: np.ndarray, log_mel=False) -> np.ndarray:
    """Magnitude STFT of a 16000-sample segment -> ``[256, 250]``.

    Reflection padding of 256 on each side centers frame ``i`` on sample
    ``64*i``; the Nyquist bin is dropped. ``log_mel`` returns a 64-band
    log-mel image ``[64, 250]`` instead.
    """
    segment = np.asarray(segment, dtype=float)
    if segment.shape != (TARGET_RATE,):
        raise ContractError(f"spectrogram needs exactly {TARGET_RATE} samples, got {segment.shape}")
    mag = stft_magnitude(segment)
    if log_mel:
        return np.log(mel_filterbank() @ (mag ** 2) + 1e-10)
    return mag


def stft_magnitude(x, n_fft=N_FFT, hop=HOP):
    pad = n_fft // 2
    xp = np.pad(x, pad, mode="reflect")
    n_frames = int(math.ceil(len(x) / hop))
    idx = np.arange(n_fft)[None, :] + hop * np.arange(n_frames)[:, None]
    frames = xp[idx] * hann(n_fft)
    spec = np.abs(np.fft.rfft(frames, axis=1))
    return spec[:, : n_fft // 2].T


def mel_filterbank(n_mels=64, n_fft=N_FFT, rate=TARGET_RATE):
    """Triangular HTK-style mel filters over the 256 kept STFT bins."""
    def hz2mel(f):
        return 2595.0 * np.log10(1.0 + f / 700.0)

    def mel2hz(m):
        return 700.0 * (10 ** (m / 2595.0) - 1.0)

    freqs = np.arange(n_fft // 2) * rate / n_fft
    edges = mel2hz(np.linspace(0.0, hz2mel(rate / 2), n_mels + 2))
    fb = np.zeros((n_mels, len(freqs)))
    for i in range(n_mels):
        lo, c, hi = edges[i], edges[i + 1], edges[i + 2]
        up = (freqs - lo) / (c - lo)
        down = (hi - freqs) / (hi - c)
        fb[i] = np.maximum(0.0, np.minimum(up, down))
    return fb


def segment_hop(clip: AudioClip, win=SEGMENT_SECONDS, hop=HOP_SECONDS) -> list:
    """Overlapping fixed-length segments; a clip shorter than ``win`` is zero-padded once."""
    n_win = int(round(win * clip.sample_rate))
    n_hop = int(round(hop * clip.sample_rate))
    x = clip.samples
    if len(x) == 0:
        raise ContractError("cannot segment an empty clip")
    if len(x) < n_win:
        return [np.concatenate([x, np.zeros(n_win - len(x))])]
    return [x[s : s + n_win].copy() for s in range(0, len(x) - n_win + 1, n_hop)]


def clip_spectrograms(clip: AudioClip, log_mel=False) -> list:
    """Whole chain for one clip: resample+standardize, hop-segment, spectrogram each segment."""
    c = resample_standardize(clip)
    return [spectrogram_1s(s, log_mel) for s in segment_hop(c)]


# ---------------------------------------------------------------- augmentation

def time_slice_augment(seq, rng, min_seconds=1.0):
    """Random contiguous slice lasting at least ``min_seconds``.

    Works on :class:`AudioClip` (sample granularity) and :class:`FrameSequence`
    (frame granularity). Inputs shorter than ``min_seconds`` come back unchanged.
    """
    if isinstance(seq, AudioClip):
        n, rate = len(seq.samples), seq.sample_rate
    elif isinstance(seq, FrameSequence):
        n, rate = seq.T, seq.rate
    else:
        raise ContractError(f"cannot slice {type(seq).__name__}")
    n_min = max(1, int(math.ceil(min_seconds * rate - 1e-9)))
    if n <= n_min:
        return seq
    start = int(rng.integers(0, n - n_min + 1))
    length = int(rng.integers(n_min, n - start + 1))
    if isinstance(seq, AudioClip):
        return AudioClip(seq.samples[start : start + length].copy(), seq.sample_rate)
    return replace(seq, frames=seq.frames[start : start + length].copy())


# ---------------------------------------------------------------- file formats

RAW_MAGIC = b"MRPNRAW1"


def write_raw_matrix(path, m):
    """8-byte magic, u32 rows, u32 cols, then row-major little-endian float64."""
    m = np.asarray(m, dtype=float)
    if m.ndim == 1:
        m = m[None, :]
    with open(path, "wb") as fh:
        fh.write(RAW_MAGIC + struct.pack("<II", *m.shape))
        fh.write(np.ascontiguousarray(m, dtype="<f8").tobytes())


def read_raw_matrix(path) -> np.ndarray:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:8] != RAW_MAGIC:
        raise ContractError(f"{path}: bad raw-matrix magic {blob[:8]!r}")
    rows, cols = struct.unpack_from("<II", blob, 8)
    if len(blob) != 16 + 8 * rows * cols:
        raise ContractError(f"{path}: expected {rows}x{cols} values, file has {(len(blob) - 16) // 8}")
    return np.frombuffer(blob, dtype="<f8", offset=16).reshape(rows, cols).astype(float)


def write_pgm(path, m, flip=True):
    """8-bit binary PGM scaled to the matrix range (row 0 at the bottom when ``flip``)."""
    m = np.asarray(m, dtype=float)
    lo, hi = float(m.min()), float(m.max())
    img = np.zeros_like(m) if hi <= lo else (m - lo) / (hi - lo)
    img = np.round(255 * img).astype(np.uint8)
    if flip:
        img = img[::-1]
    with open(path, "wb") as fh:
        fh.write(f"P5\n{img.shape[1]} {img.shape[0]}\n255\n".encode())
        fh.write(img.tobytes())
