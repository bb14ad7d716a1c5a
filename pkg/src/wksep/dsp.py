"""Time-frequency transforms, masking, log-mel features, and WAV I/O.

Two parallel implementations live here on purpose: a plain numpy STFT/iSTFT
pair used everywhere at inference time, and graph-mode builders (framing,
DFT by matrix product, overlap-add) used when a loss has to differentiate
through waveform synthesis.  Both share the same configuration and padding
conventions, so round trips agree to float precision.
"""

from __future__ import annotations

import wave as _wavefile
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from . import autodiff as ad


@dataclass(frozen=True)
class StftConfig:
    """Analysis/synthesis parameters.

    The window is periodic Hann, frames are centered (reflect padding of
    half a window), and hop may not exceed half the window so the
    overlap-add normalizer stays bounded away from zero (constant
    overlap-add holds for the centered region).
    """

    window_size: int = 256
    fft_size: int = 256
    hop: int = 64
    sample_rate: int = 8000

    def __post_init__(self):
        if min(self.window_size, self.fft_size, self.hop, self.sample_rate) <= 0:
            raise ValueError("StftConfig fields must be positive")
        if self.window_size > self.fft_size:
            raise ValueError(f"window {self.window_size} exceeds fft size {self.fft_size}")
        if self.window_size % 2 or self.fft_size % 2:
            raise ValueError("window and fft sizes must be even")
        if self.hop > self.window_size // 2:
            raise ValueError(f"hop {self.hop} breaks overlap-add (must be <= window/2)")

    @property
    def freq_bins(self):
        return self.fft_size // 2 + 1

    @property
    def pad(self):
        return self.window_size // 2

    def window(self):
        n = np.arange(self.window_size)
        return (0.5 - 0.5 * np.cos(2.0 * np.pi * n / self.window_size)).astype(np.float64)

    def num_frames(self, num_samples):
        if num_samples < self.window_size:
            raise ValueError(f"input too short: {num_samples} samples < window {self.window_size}")
        return int(np.ceil(num_samples / self.hop))

    def max_output_len(self, num_frames):
        return (num_frames - 1) * self.hop + self.window_size - self.pad


TOY_STFT = StftConfig(window_size=256, fft_size=256, hop=64, sample_rate=8000)
FULL_STFT = StftConfig(window_size=1024, fft_size=1024, hop=256, sample_rate=11025)


@dataclass
class Waveform:
    """Mono audio in float64, values nominally within [-1, 1]."""

    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1:
            raise ValueError(f"waveform must be 1-D, got shape {self.samples.shape}")
        if self.samples.size == 0:
            raise ValueError("empty waveform")
        if not np.all(np.isfinite(self.samples)):
            raise ValueError("waveform contains non-finite samples")
        if self.sample_rate <= 0:
            raise ValueError("sample_rate must be positive")

    def __len__(self):
        return self.samples.size

    @property
    def duration(self):
        return self.samples.size / self.sample_rate


@dataclass
class Spectrogram:
    """Magnitude/phase pair produced by ``stft`` (shape [freq_bins, frames])."""

    magnitude: np.ndarray
    phase: np.ndarray
    config: StftConfig

    def __post_init__(self):
        self.magnitude = np.asarray(self.magnitude)
        self.phase = np.asarray(self.phase)
        if self.magnitude.shape != self.phase.shape:
            raise ValueError(f"magnitude {self.magnitude.shape} and phase {self.phase.shape} differ")
        if self.magnitude.ndim != 2 or self.magnitude.shape[0] != self.config.freq_bins:
            raise ValueError(f"expected [{self.config.freq_bins}, frames], got {self.magnitude.shape}")
        if np.any(self.magnitude < 0):
            raise ValueError("negative magnitudes")

    @property
    def num_frames(self):
        return self.magnitude.shape[1]


def _frames_of(x, cfg):
    xp = np.pad(x, cfg.pad, mode="reflect")
    t = cfg.num_frames(x.size)
    idx = np.arange(cfg.window_size)[None, :] + cfg.hop * np.arange(t)[:, None]
    return xp[idx]  # [frames, window]


def stft(wave, cfg):
    """Centered short-time Fourier transform -> ``Spectrogram``."""
    if wave.sample_rate != cfg.sample_rate:
        raise ValueError(f"waveform rate {wave.sample_rate} != config rate {cfg.sample_rate}")
    frames = _frames_of(wave.samples, cfg) * cfg.window()[None, :]
    spec = np.fft.rfft(frames, n=cfg.fft_size, axis=1).T  # [freq, frames]
    return Spectrogram(np.abs(spec), np.angle(spec), cfg)


def istft(spec, out_len):
    """Inverse STFT with normalized overlap-add, cropped to ``out_len``."""
    cfg = spec.config
    t = spec.num_frames
    if out_len <= 0:
        raise ValueError("out_len must be positive")
    if out_len > cfg.max_output_len(t):
        raise ValueError(f"out_len {out_len} exceeds the {cfg.max_output_len(t)} samples covered by {t} frames")
    z = spec.magnitude * np.exp(1j * spec.phase)
    frames = np.fft.irfft(z.T, n=cfg.fft_size, axis=1)[:, : cfg.window_size]
    win = cfg.window()
    frames = frames * win[None, :]
    total = (t - 1) * cfg.hop + cfg.window_size
    buf = np.zeros(total)
    wsum = np.zeros(total)
    w2 = win * win
    for k in range(t):
        buf[k * cfg.hop : k * cfg.hop + cfg.window_size] += frames[k]
        wsum[k * cfg.hop : k * cfg.hop + cfg.window_size] += w2
    region = slice(cfg.pad, cfg.pad + out_len)
    norm = wsum[region]
    out = buf[region] / np.where(norm > 1e-10, norm, 1.0)
    return Waveform(out, cfg.sample_rate)


def apply_mask(spec, mask):
    """Multiply magnitudes by a [0, 1] mask; phase is passed through."""
    mask = np.asarray(mask)
    if mask.shape != spec.magnitude.shape:
        raise ValueError(f"mask shape {mask.shape} != spectrogram shape {spec.magnitude.shape}")
    if np.any(mask < 0.0) or np.any(mask > 1.0):
        raise ValueError("mask entries must lie in [0, 1]")
    return Spectrogram(spec.magnitude * mask, spec.phase.copy(), spec.config)


# ---------------------------------------------------------------------------
# mel features
# ---------------------------------------------------------------------------


def _hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def _mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


@lru_cache(maxsize=8)
def _mel_matrix(fft_size, sample_rate, n_mels):
    bins = fft_size // 2 + 1
    freqs = np.linspace(0.0, sample_rate / 2.0, bins)
    pts = _mel_to_hz(np.linspace(_hz_to_mel(0.0), _hz_to_mel(sample_rate / 2.0), n_mels + 2))
    fb = np.zeros((n_mels, bins))
    for i in range(n_mels):
        lo, mid, hi = pts[i], pts[i + 1], pts[i + 2]
        up = (freqs - lo) / max(mid - lo, 1e-9)
        down = (hi - freqs) / max(hi - mid, 1e-9)
        fb[i] = np.clip(np.minimum(up, down), 0.0, 1.0)
    return fb


def mel_filterbank(cfg, n_mels):
    """Triangular mel filters as an [n_mels, freq_bins] matrix."""
    if n_mels <= 0:
        raise ValueError("n_mels must be positive")
    if n_mels > cfg.freq_bins:
        raise ValueError(f"n_mels {n_mels} exceeds {cfg.freq_bins} frequency bins")
    return _mel_matrix(cfg.fft_size, cfg.sample_rate, n_mels).copy()


def log_mel(spec, n_mels):
    """log1p-compressed mel magnitudes, [n_mels, frames]."""
    fb = mel_filterbank(spec.config, n_mels)
    return np.log1p(fb @ spec.magnitude)


# ---------------------------------------------------------------------------
# graph-mode transforms (differentiable path used inside losses)
# ---------------------------------------------------------------------------


@lru_cache(maxsize=8)
def _dft_matrices(cfg):
    """Constant matrices so the graph STFT/iSTFT reduce to matmuls.

    Analysis: re = frames @ CA, im = frames @ SA with CA[n, f] = cos(2pi f n / N),
    SA[n, f] = -sin(2pi f n / N).  Synthesis folds the irfft conjugate-symmetry
    weights and the synthesis window into [window, freq] matrices.
    """
    n, w = cfg.fft_size, cfg.window_size
    f = np.arange(cfg.freq_bins)
    t = np.arange(w)
    ang = 2.0 * np.pi * np.outer(t, f) / n
    ca = np.cos(ang)
    sa = -np.sin(ang)
    weights = np.full(cfg.freq_bins, 2.0)
    weights[0] = 1.0
    if n % 2 == 0:
        weights[-1] = 1.0
    win = cfg.window()
    syn_c = (win[:, None] * weights[None, :] * np.cos(ang)) / n
    syn_s = -(win[:, None] * weights[None, :] * np.sin(ang)) / n
    return ca, sa, syn_c, syn_s


def _reflect_index(n, pad):
    idx = np.arange(-pad, n + pad)
    period = 2 * (n - 1)
    idx = np.abs(idx) % period
    return np.where(idx >= n, period - idx, idx)


def frame_signal_graph(wave_t, cfg):
    """Reflect-pad and frame a [B, n] graph tensor into [B, frames, window]."""
    bsz, n = wave_t.value.shape
    t = cfg.num_frames(n)
    ridx = _reflect_index(n, cfg.pad)
    idx = np.arange(cfg.window_size)[None, :] + cfg.hop * np.arange(t)[:, None]

    out = wave_t.value[:, ridx][:, idx]

    def bwd(g):
        gp = np.zeros((bsz, n + 2 * cfg.pad), dtype=g.dtype)
        for k in range(t):
            gp[:, k * cfg.hop : k * cfg.hop + cfg.window_size] += g[:, k, :]
        gx = np.zeros((bsz, n), dtype=g.dtype)
        np.add.at(gx.T, ridx, gp.T)  # fold reflected positions back
        ad._accum(wave_t, gx)

    return ad._node(out, (wave_t,), bwd)


def stft_mag_graph(wave_t, cfg, eps=1e-12):
    """Differentiable magnitude STFT: [B, n] -> [B, freq_bins, frames]."""
    ca, sa, _, _ = _dft_matrices(cfg)
    dtype = wave_t.value.dtype
    frames = frame_signal_graph(wave_t, cfg)
    win = ad.constant(cfg.window().astype(dtype))
    frames = ad.scale_by_vector(frames, win, axis=-1)
    re = ad.matmul(frames, ad.constant(ca.astype(dtype)))  # [B, T, F]
    im = ad.matmul(frames, ad.constant(sa.astype(dtype)))
    mag = ad.sqrt(ad.add_scalar(ad.add(ad.mul(re, re), ad.mul(im, im)), eps))
    return ad.transpose(mag, (0, 2, 1))


def overlap_add_graph(frames_t, cfg, out_len):
    """OLA of windowed synthesis frames [B, T, window] -> [B, out_len]."""
    bsz, t, w = frames_t.value.shape
    if out_len > cfg.max_output_len(t):
        raise ValueError(f"out_len {out_len} exceeds coverage of {t} frames")
    total = (t - 1) * cfg.hop + w
    win2 = cfg.window() ** 2
    wsum = np.zeros(total)
    for k in range(t):
        wsum[k * cfg.hop : k * cfg.hop + w] += win2
    region = slice(cfg.pad, cfg.pad + out_len)
    inv = (1.0 / np.where(wsum > 1e-10, wsum, 1.0))[region].astype(frames_t.value.dtype)

    def fwd(v):
        buf = np.zeros((bsz, total), dtype=v.dtype)
        for k in range(t):
            buf[:, k * cfg.hop : k * cfg.hop + w] += v[:, k, :]
        return buf[:, region] * inv

    def bwd(g):
        gi = g * inv
        gbuf = np.zeros((bsz, total), dtype=g.dtype)
        gbuf[:, region] = gi
        gframes = np.empty((bsz, t, w), dtype=g.dtype)
        for k in range(t):
            gframes[:, k, :] = gbuf[:, k * cfg.hop : k * cfg.hop + w]
        ad._accum(frames_t, gframes)

    return ad._node(fwd(frames_t.value), (frames_t,), bwd)


def istft_graph(mag_t, phase, cfg, out_len):
    """Differentiable iSTFT of a magnitude tensor with fixed phase.

    ``mag_t`` is [B, freq_bins, frames] in the graph, ``phase`` a constant
    ndarray of the same shape.  Returns a [B, out_len] waveform tensor.
    """
    _, _, syn_c, syn_s = _dft_matrices(cfg)
    dtype = mag_t.value.dtype
    cphi = ad.constant(np.cos(phase).astype(dtype))
    sphi = ad.constant(np.sin(phase).astype(dtype))
    re = ad.mul(mag_t, cphi)
    im = ad.mul(mag_t, sphi)
    re = ad.transpose(re, (0, 2, 1))  # [B, T, F]
    im = ad.transpose(im, (0, 2, 1))
    frames = ad.add(
        ad.matmul(re, ad.constant(syn_c.T.astype(dtype))),
        ad.matmul(im, ad.constant(syn_s.T.astype(dtype))),
    )  # [B, T, window]
    return overlap_add_graph(frames, cfg, out_len)


def log_mel_graph(mag_t, cfg, n_mels):
    """Differentiable log-mel: [B, freq_bins, frames] -> [B, n_mels, frames]."""
    fb = mel_filterbank(cfg, n_mels).astype(mag_t.value.dtype)
    bsz, _, t = mag_t.value.shape
    x = ad.transpose(mag_t, (0, 2, 1))  # [B, T, F]
    m = ad.matmul(x, ad.constant(fb.T))  # [B, T, n_mels]
    m = ad.log(ad.add_scalar(m, 1.0))
    return ad.transpose(m, (0, 2, 1))


# ---------------------------------------------------------------------------
# WAV files (16-bit PCM mono)
# ---------------------------------------------------------------------------


def write_wav(path, wave):
    """Write mono 16-bit PCM; samples are clipped to [-1, 1] first."""
    x = np.clip(wave.samples, -1.0, 1.0)
    pcm = (x * 32767.0).round().astype("<i2")
    with _wavefile.open(str(path), "wb") as f:
        f.setnchannels(1)
        f.setsampwidth(2)
        f.setframerate(wave.sample_rate)
        f.writeframes(pcm.tobytes())


def read_wav(path):
    """Read mono 16-bit PCM back into a float64 ``Waveform``."""
    with _wavefile.open(str(path), "rb") as f:
        if f.getnchannels() != 1:
            raise ValueError(f"{path}: expected mono, got {f.getnchannels()} channels")
        if f.getsampwidth() != 2:
            raise ValueError(f"{path}: expected 16-bit samples")
        rate = f.getframerate()
        raw = f.readframes(f.getnframes())
    pcm = np.frombuffer(raw, dtype="<i2")
    return Waveform(pcm.astype(np.float64) / 32767.0, rate)
