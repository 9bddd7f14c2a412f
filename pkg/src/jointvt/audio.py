"""Mel-spectrogram images, Griffin-Lim inversion and LPC formant tracking."""
from __future__ import annotations

import json
from functools import lru_cache
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from PIL import Image
from scipy.optimize import nnls

from .synth import AudioClip


class FormantError(ValueError):
    pass


@dataclass(frozen=True)
class StftParams:
    n_fft: int = 1024
    hop: int = 256

    def __post_init__(self):
        if self.n_fft < 2 or self.n_fft & (self.n_fft - 1):
            raise ValueError(f"n_fft must be a power of two, got {self.n_fft}")
        if not 0 < self.hop <= self.n_fft:
            raise ValueError(f"hop must lie in (0, n_fft], got {self.hop}")


@dataclass
class MelSpectrogram:
    values: np.ndarray  # (n_mels, n_frames) in [0, 1]
    sample_rate: int
    stft: StftParams = StftParams()
    fmin: float = 0.0
    fmax: float | None = None
    norm_floor_db: float = -80.0

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2 or self.values.shape[0] < 8:
            raise ValueError("mel spectrogram must be (n_mels >= 8, n_frames)")
        if np.any(self.values < 0) or np.any(self.values > 1):
            raise ValueError("mel values must lie in [0, 1]")
        if self.fmax is None:
            self.fmax = self.sample_rate / 2

    @property
    def n_mels(self):
        return self.values.shape[0]

    @property
    def n_frames(self):
        return self.values.shape[1]

    def sidecar(self) -> dict:
        return {"stft": asdict(self.stft), "n_mels": self.n_mels, "n_frames": self.n_frames,
                "sample_rate": self.sample_rate, "fmin": self.fmin, "fmax": self.fmax,
                "norm_floor_db": self.norm_floor_db}


def hann(n):
    # periodic Hann, as used for STFT analysis
    return 0.5 - 0.5 * np.cos(2 * np.pi * np.arange(n) / n)


def frame_signal(x, p: StftParams):
    """Reflect-pad by n_fft/2 on both sides and slice into hop-spaced frames."""
    pad = p.n_fft // 2
    xp = np.pad(x, pad, mode="reflect")
    n_frames = 1 + (len(xp) - p.n_fft) // p.hop
    idx = np.arange(p.n_fft)[None, :] + p.hop * np.arange(n_frames)[:, None]
    return xp[idx]


def stft(clip: AudioClip, p: StftParams = StftParams()) -> np.ndarray:
    x = clip.samples if isinstance(clip, AudioClip) else np.asarray(clip, dtype=np.float64)
    if len(x) < p.n_fft:
        raise ValueError(f"clip has {len(x)} samples, shorter than one frame ({p.n_fft})")
    frames = frame_signal(x, p) * hann(p.n_fft)
    return np.fft.rfft(frames, axis=1).T


def istft(spec, p: StftParams, length):
    """Weighted overlap-add inverse of :func:`stft`."""
    win = hann(p.n_fft)
    frames = np.fft.irfft(spec.T, n=p.n_fft, axis=1) * win
    n_frames = frames.shape[0]
    total = p.n_fft + p.hop * (n_frames - 1)
    y = np.zeros(total)
    wsum = np.zeros(total)
    for k in range(n_frames):
        s = k * p.hop
        y[s:s + p.n_fft] += frames[k]
        wsum[s:s + p.n_fft] += win ** 2
    y /= np.maximum(wsum, 1e-8)
    pad = p.n_fft // 2
    y = y[pad:pad + length]
    if len(y) < length:
        y = np.pad(y, (0, length - len(y)))
    return y


def hz_to_mel(f):
    """Slaney mel scale: linear below 1 kHz, logarithmic above."""
    f = np.asarray(f, dtype=np.float64)
    f_sp = 200.0 / 3
    mels = f / f_sp
    min_log_hz = 1000.0
    min_log_mel = min_log_hz / f_sp
    logstep = np.log(6.4) / 27.0
    return np.where(f >= min_log_hz, min_log_mel + np.log(np.maximum(f, 1e-10) / min_log_hz) / logstep, mels)


def mel_to_hz(m):
    m = np.asarray(m, dtype=np.float64)
    f_sp = 200.0 / 3
    min_log_hz = 1000.0
    min_log_mel = min_log_hz / f_sp
    logstep = np.log(6.4) / 27.0
    return np.where(m >= min_log_mel, min_log_hz * np.exp(logstep * (m - min_log_mel)), f_sp * m)


def mel_band_edges(n_mels, fmin, fmax):
    """n_mels + 2 frequencies; triangle k spans edges[k]..edges[k+2] and peaks at edges[k+1]."""
    return mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))


def mel_filterbank(sample_rate, n_fft, n_mels, fmin=0.0, fmax=None):
    """Triangular filters, each scaled to unit area (Slaney normalisation)."""
    if fmax is None:
        fmax = sample_rate / 2
    freqs = np.fft.rfftfreq(n_fft, 1.0 / sample_rate)
    edges = mel_band_edges(n_mels, fmin, fmax)
    lower = (freqs[None, :] - edges[:-2, None]) / (edges[1:-1] - edges[:-2])[:, None]
    upper = (edges[2:, None] - freqs[None, :]) / (edges[2:] - edges[1:-1])[:, None]
    fb = np.maximum(0.0, np.minimum(lower, upper))
    fb *= (2.0 / (edges[2:] - edges[:-2]))[:, None]
    return fb


def power_to_unit(power, floor_db=-80.0):
    """dB relative to the peak, floored, then mapped [floor_db, 0] -> [0, 1]."""
    peak = power.max()
    if peak <= 0:
        return np.zeros_like(power)
    db = 10.0 * np.log10(np.maximum(power, peak * 1e-30) / peak)
    db = np.maximum(db, floor_db)
    return (db - floor_db) / -floor_db


def unit_to_power(values, floor_db=-80.0):
    db = floor_db + values * -floor_db
    power = 10.0 ** (db / 10.0)
    return np.where(values > 0, power, 0.0)


def mel_spectrogram(clip: AudioClip, p: StftParams = StftParams(), n_mels: int = 64,
                    fmin: float = 0.0, fmax: float | None = None,
                    norm_floor_db: float = -80.0) -> MelSpectrogram:
    if n_mels < 8:
        raise ValueError("n_mels must be at least 8")
    X = stft(clip, p)
    fb = mel_filterbank(clip.sample_rate, p.n_fft, n_mels, fmin, fmax)
    power = fb @ (np.abs(X) ** 2)
    return MelSpectrogram(power_to_unit(power, norm_floor_db), clip.sample_rate, p, fmin,
                          fmax, norm_floor_db)


@lru_cache(maxsize=4)
def sinusoid_kernels(n_fft, step=0.5):
    """Power spectra of Hann-windowed cosines centred every ``step`` bins."""
    n = np.arange(n_fft)
    centres = np.arange(0.0, n_fft // 2 + 1e-9, step)
    frames = np.cos(2 * np.pi * centres[:, None] * n[None, :] / n_fft) * hann(n_fft)
    return (np.abs(np.fft.rfft(frames, axis=1)) ** 2).T


def mel_to_linear(m: MelSpectrogram, method="pinv"):
    """Recover a non-negative linear power spectrogram from mel power.

    ``pinv`` clamps the pseudo-inverse at zero, ``nnls`` solves a
    non-negative least-squares fit against the filterbank per frame, and
    ``kernel`` fits a non-negative mix of windowed-sinusoid spectra, which
    keeps narrow spectral peaks on the right FFT bin.
    """
    fb = mel_filterbank(m.sample_rate, m.stft.n_fft, m.n_mels, m.fmin, m.fmax)
    mel_power = unit_to_power(m.values, m.norm_floor_db)
    if method == "pinv":
        return np.maximum(np.linalg.pinv(fb) @ mel_power, 0.0)
    if method == "nnls":
        return np.stack([nnls(fb, col)[0] for col in mel_power.T], axis=1)
    if method == "kernel":
        K = sinusoid_kernels(m.stft.n_fft)
        D = fb @ K
        weights = np.stack([nnls(D, col)[0] if col.any() else np.zeros(D.shape[1])
                            for col in mel_power.T], axis=1)
        return K @ weights
    raise ValueError(f"unknown mel inversion method {method!r}")


def griffin_lim(m: MelSpectrogram, iterations: int = 60, seed: int = 0,
                method: str = "pinv", return_errors: bool = False):
    """Estimate a waveform whose mel spectrogram matches ``m``.

    With ``iterations=0`` the linear magnitude is inverted with zero phase.
    ``return_errors`` also yields the per-iteration consistency error
    ``|| |STFT(x)| - M ||_F / ||M||_F`` measured on the linear magnitude target.
    """
    p = m.stft
    mag = np.sqrt(mel_to_linear(m, method))
    length = p.hop * (m.n_frames - 1)
    errors = []
    if not np.any(mag):
        y = np.zeros(max(length, 1))
        return (AudioClip(y, m.sample_rate), errors) if return_errors else AudioClip(y, m.sample_rate)
    rng = np.random.default_rng(seed)
    if iterations == 0:
        angles = np.ones_like(mag, dtype=np.complex128)
    else:
        angles = np.exp(2j * np.pi * rng.random(mag.shape))
    norm = np.linalg.norm(mag)
    y = istft(mag * angles, p, length)
    for _ in range(iterations):
        X = _stft_padded(y, p)
        errors.append(float(np.linalg.norm(np.abs(X) - mag) / norm))
        angles = np.exp(1j * np.angle(X))
        y = istft(mag * angles, p, length)
    peak = np.max(np.abs(y))
    if peak > 0:
        y = 0.9 * y / peak
    clip = AudioClip(y, m.sample_rate)
    return (clip, errors) if return_errors else clip


def _stft_padded(y, p):
    # short signals are zero-extended to one frame so the STFT is defined
    if len(y) < p.n_fft:
        y = np.pad(y, (0, p.n_fft - len(y)))
    return stft(AudioClip(y), p)


def dominant_bin(clip: AudioClip, p: StftParams = StftParams()) -> int:
    """Argmax bin of the mean magnitude over frames that avoid the padded edges."""
    X = np.abs(stft(clip, p))
    edge = p.n_fft // (2 * p.hop)
    inner = X[:, edge:X.shape[1] - edge] if X.shape[1] > 2 * edge else X
    return int(inner.mean(axis=1).argmax())


def resize(values, shape):
    """Bilinear resize of a 2-D float grid."""
    img = Image.fromarray(np.asarray(values, dtype=np.float32), mode="F")
    out = np.asarray(img.resize((shape[1], shape[0]), Image.BILINEAR), dtype=np.float64)
    return np.clip(out, 0.0, 1.0)


def save_mel_png(path, m: MelSpectrogram, extra: dict | None = None):
    """8-bit PNG (low mel band at the bottom row) plus a JSON sidecar."""
    path = Path(path)
    arr = np.round(255.0 * m.values[::-1]).astype(np.uint8)
    Image.fromarray(arr, mode="L").save(path)
    meta = m.sidecar()
    if extra:
        meta.update(extra)
    path.with_suffix(".json").write_text(json.dumps(meta, indent=2, sort_keys=True))


def load_mel_png(path) -> MelSpectrogram:
    path = Path(path)
    meta = json.loads(path.with_suffix(".json").read_text())
    values = np.asarray(Image.open(path), dtype=np.float64)[::-1] / 255.0
    return MelSpectrogram(values, meta["sample_rate"], StftParams(**meta["stft"]),
                          meta["fmin"], meta["fmax"], meta["norm_floor_db"])


def levinson_durbin(r, order):
    """LPC polynomial [1, a1, ..., ap] from autocorrelation lags r[0..p]."""
    a = np.zeros(order + 1)
    a[0] = 1.0
    err = r[0]
    for i in range(1, order + 1):
        if err <= 0:
            break
        k = -(r[i] + np.dot(a[1:i], r[i - 1:0:-1])) / err
        a[1:i] = a[1:i] + k * a[i - 1:0:-1]
        a[i] = k
        err *= 1.0 - k * k
    return a, err


MAX_FLATNESS = 0.5


def lpc_order(sample_rate):
    return 2 + int(round(sample_rate / 1000))


def frame_formants(frame, sample_rate, order, max_bandwidth=400.0, fmin=90.0):
    """All qualifying resonances of one pre-emphasised, windowed frame."""
    x = frame * np.hamming(len(frame))
    r = np.correlate(x, x, mode="full")[len(x) - 1:len(x) + order]
    if r[0] <= 0:
        return np.array([])
    a, _ = levinson_durbin(r, order)
    roots = np.roots(a)
    roots = roots[np.imag(roots) > 0]
    freqs = np.angle(roots) * sample_rate / (2 * np.pi)
    bw = -np.log(np.abs(roots)) * sample_rate / np.pi
    fmax = sample_rate / 2 - 50.0
    keep = (bw < max_bandwidth) & (freqs >= fmin) & (freqs <= fmax)
    return np.sort(freqs[keep])


def spectral_flatness(clip: AudioClip, p: StftParams = StftParams()) -> float:
    """Geometric over arithmetic mean of the frame-averaged power spectrum (1 = white)."""
    power = np.abs(stft(clip, p)).mean(axis=1) ** 2 + 1e-20
    return float(np.exp(np.log(power).mean()) / power.mean())


def estimate_formants(clip: AudioClip, n_formants: int = 3, frame_dur: float = 0.025,
                      max_bandwidth: float = 400.0) -> list[float]:
    """Mean of the first ``n_formants`` LPC resonances over 25 ms frames.

    Frames with too few qualifying roots are skipped; if no frame has enough
    the call fails with :class:`FormantError`. Noise-like input (flat
    spectrum) fails too, since any roots found there are chance artefacts.
    """
    sr = clip.sample_rate
    if clip.duration < 0.1:
        raise FormantError(f"need at least 100 ms of audio, got {clip.duration * 1000:.0f} ms")
    flatness = spectral_flatness(clip)
    if flatness > MAX_FLATNESS:
        raise FormantError(f"spectrum is noise-like (flatness {flatness:.2f})")
    x = np.append(clip.samples[0], clip.samples[1:] - 0.97 * clip.samples[:-1])
    n = int(round(frame_dur * sr))
    order = lpc_order(sr)
    found = []
    best = 0
    for start in range(0, len(x) - n + 1, n):
        f = frame_formants(x[start:start + n], sr, order, max_bandwidth)
        best = max(best, len(f))
        if len(f) >= n_formants:
            found.append(f[:n_formants])
    if not found:
        raise FormantError(f"found at most {best} qualifying formants, need {n_formants}")
    return [float(v) for v in np.mean(found, axis=0)]
