"""Two-control articulatory synthesizer.

A tongue control (position, openness) is turned into a 44-section area
function, sounded through a Kelly-Lochbaum scattering waveguide driven by a
Rosenberg glottal pulse train, and drawn as a mid-sagittal outline image.
"""
from __future__ import annotations

import itertools
import json
import wave
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

import numba
import numpy as np
from matplotlib.path import Path as PolyPath
from PIL import Image
from scipy.signal import resample_poly

SAMPLE_RATE = 22020
SPEED_OF_SOUND = 343.0  # m/s
TRACT_LENGTH_CM = 17.5
N_SECTIONS = 44
MIN_DIAMETER = 0.05  # cm

# Rest profile: pharynx sections are wider than the oral cavity.
PHARYNX_DIAMETER = 1.5
ORAL_DIAMETER = 1.0
PHARYNX_END = 0.45  # fraction of the tract, measured from the glottis
# Range of section indices the tongue constriction can be centred on.
TONGUE_LO = 6.0
TONGUE_HI = 38.0
TONGUE_HALF_WIDTH = 7.0  # sections

GLOTTAL_REFLECTION = 0.75
LIP_REFLECTION = -0.85


@dataclass(frozen=True)
class TongueParams:
    tongue_position: float
    tongue_diameter: float
    f0: float = 140.0

    def __post_init__(self):
        for name in ("tongue_position", "tongue_diameter"):
            v = getattr(self, name)
            if not np.isfinite(v) or not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")
        if not np.isfinite(self.f0) or not 60.0 <= self.f0 <= 400.0:
            raise ValueError(f"f0 must lie in [60, 400] Hz, got {self.f0}")


@dataclass
class AreaFunction:
    diameters: np.ndarray  # cm, glottis first
    tract_length: float = TRACT_LENGTH_CM

    def __post_init__(self):
        self.diameters = np.asarray(self.diameters, dtype=np.float64)
        if self.diameters.ndim != 1 or self.n_sections < 2:
            raise ValueError("an area function needs at least 2 sections")
        if not np.all(np.isfinite(self.diameters)) or np.any(self.diameters <= 0):
            raise ValueError("every section diameter must be positive and finite")
        if not self.tract_length > 0:
            raise ValueError("tract length must be positive")

    @property
    def n_sections(self) -> int:
        return len(self.diameters)

    @property
    def section_length(self) -> float:
        return self.tract_length / self.n_sections

    @property
    def areas(self) -> np.ndarray:
        return np.pi * (self.diameters / 2) ** 2

    @classmethod
    def uniform(cls, diameter=1.5, n_sections=N_SECTIONS, tract_length=TRACT_LENGTH_CM):
        return cls(np.full(n_sections, float(diameter)), tract_length)


@dataclass
class AudioClip:
    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1:
            raise ValueError("audio must be mono")
        if not np.all(np.isfinite(self.samples)):
            raise ValueError("audio contains NaN or Inf")

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate

    def trimmed(self, start: float) -> "AudioClip":
        return AudioClip(self.samples[int(round(start * self.sample_rate)):], self.sample_rate)


def rest_profile(n_sections: int = N_SECTIONS) -> np.ndarray:
    """Pharynx-to-oral rest diameters with a raised-cosine blend between them."""
    x = (np.arange(n_sections) + 0.5) / n_sections
    blend = np.clip((x - (PHARYNX_END - 0.1)) / 0.2, 0.0, 1.0)
    blend = 0.5 - 0.5 * np.cos(np.pi * blend)
    return PHARYNX_DIAMETER + (ORAL_DIAMETER - PHARYNX_DIAMETER) * blend


def tongue_center(tongue_position: float, n_sections: int = N_SECTIONS) -> float:
    scale = n_sections / N_SECTIONS
    return scale * (TONGUE_LO + tongue_position * (TONGUE_HI - TONGUE_LO))


def tongue_to_area(p: TongueParams, n_sections: int = N_SECTIONS) -> AreaFunction:
    """Superimpose a raised-cosine constriction on the rest profile.

    ``tongue_diameter`` is the openness at the bump centre: 0 closes it to
    ``MIN_DIAMETER`` and 1 leaves the rest profile untouched.
    """
    if not isinstance(p, TongueParams):
        raise TypeError("expected TongueParams")
    rest = rest_profile(n_sections)
    centre = tongue_center(p.tongue_position, n_sections)
    half = TONGUE_HALF_WIDTH * n_sections / N_SECTIONS
    dist = np.abs(np.arange(n_sections) - centre)
    bump = np.where(dist < half, 0.5 + 0.5 * np.cos(np.pi * dist / half), 0.0)
    depth = (1.0 - p.tongue_diameter) * bump
    d = MIN_DIAMETER + (rest - MIN_DIAMETER) * (1.0 - depth)
    return AreaFunction(np.maximum(d, MIN_DIAMETER))


def reflection_coefficients(a: AreaFunction) -> np.ndarray:
    A = a.areas
    return (A[:-1] - A[1:]) / (A[:-1] + A[1:])


def rosenberg_pulse_train(f0, duration, sample_rate, open_quotient=0.6, speed_quotient=3.0):
    """Glottal volume-velocity pulses.

    The open phase is split into an opening ramp and a closing ramp whose
    durations have ratio ``speed_quotient``.
    """
    if not 0.0 < open_quotient < 1.0:
        raise ValueError("open quotient must lie in (0, 1)")
    if not speed_quotient > 0:
        raise ValueError("speed quotient must be positive")
    n = int(round(duration * sample_rate))
    t = np.arange(n) / sample_rate
    phase = (t * f0) % 1.0
    tp = open_quotient * speed_quotient / (1.0 + speed_quotient)
    tn = open_quotient / (1.0 + speed_quotient)
    out = np.zeros(n)
    rising = phase < tp
    out[rising] = 0.5 * (1.0 - np.cos(np.pi * phase[rising] / tp))
    falling = (phase >= tp) & (phase < tp + tn)
    out[falling] = np.cos(0.5 * np.pi * (phase[falling] - tp) / tn)
    return out


@numba.njit(cache=True)
def _kelly_lochbaum(source, refl, r_glottis, r_lips):
    # Pressure waves, one sample of travel per section in each direction.
    # Junction i: f[i+1] = (1 + r) f[i] - r b[i+1];  b[i] = r f[i] + (1 - r) b[i+1]
    n = refl.shape[0] + 1
    fwd = np.zeros(n)
    bwd = np.zeros(n)
    new_fwd = np.zeros(n)
    new_bwd = np.zeros(n)
    out = np.zeros(source.shape[0])
    for t in range(source.shape[0]):
        new_fwd[0] = source[t] + r_glottis * bwd[0]
        new_bwd[n - 1] = r_lips * fwd[n - 1]
        for i in range(n - 1):
            r = refl[i]
            w = r * (fwd[i] - bwd[i + 1])
            new_fwd[i + 1] = fwd[i] + w
            new_bwd[i] = bwd[i + 1] + w
        out[t] = (1.0 + r_lips) * fwd[n - 1]
        for i in range(n):
            fwd[i] = new_fwd[i]
            bwd[i] = new_bwd[i]
    return out


def synthesize(
    a: AreaFunction,
    f0: float = 140.0,
    duration: float = 0.5,
    sample_rate: int = SAMPLE_RATE,
    open_quotient: float = 0.6,
    speed_quotient: float = 3.0,
    glottal_reflection: float = GLOTTAL_REFLECTION,
    lip_reflection: float = LIP_REFLECTION,
    speed_of_sound: float = SPEED_OF_SOUND,
) -> AudioClip:
    """Sound a steady vowel through the waveguide and peak-normalise to 0.9.

    The waveguide runs at the rate where one sample spans one section
    (about 86 kHz for the default tract) and is resampled to ``sample_rate``.
    """
    if not duration > 0:
        raise ValueError(f"duration must be positive, got {duration}")
    if not isinstance(a, AreaFunction):
        raise TypeError("expected AreaFunction")
    internal_rate = a.n_sections * speed_of_sound * 100.0 / a.tract_length
    ratio = Fraction(sample_rate / internal_rate).limit_denominator(5000)
    # Pad so the resampler edge and the initial silence do not eat the clip.
    source = rosenberg_pulse_train(f0, duration + 0.02, internal_rate, open_quotient,
                                  speed_quotient)
    source = np.diff(source, prepend=0.0)  # radiated flow derivative
    raw = _kelly_lochbaum(source, reflection_coefficients(a), glottal_reflection, lip_reflection)
    y = resample_poly(raw, ratio.numerator, ratio.denominator)
    n = int(round(duration * sample_rate))
    y = y[:n]
    if len(y) < n:
        y = np.pad(y, (0, n - len(y)))
    peak = np.max(np.abs(y))
    if peak > 0:
        y = 0.9 * y / peak
    return AudioClip(y, sample_rate)


# Outer wall of the tract, glottis to lips, in unit image coordinates (x right, y down).
def _outer_wall(n):
    s = np.linspace(0.0, 1.0, n)
    # pharynx runs up the back wall, then the palate arcs forward to the lips
    split = 0.45
    pts = np.empty((n, 2))
    vert = s <= split
    u = s[vert] / split
    pts[vert, 0] = 0.22
    pts[vert, 1] = 0.92 - 0.5 * u
    arc = ~vert
    u = (s[arc] - split) / (1 - split)
    # palate dome sweeping 150 degrees forward to the lips
    theta = np.pi - u * np.pi * 5.0 / 6.0
    pts[arc, 0] = 0.55 + 0.33 * np.cos(theta)
    pts[arc, 1] = 0.42 - 0.28 * np.sin(theta)
    tang = np.gradient(pts, axis=0)
    tang /= np.linalg.norm(tang, axis=1, keepdims=True)
    # inward normal points to the right of travel in image coordinates
    normal = np.stack([-tang[:, 1], tang[:, 0]], axis=1)
    return pts, normal


@dataclass
class VtImage:
    pixels: np.ndarray  # (channels, height, width), values in [0, 1]

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.float64)
        if self.pixels.ndim == 2:
            self.pixels = self.pixels[None]
        if self.pixels.ndim != 3:
            raise ValueError("image must be (channels, height, width)")
        if np.any(self.pixels < 0) or np.any(self.pixels > 1):
            raise ValueError("pixels must lie in [0, 1]")

    @property
    def shape(self):
        return self.pixels.shape


def render_geometry(p: TongueParams, h: int = 32, w: int = 32, channels: int = 1,
                    supersample: int = 4) -> VtImage:
    """Rasterise the mid-sagittal outline for a tongue setting.

    The tongue surface sits inward of a fixed outer wall by the section
    diameters, so the picture carries the same two degrees of freedom as the
    area function. Anti-aliasing is by box-filtered supersampling.
    """
    if h < 16 or w < 16:
        raise ValueError(f"image must be at least 16x16, got {h}x{w}")
    if channels not in (1, 3):
        raise ValueError("channels must be 1 or 3")
    area = tongue_to_area(p)
    n_pts = 4 * area.n_sections
    wall, normal = _outer_wall(n_pts)
    # interpolate diameters along the wall; 1 cm ~ 0.14 image units
    s_sec = (np.arange(area.n_sections) + 0.5) / area.n_sections
    d = np.interp(np.linspace(0, 1, n_pts), s_sec, area.diameters)
    tongue = wall + 0.14 * d[:, None] * normal
    # tongue body polygon closes through fixed jaw/floor points
    floor = np.array([[0.84, 0.60], [0.60, 0.96], [0.30, 0.96]])
    body = np.concatenate([tongue, floor])
    # thin band for the outer wall itself
    wall_poly = np.concatenate([wall - 0.035 * normal, wall[::-1]])

    ss = supersample
    yy, xx = np.mgrid[0:h * ss, 0:w * ss]
    pts = np.stack([(xx.ravel() + 0.5) / (w * ss), (yy.ravel() + 0.5) / (h * ss)], axis=1)
    fill = PolyPath(body).contains_points(pts) | PolyPath(wall_poly).contains_points(pts)
    img = fill.reshape(h * ss, w * ss).astype(np.float64)
    img = img.reshape(h, ss, w, ss).mean(axis=(1, 3))
    pixels = np.repeat(img[None], channels, axis=0)
    return VtImage(pixels)


def write_wav(path, clip: AudioClip):
    """16-bit little-endian mono PCM."""
    pcm = np.clip(np.round(clip.samples * 32767.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as f:
        f.setnchannels(1)
        f.setsampwidth(2)
        f.setframerate(int(clip.sample_rate))
        f.writeframes(pcm.tobytes())


def read_wav(path) -> AudioClip:
    with wave.open(str(path), "rb") as f:
        if f.getsampwidth() != 2:
            raise ValueError(f"{path}: only 16-bit PCM is supported")
        rate = f.getframerate()
        n_ch = f.getnchannels()
        data = np.frombuffer(f.readframes(f.getnframes()), dtype="<i2").astype(np.float64)
    if n_ch > 1:
        data = data.reshape(-1, n_ch).mean(axis=1)
    return AudioClip(data / 32767.0, rate)


def write_png(path, img: VtImage):
    arr = np.round(img.pixels * 255.0).astype(np.uint8)
    if arr.shape[0] == 1:
        Image.fromarray(arr[0], mode="L").save(path, optimize=False)
    else:
        Image.fromarray(np.moveaxis(arr, 0, -1), mode="RGB").save(path, optimize=False)


def read_png(path) -> VtImage:
    arr = np.asarray(Image.open(path), dtype=np.float64) / 255.0
    if arr.ndim == 3:
        arr = np.moveaxis(arr, -1, 0)
    return VtImage(arr)


@dataclass
class SweepGrid:
    n_pos: int = 50
    n_diam: int = 40
    f0_list: list = field(default_factory=lambda: [140.0])
    # openness is swept over a range that keeps the vowel voiced and unblocked
    diam_range: tuple = (0.05, 1.0)
    height: int = 32
    width: int = 32
    channels: int = 1
    duration: float = 0.5


def grid_params(grid: SweepGrid):
    positions = np.linspace(0.0, 1.0, grid.n_pos) if grid.n_pos > 1 else np.array([0.5])
    lo, hi = grid.diam_range
    diams = np.linspace(lo, hi, grid.n_diam) if grid.n_diam > 1 else np.array([0.5 * (lo + hi)])
    for f0, pos, diam in itertools.product(grid.f0_list, positions, diams):
        yield TongueParams(float(pos), float(diam), float(f0))


def sweep_dataset(grid: SweepGrid, out_dir, seed: int = 0) -> Path:
    """Write one WAV/PNG pair per grid point plus ``manifest.jsonl``.

    The sweep is a deterministic grid; ``seed`` only orders sample ids so that
    runs are reproducible byte for byte.
    """
    total = grid.n_pos * grid.n_diam * len(grid.f0_list)
    if total < 1:
        raise ValueError("the sweep grid is empty")
    out_dir = Path(out_dir)
    out_dir.mkdir(exist_ok=True)
    (out_dir / "wav").mkdir(exist_ok=True)
    (out_dir / "img").mkdir(exist_ok=True)
    params = list(grid_params(grid))
    order = np.random.default_rng(seed).permutation(len(params))
    manifest = out_dir / "manifest.jsonl"
    with open(manifest, "w", encoding="utf-8") as f:
        for k, idx in enumerate(order):
            p = params[idx]
            sid = f"s{k:05d}"
            wav_path = f"wav/{sid}.wav"
            img_path = f"img/{sid}.png"
            clip = synthesize(tongue_to_area(p), p.f0, grid.duration)
            write_wav(out_dir / wav_path, clip)
            write_png(out_dir / img_path,
                      render_geometry(p, grid.height, grid.width, grid.channels))
            row = {"id": sid, "tongue_position": p.tongue_position,
                   "tongue_diameter": p.tongue_diameter, "f0": p.f0,
                   "wav_path": wav_path, "img_path": img_path}
            f.write(json.dumps(row) + "\n")
    return manifest


def read_manifest(path) -> list[dict]:
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.jsonl"
    with open(path, encoding="utf-8") as f:
        return [json.loads(line) for line in f if line.strip()]
