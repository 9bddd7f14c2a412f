"""Turn a generated sweep directory into paired model-input arrays."""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .audio import mel_spectrogram, resize
from .config import FeatureConfig
from .synth import AudioClip, VtImage, read_manifest, read_png, read_wav


@dataclass
class FeatureSet:
    ids: list
    geometry: np.ndarray  # (N, C, H, W) in [0, 1]
    mel: np.ndarray  # (N, 1, H, W) in [0, 1]
    mel_shape: tuple  # (n_mels, n_frames) before resizing to the model grid

    def __len__(self):
        return len(self.ids)

    def index(self, ids):
        pos = {k: i for i, k in enumerate(self.ids)}
        return np.array([pos[k] for k in ids], dtype=np.int64)


def geometry_input(img: VtImage, fc: FeatureConfig):
    px = img.pixels.astype(np.float64)
    if px.shape[1:] != (fc.height, fc.width):
        px = np.stack([resize(ch, (fc.height, fc.width)) for ch in px])
    return px.astype(np.float32)


def mel_input(clip: AudioClip, fc: FeatureConfig):
    """Trimmed clip -> mel image resized to the model grid, plus the raw mel."""
    m = mel_spectrogram(clip.trimmed(fc.trim), fc.stft, fc.n_mels,
                        norm_floor_db=fc.norm_floor_db)
    return resize(m.values, (fc.height, fc.width)).astype(np.float32)[None], m


def _cache_key(rows, fc):
    h = hashlib.sha256(json.dumps([asdict(fc), rows], sort_keys=True).encode())
    return h.hexdigest()[:16]


def load_features(data_dir, fc: FeatureConfig, cache=True) -> FeatureSet:
    data_dir = Path(data_dir)
    rows = read_manifest(data_dir)
    if not rows:
        raise ValueError(f"{data_dir}: manifest is empty")
    cache_path = data_dir / f"features-{_cache_key(rows, fc)}.npz"
    if cache and cache_path.exists():
        z = np.load(cache_path)
        return FeatureSet([r["id"] for r in rows], z["geometry"], z["mel"],
                          tuple(int(v) for v in z["mel_shape"]))
    geo, mel, mel_shape = [], [], None
    for r in rows:
        geo.append(geometry_input(read_png(data_dir / r["img_path"]), fc))
        x, m = mel_input(read_wav(data_dir / r["wav_path"]), fc)
        mel.append(x)
        mel_shape = m.values.shape
    fs = FeatureSet([r["id"] for r in rows], np.stack(geo), np.stack(mel), tuple(mel_shape))
    if cache:
        np.savez(cache_path, geometry=fs.geometry, mel=fs.mel, mel_shape=np.array(mel_shape))
    return fs
