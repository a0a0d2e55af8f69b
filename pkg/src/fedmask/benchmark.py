"""Synthetic multi-domain segmentation benchmark and evaluation metrics.

Every client draws foreground blobs from the same geometry distribution
(deformed ellipses), then renders them through its own domain style:
brightness offset, contrast gain, additive band-limited texture, and blur.
Labels come from the geometry alone, so styling never touches them. The
result is pure covariate shift between clients, which is the regime the
masked-personalization protocol targets.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from .nn.rten import read_rten, write_rten
from .seeding import rng_for


@dataclass(frozen=True)
class DomainStyle:
    brightness: float = 0.0
    contrast: float = 1.0
    texture_amp: float = 0.0
    texture_band: tuple[float, float] = (2.0, 6.0)
    blur_sigma: float = 0.0


@dataclass
class SegmentationSample:
    image: np.ndarray  # (H, W, 1) floats in [0, 1]
    label: np.ndarray  # (H, W) class indices


@dataclass
class ClientData:
    client_id: str
    train: list[SegmentationSample]
    val: list[SegmentationSample]
    test: list[SegmentationSample]

    @property
    def all_samples(self) -> list[SegmentationSample]:
        return self.train + self.val + self.test


@dataclass
class BenchmarkSpec:
    clients: int = 6
    samples_per_client: int = 60
    image_size: int = 32
    styles: list[DomainStyle] | None = None
    heterogeneous: bool = True
    style_strength: float = 1.0
    pixel_noise: float = 0.04
    split: tuple[float, float, float] = (0.6, 0.2, 0.2)

    def __post_init__(self):
        if self.clients < 2:
            raise ValueError("need at least 2 clients")
        if self.samples_per_client < 10:
            raise ValueError("need at least 10 samples per client")
        if abs(sum(self.split) - 1.0) > 1e-9:
            raise ValueError("split ratios must sum to 1")
        n_train = int(self.samples_per_client * self.split[0])
        n_val = int(self.samples_per_client * self.split[1])
        if n_train == 0 or n_val == 0 or self.samples_per_client - n_train - n_val == 0:
            raise ValueError("degenerate spec: a split would be empty")

    def resolved_styles(self) -> list[DomainStyle]:
        if self.styles is not None:
            if len(self.styles) != self.clients:
                raise ValueError("styles list must have one entry per client")
            return list(self.styles)
        if self.heterogeneous:
            return heterogeneous_styles(self.clients, self.style_strength)
        return [DomainStyle(texture_amp=0.06, texture_band=(2.0, 6.0), blur_sigma=0.4)] * self.clients


_STYLE_TABLE = [
    DomainStyle(brightness=-0.15, contrast=0.60, texture_amp=0.10, texture_band=(1.5, 4.0), blur_sigma=0.0),
    DomainStyle(brightness=0.15, contrast=1.50, texture_amp=0.00, texture_band=(2.0, 6.0), blur_sigma=1.2),
    DomainStyle(brightness=0.00, contrast=-0.90, texture_amp=0.08, texture_band=(5.0, 10.0), blur_sigma=0.0),
    DomainStyle(brightness=-0.08, contrast=1.25, texture_amp=0.16, texture_band=(2.0, 5.0), blur_sigma=0.5),
    DomainStyle(brightness=0.08, contrast=0.80, texture_amp=0.06, texture_band=(8.0, 16.0), blur_sigma=0.3),
    DomainStyle(brightness=0.00, contrast=1.70, texture_amp=0.14, texture_band=(1.0, 2.5), blur_sigma=0.9),
]


def heterogeneous_styles(clients: int, strength: float = 1.0) -> list[DomainStyle]:
    """Pairwise-distinct styles; the first six come from a fixed table."""
    styles = []
    for c in range(clients):
        base = _STYLE_TABLE[c % len(_STYLE_TABLE)]
        wrap = c // len(_STYLE_TABLE)
        styles.append(
            DomainStyle(
                brightness=base.brightness * strength + 0.02 * wrap,
                contrast=1.0 + (base.contrast - 1.0) * strength + 0.05 * wrap,
                texture_amp=base.texture_amp * strength,
                texture_band=base.texture_band,
                blur_sigma=base.blur_sigma * strength,
            )
        )
    return styles


def _blob_label(size: int, rng: np.random.Generator) -> np.ndarray:
    """Foreground mask of one smoothly deformed, rotated ellipse."""
    cy, cx = rng.uniform(0.32, 0.68, size=2) * size
    ry, rx = rng.uniform(0.14, 0.32, size=2) * size
    phi = rng.uniform(0.0, np.pi)
    amps = rng.uniform(0.0, 0.14, size=3)
    phases = rng.uniform(0.0, 2 * np.pi, size=3)

    ys, xs = np.mgrid[0:size, 0:size]
    dy, dx = ys - cy, xs - cx
    yr = np.cos(phi) * dy - np.sin(phi) * dx
    xr = np.sin(phi) * dy + np.cos(phi) * dx
    rho = np.sqrt((yr / ry) ** 2 + (xr / rx) ** 2)
    theta = np.arctan2(yr / ry, xr / rx)
    boundary = 1.0
    for m, (a, p) in enumerate(zip(amps, phases), start=2):
        boundary = boundary + a * np.cos(m * theta + p)
    return (rho <= boundary).astype(np.int64)


def _band_texture(size: int, band: tuple[float, float], rng: np.random.Generator) -> np.ndarray:
    """Unit-variance noise field restricted to a radial frequency band (cycles)."""
    noise = rng.normal(size=(size, size))
    spec = np.fft.fft2(noise)
    fy = np.fft.fftfreq(size) * size
    fx = np.fft.fftfreq(size) * size
    radius = np.sqrt(fy[:, None] ** 2 + fx[None, :] ** 2)
    keep = (radius >= band[0]) & (radius <= band[1])
    field = np.fft.ifft2(spec * keep).real
    std = field.std()
    return field / std if std > 0 else field


def apply_style(image: np.ndarray, style: DomainStyle, rng: np.random.Generator) -> np.ndarray:
    """Contrast/brightness, additive texture, blur, clamp to [0, 1]."""
    x = image[:, :, 0]
    x = 0.5 + style.contrast * (x - 0.5) + style.brightness
    if style.texture_amp > 0:
        x = x + style.texture_amp * _band_texture(x.shape[0], style.texture_band, rng)
    if style.blur_sigma > 0:
        x = gaussian_filter(x, style.blur_sigma, mode="reflect")
    return np.clip(x, 0.0, 1.0)[:, :, None]


def _render_sample(size: int, noise: float, style: DomainStyle, geom_rng, pix_rng, tex_rng) -> SegmentationSample:
    label = _blob_label(size, geom_rng)
    bg = 0.35 + pix_rng.uniform(-0.03, 0.03)
    fg = 0.72 + pix_rng.uniform(-0.03, 0.03)
    base = bg + (fg - bg) * label.astype(np.float64)
    base = base + pix_rng.normal(0.0, noise, size=base.shape)
    image = np.clip(base, 0.0, 1.0)[:, :, None]
    return SegmentationSample(image=apply_style(image, style, tex_rng), label=label)


def split_sizes(n: int, split: tuple[float, float, float]) -> tuple[int, int, int]:
    n_train = int(n * split[0])
    n_val = int(n * split[1])
    return n_train, n_val, n - n_train - n_val


def generate_benchmark(spec: BenchmarkSpec, seed: int) -> list[ClientData]:
    """Deterministic per-client train/val/test datasets under the given spec."""
    styles = spec.resolved_styles()
    clients = []
    n_train, n_val, _ = split_sizes(spec.samples_per_client, spec.split)
    for c in range(spec.clients):
        samples = [
            _render_sample(
                spec.image_size,
                spec.pixel_noise,
                styles[c],
                rng_for(seed, "geom", c, i),
                rng_for(seed, "pix", c, i),
                rng_for(seed, "tex", c, i),
            )
            for i in range(spec.samples_per_client)
        ]
        clients.append(
            ClientData(
                client_id=f"client{c}",
                train=samples[:n_train],
                val=samples[n_train : n_train + n_val],
                test=samples[n_train + n_val :],
            )
        )
    return clients


def dice_score(prediction: np.ndarray, truth: np.ndarray) -> float:
    """Overlap 2|P∩T| / (|P| + |T|) over foreground; 1.0 when both are empty."""
    if prediction.shape != truth.shape:
        raise ValueError(f"shape mismatch: {prediction.shape} vs {truth.shape}")
    p = prediction == 1
    t = truth == 1
    denom = int(p.sum()) + int(t.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int((p & t).sum()) / denom


def stack_batch(samples: list[SegmentationSample]) -> tuple[np.ndarray, np.ndarray]:
    images = np.stack([s.image for s in samples])
    labels = np.stack([s.label for s in samples])
    return images, labels


def evaluate(model, samples: list[SegmentationSample], batch_size: int = 16) -> float:
    """Mean Dice of argmax predictions over a dataset, eval mode."""
    if not samples:
        raise ValueError("cannot evaluate on an empty dataset")
    scores = []
    for start in range(0, len(samples), batch_size):
        chunk = samples[start : start + batch_size]
        images, labels = stack_batch(chunk)
        preds = np.argmax(model.forward(images, train=False), axis=-1)
        scores.extend(dice_score(preds[i], labels[i]) for i in range(len(chunk)))
    return float(np.mean(scores))


def save_benchmark(directory: str | Path, clients: list[ClientData]) -> None:
    """Dump as RTEN image/label pairs plus a JSON manifest."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    manifest = []
    for data in clients:
        entry = {"client_id": data.client_id, "splits": {}}
        for split_name in ("train", "val", "test"):
            files = []
            for i, s in enumerate(getattr(data, split_name)):
                stem = f"{data.client_id}_{split_name}_{i:05d}"
                write_rten(directory / f"{stem}_image.rten", s.image)
                write_rten(directory / f"{stem}_label.rten", s.label.astype(np.float64))
                files.append(stem)
            entry["splits"][split_name] = files
        manifest.append(entry)
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))


def load_benchmark(directory: str | Path) -> list[ClientData]:
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    clients = []
    for entry in manifest:
        splits = {}
        for split_name, stems in entry["splits"].items():
            splits[split_name] = [
                SegmentationSample(
                    image=read_rten(directory / f"{stem}_image.rten"),
                    label=read_rten(directory / f"{stem}_label.rten").astype(np.int64),
                )
                for stem in stems
            ]
        clients.append(ClientData(client_id=entry["client_id"], **splits))
    return clients
