"""Frequency-domain style simulation.

Images are (H, W, D) float arrays. A 2-D FFT per channel splits each image
into an amplitude and a phase spectrum; swapping the centered low-frequency
amplitude block with one taken from another client's spectrum and inverting
with the original phase produces a simulated image that keeps the local
content but carries the other client's intensity style. Only amplitude
spectra ever leave a client.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .benchmark import SegmentationSample
from .nn.rten import read_rten, write_rten
from .seeding import rng_for


def fft2d(image: np.ndarray) -> np.ndarray:
    """Per-channel 2-D DFT of an (H, W, D) image; returns complex (H, W, D)."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3:
        raise ValueError(f"expected (H, W, D) image, got shape {image.shape}")
    if not np.all(np.isfinite(image)):
        raise ValueError("non-finite values in image")
    return np.fft.fft2(image, axes=(0, 1))


def ifft2d(spectrum: np.ndarray) -> np.ndarray:
    """Inverse transform; the imaginary residue is discarded."""
    return np.fft.ifft2(spectrum, axes=(0, 1)).real


def decompose(spectrum: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Split a complex spectrum into (amplitude, phase)."""
    return np.abs(spectrum), np.angle(spectrum)


def recompose(amplitude: np.ndarray, phase: np.ndarray) -> np.ndarray:
    return amplitude * np.exp(1j * phase)


@dataclass(frozen=True)
class SwapWindow:
    """Centered low-frequency block: half-widths floor(beta*H), floor(beta*W)."""

    beta: float

    def __post_init__(self):
        if not 0.0 <= self.beta <= 0.5:
            raise ValueError(f"beta {self.beta} out of [0, 0.5]")

    def half_widths(self, h: int, w: int) -> tuple[int, int]:
        return int(np.floor(self.beta * h)), int(np.floor(self.beta * w))

    def slices(self, h: int, w: int) -> tuple[slice, slice]:
        hb, wb = self.half_widths(h, w)
        ch, cw = h // 2, w // 2
        return (
            slice(max(0, ch - hb), min(h, ch + hb + 1)),
            slice(max(0, cw - wb), min(w, cw + wb + 1)),
        )


def swap_low_freq(a_self: np.ndarray, a_other: np.ndarray, window: SwapWindow) -> np.ndarray:
    """Replace the centered low-frequency block of a_self with a_other's.

    Both amplitudes are in standard FFT layout; the swap happens in
    zero-frequency-centered layout and the result is shifted back.
    """
    if a_self.shape != a_other.shape:
        raise ValueError(f"amplitude shapes differ: {a_self.shape} vs {a_other.shape}")
    h, w = a_self.shape[:2]
    out = np.fft.fftshift(a_self, axes=(0, 1)).copy()
    other = np.fft.fftshift(a_other, axes=(0, 1))
    sh, sw = window.slices(h, w)
    out[sh, sw] = other[sh, sw]
    return np.fft.ifftshift(out, axes=(0, 1))


class AmplitudeBank:
    """Per-client list of amplitude spectra, one per training image."""

    def __init__(self, client_id: str, amplitudes: list[np.ndarray]):
        if amplitudes:
            shape = amplitudes[0].shape
            if any(a.shape != shape for a in amplitudes):
                raise ValueError("all amplitudes in a bank must share one shape")
        self.client_id = str(client_id)
        self.amplitudes = list(amplitudes)

    def __len__(self) -> int:
        return len(self.amplitudes)

    @classmethod
    def from_images(cls, client_id: str, images: list[np.ndarray]) -> "AmplitudeBank":
        return cls(client_id, [decompose(fft2d(img))[0] for img in images])

    def save(self, directory: str | Path) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        entries = []
        for i, amp in enumerate(self.amplitudes):
            name = f"amp_{i:05d}.rten"
            write_rten(directory / name, amp)
            entries.append({"index": i, "file": name, "shape": list(amp.shape)})
        manifest = {"client_id": self.client_id, "entries": entries}
        (directory / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))

    @classmethod
    def load(cls, directory: str | Path) -> "AmplitudeBank":
        directory = Path(directory)
        manifest = json.loads((directory / "manifest.json").read_text())
        amps = [read_rten(directory / e["file"]) for e in manifest["entries"]]
        return cls(manifest["client_id"], amps)


def donor_assignment(bank_size: int, count: int, seed: int, *key) -> np.ndarray:
    """Assign one bank index per local image, without replacement while possible.

    Indices come from consecutive seeded permutations of the bank, so a bank
    at least as large as ``count`` never repeats a donor within one call.
    """
    rng = rng_for(seed, *key)
    picks = []
    while len(picks) < count:
        picks.extend(rng.permutation(bank_size).tolist())
    return np.asarray(picks[:count])


def generate_simulated_dataset(
    samples: list[SegmentationSample],
    other_banks: dict[str, AmplitudeBank],
    window: SwapWindow,
    seed: int,
    *key,
) -> list[SegmentationSample]:
    """Re-style every local image with amplitudes from each other client.

    For each of the N local images and each of the C-1 other clients, one
    amplitude is sampled (seeded) from that client's bank, its low-frequency
    block replaces the local one, and the image is rebuilt with the original
    phase, clamped to [0, 1]. Labels are copied unchanged, so the output has
    exactly N * (C-1) samples.
    """
    if not other_banks:
        raise ValueError("need at least one other client's bank (C >= 2)")
    for cid, bank in other_banks.items():
        if len(bank) == 0:
            raise ValueError(f"empty amplitude bank for client {cid}")

    donor_ids = sorted(other_banks)
    assignments = {
        cid: donor_assignment(len(other_banks[cid]), len(samples), seed, "donor", cid, *key)
        for cid in donor_ids
    }
    out: list[SegmentationSample] = []
    for i, sample in enumerate(samples):
        spec = fft2d(sample.image)
        amp, phase = decompose(spec)
        for cid in donor_ids:
            donor_amp = other_banks[cid].amplitudes[assignments[cid][i]]
            swapped = swap_low_freq(amp, donor_amp, window)
            img = ifft2d(recompose(swapped, phase))
            np.clip(img, 0.0, 1.0, out=img)
            out.append(SegmentationSample(image=img, label=sample.label.copy()))
    return out
