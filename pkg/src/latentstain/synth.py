"""Deterministic generator of registered H&E/IHC patch pairs.

Each pair renders the same nucleus layout twice: an H&E view (pink eosin
background, dark violet nuclear blobs, plus a weak brown texture cue whose
ring-shaped component scales as 0.05 × class) and an IHC view (pale
hematoxylin counterstain plus brown DAB membrane rings whose completeness
and intensity grow with the HER2 class). Colors are composed in optical
density from the same stain vectors the analysis pipeline unmixes with, so
stain-derived supervision closely tracks the analytic geometry.

All randomness comes from a SplitMix64 stream seeded per sample, so any
implementation of the published constants reproduces identical datasets.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .autodiff import InvalidArgumentError
from .lgdt import write_tensor
from .ppm import write_ppm
from .stains import (HE_MATRIX, HED_MATRIX, gaussian_filter, membrane_mask,
                     nuclei_density)

_MASK64 = (1 << 64) - 1
_GAMMA = 0x9E3779B97F4A7C15

# Per-class generation tables (HER2 0, 1+, 2+, 3+).
NUCLEUS_COUNT_RANGE = ((3, 5), (5, 8), (8, 12), (12, 16))
RING_COMPLETENESS = (0.0, 0.35, 0.70, 1.0)
RING_INTENSITY = (0.0, 0.3, 0.6, 0.9)
HE_CUE_UNIT = 0.05          # brown ring echo amplitude per class step
HE_SPECKLE_SCALE = 0.01     # faint iid brown grain
HE_BLOTCH_SCALE = 0.06      # smooth brown blotches (local-mean confounder)
HE_TINT_MAX = 0.05          # per-sample global brown tint (confounder)
HE_BROWN_JITTER = (0.7, 1.3)  # stain-intensity jitter on the whole brown channel
IHC_COUNTERSTAIN = 0.05     # faint counterstain keeps teacher features ring-driven
RING_BAND = (0.6, 2.8)      # ring band offsets from the nucleus radius

MANIFEST_HEADER = ("he", "ihc", "density", "mask", "label", "split")


class SplitMix64:
    """Counter-based SplitMix64; vectorized draws share one stream."""

    def __init__(self, seed: int):
        self._state = seed & _MASK64
        self._drawn = 0

    def _mix(self, z: np.ndarray) -> np.ndarray:
        with np.errstate(over="ignore"):
            z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
            z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
            return z ^ (z >> np.uint64(31))

    def next_u64(self, n: int) -> np.ndarray:
        with np.errstate(over="ignore"):
            ks = np.arange(1, n + 1, dtype=np.uint64) * np.uint64(_GAMMA)
            ks += np.uint64((self._state + self._drawn * _GAMMA) & _MASK64)
        self._drawn += n
        return self._mix(ks)

    def uniforms(self, n: int) -> np.ndarray:
        """n doubles in [0, 1): (z >> 11) * 2^-53."""
        return (self.next_u64(n) >> np.uint64(11)).astype(np.float64) * 2.0 ** -53

    def uniform(self) -> float:
        return float(self.uniforms(1)[0])

    def randint(self, lo: int, hi: int) -> int:
        """Integer in [lo, hi], both inclusive."""
        return lo + int(self.uniform() * (hi - lo + 1))


@dataclass
class SamplePair:
    he: np.ndarray            # (S, S, 3) uint8
    ihc: np.ndarray           # (S, S, 3) uint8
    label: int                # HER2 class 0..3
    nuclei_centers: list[tuple[float, float]]
    ring_mask: np.ndarray     # (S, S) uint8, analytic membrane geometry
    seed: int


def _render(c_h, c_e, c_d) -> np.ndarray:
    """Compose concentrations through the stain vectors into 8-bit RGB."""
    od = (c_h[..., None] * HED_MATRIX.rows[0]
          + c_e[..., None] * HED_MATRIX.rows[1]
          + c_d[..., None] * HED_MATRIX.rows[2])
    intensity = 256.0 * np.power(10.0, -od) - 1.0
    return np.clip(np.rint(intensity), 0, 255).astype(np.uint8)


def generate_pair(label: int, seed: int, size: int = 32) -> SamplePair:
    """Render one registered H&E/IHC pair; pure function of its arguments.

    Draw order is fixed: nucleus count, then a (count, 6) block of
    per-nucleus values (cx, cy, radius, strength, ring phase, DAB jitter),
    then eight global values, then five size² pixel-noise fields.
    """
    if not 0 <= label <= 3:
        raise InvalidArgumentError(f"label must be in 0..3, got {label}")
    if size < 16:
        raise InvalidArgumentError(f"size must be >= 16, got {size}")
    rng = SplitMix64(seed)
    lo, hi = NUCLEUS_COUNT_RANGE[label]
    count = rng.randint(lo, hi)

    per = rng.uniforms(count * 6).reshape(count, 6)
    cx = 3.0 + per[:, 0] * (size - 7)
    cy = 3.0 + per[:, 1] * (size - 7)
    radius = 1.5 + per[:, 2]
    strength = 0.6 + 0.4 * per[:, 3]
    phase = per[:, 4] * (2.0 * np.pi)
    dab = RING_INTENSITY[label] * (0.9 + 0.2 * per[:, 5])

    g = rng.uniforms(8)
    eosin_base = 0.25 + 0.20 * g[0]
    he_h_jitter = 0.8 + 0.4 * g[1]
    he_e_jitter = 0.8 + 0.4 * g[2]
    he_tint = HE_TINT_MAX * g[3]
    ihc_h_jitter = 0.85 + 0.3 * g[4]
    lo_j, hi_j = HE_BROWN_JITTER
    he_brown_jitter = lo_j + (hi_j - lo_j) * g[5]
    # g[6:8] reserved to keep the stream layout stable

    fields = rng.uniforms(5 * size * size).reshape(5, size, size)
    he_eosin_noise, he_speckle, blotch_src, ihc_h_noise, ihc_e_noise = fields
    smooth = gaussian_filter(blotch_src, 3.0)
    span = smooth.max() - smooth.min()
    blotch = (smooth - smooth.min()) / span if span > 0 else np.zeros_like(smooth)

    ys = np.arange(size, dtype=np.float64)[:, None]
    xs = np.arange(size, dtype=np.float64)[None, :]
    blobs = np.zeros((size, size))
    ring_union = np.zeros((size, size), dtype=bool)
    dab_field = np.zeros((size, size))
    completeness = RING_COMPLETENESS[label]
    for i in range(count):
        d2 = (xs - cx[i]) ** 2 + (ys - cy[i]) ** 2
        blobs += strength[i] * np.exp(-d2 / (2.0 * radius[i] ** 2))
        if completeness > 0.0:
            dist = np.sqrt(d2)
            band = (dist >= radius[i] + RING_BAND[0]) & (dist <= radius[i] + RING_BAND[1])
            rel = np.mod(np.arctan2(ys - cy[i], xs - cx[i]) - phase[i], 2.0 * np.pi)
            ring = band & (rel <= completeness * 2.0 * np.pi)
            ring_union |= ring
            dab_field = np.maximum(dab_field, ring * dab[i])

    he_h = np.minimum(blobs, 1.2) * he_h_jitter
    he_e = np.maximum(eosin_base + 0.08 * (he_eosin_noise - 0.5), 0.0) * he_e_jitter
    # One brown field carries the class cue and its confounders: a global
    # tint, smooth blotches, faint grain, and the ring echo, all under a
    # shared stain-intensity jitter. Absolute arc brightness is therefore
    # ambiguous between neighboring classes; arc completeness is not.
    he_d = he_brown_jitter * (he_tint + HE_BLOTCH_SCALE * blotch
                              + HE_SPECKLE_SCALE * he_speckle
                              + (HE_CUE_UNIT * label) * ring_union)
    he = _render(he_h, he_e, np.maximum(he_d, 0.0))

    # Counterstain kept under 0.8 OD so 8-bit quantization cannot leak a
    # full histogram bin into the unmixed DAB channel of ring-free patches.
    ihc_h = np.minimum((0.06 + 0.05 * (ihc_h_noise - 0.5) + IHC_COUNTERSTAIN * blobs)
                       * ihc_h_jitter, 0.8)
    ihc_e = np.maximum(0.04 + 0.03 * (ihc_e_noise - 0.5), 0.0)
    ihc = _render(ihc_h, ihc_e, dab_field)

    return SamplePair(he=he, ihc=ihc, label=label,
                      nuclei_centers=list(zip(cx.tolist(), cy.tolist())),
                      ring_mask=ring_union.astype(np.uint8), seed=seed)


@dataclass
class ManifestRow:
    he: Path
    ihc: Path
    density: Path
    mask: Path
    label: int
    split: str


@dataclass
class DatasetManifest:
    path: Path
    rows: list[ManifestRow]
    seed: int

    def split_rows(self, split: str) -> list[ManifestRow]:
        return [r for r in self.rows if r.split == split]

    def class_counts(self, split: str) -> dict[int, int]:
        counts = {c: 0 for c in range(4)}
        for r in self.split_rows(split):
            counts[r.label] += 1
        return counts


def build_dataset(n_train: int, n_test: int, seed: int, out_dir,
                  size: int = 32, sigma: float = 2.0, grid: int = 8,
                  density_source: str = "he") -> DatasetManifest:
    """Write a balanced synthetic dataset plus its stain-derived targets.

    Classes rotate round-robin; sample i of a split draws its own SplitMix64
    seed from a subrange disjoint between train (seed+i) and test
    (seed+n_train+j). Identical arguments reproduce identical bytes.
    """
    if n_train < 4 or n_test < 4:
        raise InvalidArgumentError("need at least 4 samples per split")
    out_dir = Path(out_dir)
    rows: list[ManifestRow] = []
    for split, n, base in (("train", n_train, seed),
                           ("test", n_test, seed + n_train)):
        sub = out_dir / split
        sub.mkdir(parents=True, exist_ok=True)
        for i in range(n):
            label = i % 4
            pair = generate_pair(label, (base + i) & _MASK64, size)
            names = {kind: sub / f"{i:05d}_{kind}.{ext}"
                     for kind, ext in (("he", "ppm"), ("ihc", "ppm"),
                                       ("density", "lgdt"), ("mask", "lgdt"))}
            write_ppm(names["he"], pair.he)
            write_ppm(names["ihc"], pair.ihc)
            write_targets(pair.he, pair.ihc, names["density"], names["mask"],
                          sigma=sigma, grid=grid, density_source=density_source)
            rows.append(ManifestRow(label=label, split=split,
                                    **{k: names[k] for k in ("he", "ihc", "density", "mask")}))
    for split in ("train", "test"):
        counts = {c: 0 for c in range(4)}
        for r in rows:
            if r.split == split:
                counts[r.label] += 1
        if min(counts.values()) == 0:
            raise InvalidArgumentError(f"split {split!r} missing a class: {counts}")
    manifest_path = out_dir / "manifest.csv"
    with open(manifest_path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(MANIFEST_HEADER)
        for r in rows:
            writer.writerow([r.he.relative_to(out_dir).as_posix(),
                             r.ihc.relative_to(out_dir).as_posix(),
                             r.density.relative_to(out_dir).as_posix(),
                             r.mask.relative_to(out_dir).as_posix(),
                             r.label, r.split])
    return DatasetManifest(path=manifest_path, rows=rows, seed=seed)


def write_targets(he: np.ndarray, ihc: np.ndarray, density_path, mask_path,
                  sigma: float = 2.0, grid: int = 8, density_source: str = "he"):
    """Derive and store the two supervision maps for one pair."""
    if density_source == "he":
        density = nuclei_density(he, sigma=sigma, grid=grid, matrix=HE_MATRIX)
    elif density_source == "ihc":
        density = nuclei_density(ihc, sigma=sigma, grid=grid, matrix=HED_MATRIX)
    else:
        raise InvalidArgumentError(f"unknown density source {density_source!r}")
    write_tensor(density_path, density.astype(np.float32))
    write_tensor(mask_path, membrane_mask(ihc, grid=grid).astype(np.float32))


def load_manifest(path) -> DatasetManifest:
    path = Path(path)
    base = path.parent
    rows: list[ManifestRow] = []
    with open(path, newline="") as f:
        reader = csv.reader(f)
        header = tuple(next(reader))
        if header != MANIFEST_HEADER:
            raise InvalidArgumentError(f"{path}: unexpected manifest header {header}")
        for rec in reader:
            he, ihc, density, mask, label, split = rec
            rows.append(ManifestRow(he=base / he, ihc=base / ihc,
                                    density=base / density, mask=base / mask,
                                    label=int(label), split=split))
    return DatasetManifest(path=path, rows=rows, seed=0)
