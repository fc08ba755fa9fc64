"""Spectral curve datasets: preprocessing, splits, pairs, and synthesis.

Raw acquisition gives several intensity shots per sample; the pipeline here
averages repeated shots, subtracts the background (source off) trace,
min-max normalizes, and packages curves with labels. Splitting follows the
train:valid:test = (1-r)^2 : r(1-r) : r rule, stratified per class. A
synthetic generator produces class-distinct peaky curves so the whole stack
is exercisable without proprietary instrument data.

Everything is pure given (inputs, seed); reusing a seed reproduces outputs
exactly.
"""

from __future__ import annotations

import csv
import logging
from configparser import ConfigParser
from dataclasses import dataclass
from pathlib import Path

import numpy as np

logger = logging.getLogger(__name__)

__all__ = [
    "SpectralCurve",
    "DatasetSplit",
    "CurvePair",
    "SyntheticClassSpec",
    "PreprocessError",
    "SplitError",
    "PairingError",
    "average_shots",
    "background_subtract",
    "min_max_normalize",
    "split_dataset",
    "sample_pairs",
    "make_imbalanced",
    "generate_synthetic",
    "default_class_specs",
    "save_dataset_csv",
    "load_dataset_csv",
    "load_class_specs",
    "save_class_specs",
]


class PreprocessError(ValueError):
    """Raw curves cannot be combined (length mismatch, empty input)."""


class SplitError(ValueError):
    """A class is too small to be split across train/valid/test."""


class PairingError(ValueError):
    """Pair sampling needs at least two classes."""


@dataclass
class SpectralCurve:
    """One normalized intensity curve with label and provenance."""

    intensities: np.ndarray
    label: int | None = None
    source_id: str = ""

    def __post_init__(self):
        self.intensities = np.ascontiguousarray(self.intensities, dtype=np.float64)
        if self.intensities.ndim != 1:
            raise PreprocessError(f"curve must be 1-D, got shape {self.intensities.shape}")

    def __len__(self) -> int:
        return int(self.intensities.shape[0])


@dataclass
class DatasetSplit:
    train: list[SpectralCurve]
    valid: list[SpectralCurve]
    test: list[SpectralCurve]
    test_rate: float
    seed: int


@dataclass
class CurvePair:
    curve_a: SpectralCurve
    curve_b: SpectralCurve
    same_class: bool


@dataclass
class SyntheticClassSpec:
    """Generator recipe for one class: Gaussian peaks plus noise terms.

    ``peaks`` holds (center, width, amplitude) triples; centers are sample
    positions and must lie inside [0, curve_length) at generation time.
    """

    peaks: list[tuple[float, float, float]]
    noise_sigma: float = 0.02
    baseline_drift_amplitude: float = 0.0

    def __post_init__(self):
        if not self.peaks:
            raise ValueError("a class spec needs at least one peak")
        for center, width, amplitude in self.peaks:
            if width <= 0 or amplitude <= 0:
                raise ValueError(f"peak width/amplitude must be positive, got ({center}, {width}, {amplitude})")
        if self.noise_sigma < 0 or self.baseline_drift_amplitude < 0:
            raise ValueError("noise_sigma and baseline_drift_amplitude must be non-negative")


# -- preprocessing --------------------------------------------------------------


def average_shots(shots: list[np.ndarray], k: int = 5) -> np.ndarray:
    """Pointwise mean of k repeated acquisitions of the same sample."""
    if not shots:
        raise PreprocessError("no shots to average")
    if len(shots) != k:
        raise PreprocessError(f"expected {k} shots, got {len(shots)}")
    arrays = [np.asarray(s, dtype=np.float64) for s in shots]
    lengths = {a.shape for a in arrays}
    if len(lengths) > 1:
        raise PreprocessError(f"shot lengths disagree: {sorted(lengths)}")
    return np.mean(arrays, axis=0)


def background_subtract(on: np.ndarray, off: np.ndarray) -> np.ndarray:
    """Remove the source-off background trace from the source-on trace."""
    on = np.asarray(on, dtype=np.float64)
    off = np.asarray(off, dtype=np.float64)
    if on.shape != off.shape:
        raise PreprocessError(f"on/off lengths disagree: {on.shape} vs {off.shape}")
    return on - off


def min_max_normalize(curve: np.ndarray) -> np.ndarray:
    """Rescale to [0, 1]; a constant curve maps to zeros (and is logged)."""
    curve = np.asarray(curve, dtype=np.float64)
    if curve.size == 0:
        raise PreprocessError("cannot normalize an empty curve")
    lo = curve.min()
    hi = curve.max()
    if hi == lo:
        logger.warning("constant curve encountered during normalization; mapped to zeros")
        return np.zeros_like(curve)
    return (curve - lo) / (hi - lo)


# -- splitting, pairing, imbalance -----------------------------------------------


def _group_by_label(curves: list[SpectralCurve]) -> dict[int, list[int]]:
    groups: dict[int, list[int]] = {}
    for i, c in enumerate(curves):
        if c.label is None:
            raise SplitError(f"curve '{c.source_id}' has no label; labeled curves are required here")
        groups.setdefault(int(c.label), []).append(i)
    return groups


def split_dataset(curves: list[SpectralCurve], test_rate: float, seed: int) -> DatasetSplit:
    """Stratified split with proportions (1-r)^2 : r(1-r) : r.

    Per class of size n: n_test = round(n*r), n_valid = round(n*r*(1-r)),
    train takes the remainder. At r=0.2 and n=100 this gives 64/16/20.
    """
    if not 0.0 < test_rate < 1.0:
        raise SplitError(f"test_rate must be in (0, 1), got {test_rate}")
    groups = _group_by_label(curves)
    rng = np.random.default_rng(seed)
    train: list[SpectralCurve] = []
    valid: list[SpectralCurve] = []
    test: list[SpectralCurve] = []
    for label in sorted(groups):
        idx = np.array(groups[label])
        n = idx.size
        if n < 3:
            raise SplitError(f"class {label} has only {n} sample(s); at least 3 are needed to split")
        n_test = int(round(n * test_rate))
        n_valid = int(round(n * test_rate * (1.0 - test_rate)))
        if n_test + n_valid >= n:
            raise SplitError(f"class {label}: {n} samples leave no training data at test_rate {test_rate}")
        order = rng.permutation(n)
        shuffled = idx[order]
        test.extend(curves[i] for i in shuffled[:n_test])
        valid.extend(curves[i] for i in shuffled[n_test : n_test + n_valid])
        train.extend(curves[i] for i in shuffled[n_test + n_valid :])
    return DatasetSplit(train=train, valid=valid, test=test, test_rate=test_rate, seed=seed)


def sample_pairs(curves: list[SpectralCurve], n_pairs: int, seed: int) -> list[CurvePair]:
    """Random curve pairs, same-class with probability 1/2."""
    groups = _group_by_label(curves)
    labels = sorted(groups)
    if len(labels) < 2:
        raise PairingError(f"pair sampling needs >= 2 classes, got {len(labels)}")
    rich = [lab for lab in labels if len(groups[lab]) >= 2]
    if not rich:
        raise PairingError("no class has 2 or more curves; cannot form same-class pairs")
    rng = np.random.default_rng(seed)
    pairs = []
    for _ in range(n_pairs):
        if rng.random() < 0.5:
            lab = rich[rng.integers(len(rich))]
            i, j = rng.choice(len(groups[lab]), size=2, replace=False)
            a = curves[groups[lab][i]]
            b = curves[groups[lab][j]]
            pairs.append(CurvePair(a, b, True))
        else:
            la, lb = rng.choice(len(labels), size=2, replace=False)
            a = curves[groups[labels[la]][rng.integers(len(groups[labels[la]]))]]
            b = curves[groups[labels[lb]][rng.integers(len(groups[labels[lb]]))]]
            pairs.append(CurvePair(a, b, False))
    return pairs


def make_imbalanced(
    curves: list[SpectralCurve], per_class_counts: dict[int, int], seed: int
) -> list[SpectralCurve]:
    """Subsample each class down to the requested count (without replacement)."""
    groups = _group_by_label(curves)
    rng = np.random.default_rng(seed)
    kept: list[SpectralCurve] = []
    for label in sorted(groups):
        available = groups[label]
        want = per_class_counts.get(label, len(available))
        if want > len(available):
            raise ValueError(f"class {label}: requested {want} samples but only {len(available)} available")
        chosen = rng.choice(len(available), size=want, replace=False)
        kept.extend(curves[available[i]] for i in sorted(chosen))
    return kept


# -- synthetic generation ---------------------------------------------------------


def _gaussian_mixture(x: np.ndarray, peaks: list[tuple[float, float, float]]) -> np.ndarray:
    out = np.zeros_like(x)
    for center, width, amplitude in peaks:
        out += amplitude * np.exp(-0.5 * ((x - center) / width) ** 2)
    return out


def generate_synthetic(
    specs: list[SyntheticClassSpec],
    n_per_class: int,
    curve_length: int,
    seed: int,
) -> list[SpectralCurve]:
    """Labeled synthetic curves: peak mixture + smooth drift + white noise.

    Each curve is min-max normalized after synthesis. With noise_sigma=0 and
    zero drift every curve of a class equals the normalized peak mixture,
    independent of the seed.
    """
    if len(specs) < 2:
        raise ValueError(f"need >= 2 class specs, got {len(specs)}")
    x = np.arange(curve_length, dtype=np.float64)
    rng = np.random.default_rng(seed)
    curves: list[SpectralCurve] = []
    for label, spec in enumerate(specs):
        for center, _, _ in spec.peaks:
            if not 0 <= center < curve_length:
                raise ValueError(f"class {label}: peak center {center} outside [0, {curve_length})")
        base = _gaussian_mixture(x, spec.peaks)
        for i in range(n_per_class):
            raw = base
            if spec.baseline_drift_amplitude > 0:
                freq = rng.uniform(0.5, 2.0)
                phase = rng.uniform(0.0, 2 * np.pi)
                scale = rng.uniform(0.0, 1.0)
                raw = raw + spec.baseline_drift_amplitude * scale * np.sin(
                    2 * np.pi * freq * x / curve_length + phase
                )
            if spec.noise_sigma > 0:
                raw = raw + rng.normal(0.0, spec.noise_sigma, size=curve_length)
            curves.append(
                SpectralCurve(
                    intensities=min_max_normalize(raw),
                    label=label,
                    source_id=f"synthetic/class{label}/{i}",
                )
            )
    return curves


def default_class_specs(
    num_classes: int = 12,
    curve_length: int = 1000,
    noise_sigma: float = 0.02,
    baseline_drift_amplitude: float = 0.05,
    seed: int = 7,
) -> list[SyntheticClassSpec]:
    """Deterministic class recipes with class-unique peak position sets.

    Peak centers come from a coarse grid so every class keeps at least two
    exclusive positions; widths and amplitudes vary per peak. The defaults
    are separable by a nearest-centroid rule at noise_sigma=0.02.
    """
    rng = np.random.default_rng(seed)
    margin = curve_length * 0.05
    grid = np.linspace(margin, curve_length - margin, 2 * num_classes)
    shared_pool = np.linspace(margin * 2, curve_length - 2 * margin, 7)
    specs = []
    for c in range(num_classes):
        exclusive = [grid[2 * c], grid[2 * c + 1]]
        n_extra = int(rng.integers(1, 4))  # 3 to 5 peaks in total
        extras = rng.choice(shared_pool, size=n_extra, replace=False)
        centers = np.concatenate([exclusive, extras])
        widths = rng.uniform(curve_length / 120, curve_length / 45, size=centers.size)
        amplitudes = rng.uniform(0.45, 1.0, size=centers.size)
        peaks = [(float(c_), float(w), float(a)) for c_, w, a in zip(centers, widths, amplitudes)]
        specs.append(
            SyntheticClassSpec(
                peaks=peaks,
                noise_sigma=noise_sigma,
                baseline_drift_amplitude=baseline_drift_amplitude,
            )
        )
    return specs


# -- file formats -----------------------------------------------------------------


def save_dataset_csv(curves: list[SpectralCurve], path: str | Path) -> None:
    """Write a dataset as CSV: header ``label,source_id,x0,...,x{L-1}``."""
    if not curves:
        raise ValueError("refusing to write an empty dataset")
    length = len(curves[0])
    for c in curves:
        if len(c) != length:
            raise ValueError(f"curve '{c.source_id}' has length {len(c)}, expected {length}")
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["label", "source_id"] + [f"x{i}" for i in range(length)])
        for c in curves:
            label = "" if c.label is None else str(int(c.label))
            writer.writerow([label, c.source_id] + [repr(v) for v in c.intensities.tolist()])


def load_dataset_csv(path: str | Path) -> list[SpectralCurve]:
    path = Path(path)
    curves: list[SpectralCurve] = []
    with path.open("r", newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header or header[:2] != ["label", "source_id"]:
            raise ValueError(f"{path}: not a curve dataset (header must start with label,source_id)")
        length = len(header) - 2
        for row_num, row in enumerate(reader, start=2):
            if len(row) != length + 2:
                raise ValueError(f"{path}:{row_num}: expected {length + 2} columns, got {len(row)}")
            label = int(row[0]) if row[0] != "" else None
            values = np.array([float(v) for v in row[2:]], dtype=np.float64)
            curves.append(SpectralCurve(intensities=values, label=label, source_id=row[1]))
    if not curves:
        raise ValueError(f"{path}: dataset is empty")
    return curves


def _parse_peaks(text: str, section: str) -> list[tuple[float, float, float]]:
    peaks = []
    for part in text.split(";"):
        part = part.strip()
        if not part:
            continue
        fields = part.split(":")
        if len(fields) != 3:
            raise ValueError(f"[{section}] peaks: expected center:width:amplitude, got '{part}'")
        peaks.append((float(fields[0]), float(fields[1]), float(fields[2])))
    return peaks


def load_class_specs(path: str | Path) -> list[SyntheticClassSpec]:
    """Read class recipes from an INI-style file, one section per class.

    Each section needs ``peaks = center:width:amplitude; ...`` and may set
    ``noise_sigma`` and ``baseline_drift_amplitude``.
    """
    path = Path(path)
    parser = ConfigParser()
    read = parser.read(path)
    if not read:
        raise ValueError(f"cannot read class spec file {path}")
    specs = []
    for section in parser.sections():
        body = parser[section]
        unknown = set(body) - {"peaks", "noise_sigma", "baseline_drift_amplitude"}
        if unknown:
            raise ValueError(f"[{section}]: unknown keys {sorted(unknown)}")
        if "peaks" not in body:
            raise ValueError(f"[{section}]: missing required key 'peaks'")
        specs.append(
            SyntheticClassSpec(
                peaks=_parse_peaks(body["peaks"], section),
                noise_sigma=body.getfloat("noise_sigma", 0.02),
                baseline_drift_amplitude=body.getfloat("baseline_drift_amplitude", 0.0),
            )
        )
    if not specs:
        raise ValueError(f"{path}: no class sections found")
    return specs


def save_class_specs(specs: list[SyntheticClassSpec], path: str | Path) -> None:
    path = Path(path)
    parser = ConfigParser()
    for i, spec in enumerate(specs):
        section = f"class_{i}"
        parser.add_section(section)
        parser[section]["peaks"] = "; ".join(f"{c:g}:{w:g}:{a:g}" for c, w, a in spec.peaks)
        parser[section]["noise_sigma"] = repr(spec.noise_sigma)
        parser[section]["baseline_drift_amplitude"] = repr(spec.baseline_drift_amplitude)
    with path.open("w", encoding="utf-8") as fh:
        parser.write(fh)
