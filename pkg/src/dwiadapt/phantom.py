"""Synthetic labeled DWI cases: elliptical lesions whose signals follow the
kurtosis decay model exactly, plus a constant fat calibration region and
optional Rician noise.

The generator emulates the *structure* of a clinical lesion dataset (two
classes, per-case lesion and fat masks, a fraction of empty-lesion cases
that are benign by rule), not any particular scanner's values. Tissue
parameters are drawn per case from truncated normals inside the fit
bounds; the lesion is homogeneous so noiseless cases round-trip through
the voxel fit to machine precision.

Determinism: every case uses its own generator seeded by (dataset seed,
case index), so cases can be produced in any order, or concurrently, with
identical results.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .core import (
    BENIGN,
    LABELS,
    MALIGNANT,
    DwiStack,
    LabeledCase,
    Protocol,
    _write_json,
    load_case,
    save_stack,
)
from .dki import FitConfig, _signal, max_valid_b
from .errors import FormatError, GeometryError

DATASET_FORMAT = "dwiadapt-dataset"
DATASET_VERSION = 1
DEFAULT_BVALUES = (0.0, 100.0, 750.0, 1500.0)


@dataclass(frozen=True)
class ClassDistribution:
    """Truncated-normal tissue parameter distribution for one class."""

    adc_mean: float
    adc_sd: float
    akc_mean: float
    akc_sd: float
    s0_mean: float
    s0_sd: float

    def __post_init__(self):
        if min(self.adc_sd, self.akc_sd, self.s0_sd) < 0:
            raise FormatError("standard deviations must be >= 0")
        if self.adc_mean <= 0 or self.s0_mean <= 0 or self.akc_mean < 0:
            raise FormatError("distribution means must be positive (akc >= 0)")


# defaults reflect restricted diffusion in malignant tissue: lower adc,
# higher kurtosis; these are tunable knobs, not measured ground truth
DEFAULT_BENIGN = ClassDistribution(1.8e-3, 0.2e-3, 0.6, 0.15, 800.0, 100.0)
DEFAULT_MALIGNANT = ClassDistribution(1.0e-3, 0.15e-3, 1.2, 0.2, 800.0, 100.0)


@dataclass(frozen=True)
class PhantomConfig:
    width: int = 32
    height: int = 32
    lesion_row_range: tuple[float, float] = (11.0, 25.0)
    lesion_col_range: tuple[float, float] = (8.0, 24.0)
    lesion_axes_range: tuple[float, float] = (2.5, 6.5)
    fat_rect: tuple[int, int, int, int] = (1, 1, 3, 30)  # top, left, height, width
    protocol: Protocol = field(default_factory=lambda: Protocol(DEFAULT_BVALUES))
    noise_sigma: float = 0.02  # Rician sigma as a fraction of the mean s0
    empty_lesion_fraction: float = 23.0 / 221.0
    fat_level: float = 60.0
    parenchyma_s0: float = 0.0  # optional decaying term under the fat region
    parenchyma_adc: float = 2.0e-3
    benign: ClassDistribution = field(default_factory=lambda: DEFAULT_BENIGN)
    malignant: ClassDistribution = field(default_factory=lambda: DEFAULT_MALIGNANT)
    bounds: FitConfig = field(default_factory=FitConfig)
    seed: int = 0

    def __post_init__(self):
        if self.width < 4 or self.height < 4:
            raise FormatError("image must be at least 4x4")
        top, left, fh, fw = self.fat_rect
        if top < 0 or left < 0 or fh < 1 or fw < 1:
            raise GeometryError(f"bad fat rectangle {self.fat_rect}")
        if top + fh > self.height or left + fw > self.width:
            raise GeometryError("fat rectangle does not fit inside the image")
        for name, (lo, hi) in (("lesion_row_range", self.lesion_row_range),
                               ("lesion_col_range", self.lesion_col_range),
                               ("lesion_axes_range", self.lesion_axes_range)):
            if not (lo <= hi):
                raise FormatError(f"{name} must be ordered, got ({lo}, {hi})")
        if self.lesion_axes_range[0] <= 0:
            raise GeometryError("lesion axes must be positive")
        if self.noise_sigma < 0:
            raise FormatError("noise_sigma must be >= 0")
        if not 0 <= self.empty_lesion_fraction <= 1:
            raise FormatError("empty_lesion_fraction must be in [0, 1]")
        if self.fat_level < 0 or self.parenchyma_s0 < 0:
            raise FormatError("fat_level and parenchyma_s0 must be >= 0")
        for dist in (self.benign, self.malignant):
            if not (self.bounds.adc_min <= dist.adc_mean <= self.bounds.adc_max):
                raise FormatError(f"adc_mean {dist.adc_mean} outside fit bounds")
            if dist.akc_mean > self.bounds.akc_max:
                raise FormatError(f"akc_mean {dist.akc_mean} above akc_max")

    @property
    def sigma_absolute(self) -> float:
        """Rician sigma in signal units, anchored to the mean class s0."""
        return self.noise_sigma * 0.5 * (self.benign.s0_mean + self.malignant.s0_mean)

    @property
    def theta_true(self) -> float:
        """Noise-free b0 signal of the fat region."""
        return float(np.hypot(self.fat_level, self.parenchyma_s0))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["protocol"] = list(self.protocol)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "PhantomConfig":
        d = dict(d)
        if "protocol" in d and not isinstance(d["protocol"], Protocol):
            d["protocol"] = Protocol(d["protocol"])
        for key in ("benign", "malignant"):
            if key in d and isinstance(d[key], dict):
                d[key] = ClassDistribution(**d[key])
        if "bounds" in d and isinstance(d["bounds"], dict):
            d["bounds"] = FitConfig(**d["bounds"])
        for key in ("lesion_row_range", "lesion_col_range", "lesion_axes_range", "fat_rect"):
            if key in d and isinstance(d[key], list):
                d[key] = tuple(d[key])
        return cls(**d)


def rician_noise(signal, sigma: float, rng) -> np.ndarray | float:
    """Magnitude-MR noise: sqrt((signal + n1)^2 + n2^2), n ~ N(0, sigma).

    sigma = 0 returns the input unchanged without consuming any draws.
    """
    if sigma < 0:
        raise FormatError(f"sigma must be >= 0, got {sigma}")
    arr = np.asarray(signal, dtype=np.float64)
    if sigma == 0:
        return float(arr) if arr.ndim == 0 else arr
    n1 = rng.normal(0.0, sigma, size=arr.shape)
    n2 = rng.normal(0.0, sigma, size=arr.shape)
    out = np.hypot(arr + n1, n2)
    return float(out) if out.ndim == 0 else out


def _truncated_normal(rng, mean, sd, lo, hi, max_redraws=100):
    """Redraw until inside [lo, hi]; clamp the last draw if out of luck."""
    if sd == 0:
        return min(max(mean, lo), hi)
    v = mean + sd * rng.standard_normal()
    for _ in range(max_redraws):
        if lo <= v <= hi:
            return v
        v = mean + sd * rng.standard_normal()
    return min(max(v, lo), hi)


def _sample_tissue(rng, dist: ClassDistribution, bounds: FitConfig, b_max: float):
    """Draw (s0, adc, akc) inside fit bounds and the model validity range."""
    s0 = _truncated_normal(rng, dist.s0_mean, dist.s0_sd, 1e-6, np.inf)
    adc = _truncated_normal(rng, dist.adc_mean, dist.adc_sd, bounds.adc_min, bounds.adc_max)
    akc = _truncated_normal(rng, dist.akc_mean, dist.akc_sd, 0.0, bounds.akc_max)
    # past b = 3/(adc*akc) the modeled decay turns around, which is
    # nonphysical and unfittable; shrink rare offending draws back in
    for _ in range(100):
        if b_max <= max_valid_b(adc, akc):
            break
        adc = _truncated_normal(rng, dist.adc_mean, dist.adc_sd, bounds.adc_min, bounds.adc_max)
        akc = _truncated_normal(rng, dist.akc_mean, dist.akc_sd, 0.0, bounds.akc_max)
    else:
        akc = 0.999 * 3.0 / (adc * b_max)
    return s0, adc, akc


def _fat_mask(config: PhantomConfig) -> np.ndarray:
    mask = np.zeros((config.height, config.width), dtype=bool)
    top, left, fh, fw = config.fat_rect
    mask[top:top + fh, left:left + fw] = True
    return mask


def _sample_lesion_mask(rng, config: PhantomConfig, fat: np.ndarray) -> np.ndarray:
    h, w = config.height, config.width
    rows = np.arange(h, dtype=np.float64)[:, None]
    cols = np.arange(w, dtype=np.float64)[None, :]
    for _ in range(100):
        cr = rng.uniform(*config.lesion_row_range)
        cc = rng.uniform(*config.lesion_col_range)
        ar = rng.uniform(*config.lesion_axes_range)
        ac = rng.uniform(*config.lesion_axes_range)
        if cr - ar < 0 or cr + ar > h - 1 or cc - ac < 0 or cc + ac > w - 1:
            continue
        lesion = ((rows - cr) / ar) ** 2 + ((cols - cc) / ac) ** 2 <= 1.0
        if lesion.any() and not (lesion & fat).any():
            return lesion
    raise GeometryError("could not place a lesion disjoint from the fat region")


def generate_case(
    config: PhantomConfig,
    label: str,
    rng,
    *,
    case_id: str = "case-0",
    force_empty: bool | None = None,
) -> LabeledCase:
    """Render one synthetic case.

    force_empty pins the empty-lesion outcome (dataset generation needs
    exact counts); left as None it is drawn with probability
    config.empty_lesion_fraction. Empty cases are benign by rule.
    """
    if label not in LABELS:
        raise FormatError(f"label must be one of {LABELS}, got {label!r}")
    empty = force_empty
    if empty is None:
        empty = bool(rng.uniform() < config.empty_lesion_fraction)
    h, w = config.height, config.width
    fat = _fat_mask(config)
    bvalues = np.array(config.protocol.bvalues)

    if empty:
        label = BENIGN
        lesion = np.zeros((h, w), dtype=bool)
        lesion_signal = None
    else:
        lesion = _sample_lesion_mask(rng, config, fat)
        dist = config.malignant if label == MALIGNANT else config.benign
        s0, adc, akc = _sample_tissue(rng, dist, config.bounds, float(bvalues.max()))
        lesion_signal = _signal(s0, adc, akc, config.theta_true, bvalues)

    fat_signal = np.hypot(
        config.fat_level,
        config.parenchyma_s0 * np.exp(-bvalues * config.parenchyma_adc),
    )
    planes = []
    for k in range(len(bvalues)):
        plane = np.zeros((h, w))
        if lesion_signal is not None:
            plane[lesion] = lesion_signal[k]
        plane[fat] = fat_signal[k]
        planes.append(rician_noise(plane, config.sigma_absolute, rng))
    stack = DwiStack.build(config.protocol, planes, lesion, fat)
    return LabeledCase(case_id, stack, label)


def generate_dataset(
    config: PhantomConfig,
    n_benign: int = 100,
    n_malignant: int = 121,
) -> tuple[LabeledCase, ...]:
    """Deterministic dataset with exact class counts.

    Empty-lesion cases come out of the benign quota:
    round(empty_lesion_fraction * total), capped at n_benign.
    """
    if n_benign < 0 or n_malignant < 0:
        raise FormatError("case counts must be >= 0")
    total = n_benign + n_malignant
    n_empty = min(n_benign, int(round(config.empty_lesion_fraction * total)))
    cases = []
    for idx in range(total):
        label = BENIGN if idx < n_benign else MALIGNANT
        rng = np.random.default_rng([config.seed, idx])
        cases.append(
            generate_case(config, label, rng,
                          case_id=f"case-{idx:04d}",
                          force_empty=idx < n_empty)
        )
    return tuple(cases)


def save_dataset(cases, out_dir, config: PhantomConfig | None = None) -> Path:
    """Write one stack directory per case plus an index manifest."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    for case in cases:
        save_stack(case.stack, out_dir / case.id, case_id=case.id, label=case.label)
        entries.append({"id": case.id, "label": case.label, "path": case.id})
    index = {
        "format": DATASET_FORMAT,
        "version": DATASET_VERSION,
        "cases": entries,
        "n_benign": sum(c.label == BENIGN for c in cases),
        "n_malignant": sum(c.label == MALIGNANT for c in cases),
    }
    if config is not None:
        index["config"] = config.to_dict()
        index["seed"] = config.seed
    index_path = out_dir / "index.json"
    _write_json(index_path, index)
    return index_path


def load_dataset(path) -> tuple[LabeledCase, ...]:
    path = Path(path)
    if path.is_dir():
        path = path / "index.json"
    if not path.is_file():
        raise FormatError(f"dataset index not found: {path}")
    try:
        index = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise FormatError(f"dataset index is not valid JSON: {e}") from e
    if index.get("format") != DATASET_FORMAT:
        raise FormatError(f"not a {DATASET_FORMAT} index: {path}")
    base = path.parent
    cases = []
    for entry in index["cases"]:
        case = load_case(base / entry["path"])
        if case.id != entry["id"] or case.label != entry["label"]:
            raise FormatError(f"index entry disagrees with manifest for {entry['id']}")
        cases.append(case)
    return tuple(cases)
