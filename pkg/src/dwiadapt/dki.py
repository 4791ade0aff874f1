"""Diffusion-kurtosis signal model and bounded least-squares fitting.

The measured magnitude signal at diffusion weighting b is modeled as

    S(b) = sqrt(theta^2 + (s0 * exp(-b*adc + (1/6)*b^2*adc^2*akc))^2)

with s0 the noise-free unweighted amplitude, adc the apparent diffusion
coefficient (mm^2/s), akc the dimensionless apparent kurtosis coefficient,
and theta the per-case background level from fat contamination. theta is
measured once over the fat mask and held fixed; only (s0, adc, akc) are
fitted. The quadratic term makes the modeled decay non-monotone above
b = 3/(adc*akc); see :func:`max_valid_b`.

The solver is a damped Gauss-Newton iteration (Levenberg-Marquardt scaling
on the normal-equation diagonal) with the analytic Jacobian and box bounds
enforced by projection. All solver arithmetic is elementwise over a leading
voxel axis: fitting an ROI in one batch is bit-identical to fitting each
voxel alone, which keeps vectorized and sequential paths interchangeable.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .core import _PLANE_DTYPE, DwiStack, _read_manifest, _read_raw, _write_json, as_mask, as_plane
from .errors import DegenerateInput, EmptyMask, FormatError, UnderDetermined

logger = logging.getLogger(__name__)

S0_FLOOR = 1e-12
_EPS_SQ = 1e-12
_TINY = 1e-300
_LAMBDA_MAX = 1e15
_DET_MIN = 1e-12

MAPS_FORMAT = "dwiadapt-maps"
MAPS_VERSION = 1


@dataclass(frozen=True)
class DkiParams:
    """One voxel's model parameters. theta rides along but is never fitted."""

    s0: float
    adc: float
    akc: float
    theta: float = 0.0

    def __post_init__(self):
        vals = (self.s0, self.adc, self.akc, self.theta)
        if not all(math.isfinite(v) for v in vals):
            raise FormatError(f"non-finite model parameter in {vals}")
        if self.s0 <= 0:
            raise FormatError(f"s0 must be > 0, got {self.s0}")
        if self.adc <= 0:
            raise FormatError(f"adc must be > 0, got {self.adc}")
        if self.akc < 0:
            raise FormatError(f"akc must be >= 0, got {self.akc}")
        if self.theta < 0:
            raise FormatError(f"theta must be >= 0, got {self.theta}")


@dataclass(frozen=True)
class FitConfig:
    """Bounds and stopping rules for the voxel fit.

    ``constrain_akc_zero`` freezes akc at 0 so two distinct b-values
    suffice (the model drops to a mono-exponential decay).
    """

    adc_min: float = 1e-6
    adc_max: float = 5e-3
    akc_max: float = 3.0
    max_iterations: int = 200
    cost_tolerance: float = 1e-12
    param_tolerance: float = 1e-10
    constrain_akc_zero: bool = False
    damping_init: float = 1e-3

    def __post_init__(self):
        if not (0 < self.adc_min < self.adc_max):
            raise FormatError(f"need 0 < adc_min < adc_max, got [{self.adc_min}, {self.adc_max}]")
        if self.akc_max <= 0:
            raise FormatError(f"akc_max must be > 0, got {self.akc_max}")
        if self.max_iterations < 0:
            raise FormatError("max_iterations must be >= 0")
        if min(self.cost_tolerance, self.param_tolerance, self.damping_init) <= 0:
            raise FormatError("tolerances and damping_init must be > 0")


@dataclass(frozen=True)
class FitResult:
    params: DkiParams
    residual_norm: float
    iterations: int
    converged: bool


@dataclass(frozen=True)
class ParameterMaps:
    """Voxelwise fit results as planes; values are 0 outside the mask."""

    adc_map: np.ndarray
    akc_map: np.ndarray
    s0_map: np.ndarray
    mask: np.ndarray

    def __post_init__(self):
        shape = self.mask.shape
        for m in (self.adc_map, self.akc_map, self.s0_map):
            if m.shape != shape:
                raise FormatError(f"map shape {m.shape} != mask shape {shape}")

    @property
    def width(self) -> int:
        return self.mask.shape[1]

    @property
    def height(self) -> int:
        return self.mask.shape[0]


# --- forward model -----------------------------------------------------------


def _signal(s0, adc, akc, theta, b):
    core = s0 * np.exp(-b * adc + (b * b) * (adc * adc) * akc / 6.0)
    return np.sqrt(theta * theta + core * core)


def _jacobian(s0, adc, akc, theta, b):
    e = np.exp(-b * adc + (b * b) * (adc * adc) * akc / 6.0)
    g = s0 * e
    s = np.sqrt(theta * theta + g * g)
    # w = dS/dg in (0, 1]; s >= g > 0 whenever s0 > 0, so no 0/0 here
    w = g / s
    d_s0 = w * e
    d_adc = w * g * ((b * b) * adc * akc / 3.0 - b)
    d_akc = w * g * ((b * b) * (adc * adc) / 6.0)
    return d_s0, d_adc, d_akc


def forward_signal(params: DkiParams, b) -> float:
    """Modeled signal S(b); accepts a scalar or an array of b-values.

    S(0) equals sqrt(theta^2 + s0^2) exactly, and the output is always
    strictly positive and at least theta.
    """
    b = np.asarray(b, dtype=np.float64)
    if not np.all(np.isfinite(b)) or np.any(b < 0):
        raise FormatError("b-values must be finite and >= 0")
    out = _signal(params.s0, params.adc, params.akc, params.theta, b)
    return float(out) if out.ndim == 0 else out


def forward_jacobian(params: DkiParams, b):
    """Analytic partials (dS/ds0, dS/dadc, dS/dakc) of :func:`forward_signal`."""
    b = np.asarray(b, dtype=np.float64)
    if not np.all(np.isfinite(b)) or np.any(b < 0):
        raise FormatError("b-values must be finite and >= 0")
    d0, d1, d2 = _jacobian(params.s0, params.adc, params.akc, params.theta, b)
    if b.ndim == 0:
        return float(d0), float(d1), float(d2)
    return d0, d1, d2


def max_valid_b(adc: float, akc: float) -> float:
    """Largest b below which the modeled decay is still strictly decreasing."""
    if adc <= 0 or akc <= 0:
        return math.inf
    return 3.0 / (adc * akc)


# --- solver ------------------------------------------------------------------


def _solve2(a00, a01, a11, g0, g1):
    """Scaled 2x2 symmetric solve; returns (d0, d1, solvable)."""
    with np.errstate(divide="ignore", invalid="ignore"):
        d0 = np.sqrt(np.maximum(a00, _TINY))
        d1 = np.sqrt(np.maximum(a11, _TINY))
        p = a01 / (d0 * d1)
        c0 = g0 / d0
        c1 = g1 / d1
        det = 1.0 - p * p
        ok = np.abs(det) > _DET_MIN
        inv = np.where(ok, 1.0 / np.where(ok, det, 1.0), 0.0)
        return (c0 - p * c1) * inv / d0, (c1 - p * c0) * inv / d1, ok


def _solve3(a00, a01, a02, a11, a12, a22, g0, g1, g2):
    """Scaled 3x3 symmetric solve via the adjugate; returns (d0, d1, d2, solvable).

    Scaling by the diagonal square roots keeps the determinant O(1), so a
    small determinant genuinely means collinear Jacobian columns and the
    caller escalates damping instead of taking a garbage step.
    """
    with np.errstate(divide="ignore", invalid="ignore"):
        d0 = np.sqrt(np.maximum(a00, _TINY))
        d1 = np.sqrt(np.maximum(a11, _TINY))
        d2 = np.sqrt(np.maximum(a22, _TINY))
        p = a01 / (d0 * d1)
        q = a02 / (d0 * d2)
        r = a12 / (d1 * d2)
        c0 = g0 / d0
        c1 = g1 / d1
        c2 = g2 / d2
        det = 1.0 + 2.0 * p * q * r - p * p - q * q - r * r
        y0 = (1.0 - r * r) * c0 + (q * r - p) * c1 + (p * r - q) * c2
        y1 = (q * r - p) * c0 + (1.0 - q * q) * c1 + (p * q - r) * c2
        y2 = (p * r - q) * c0 + (p * q - r) * c1 + (1.0 - p * p) * c2
        ok = np.abs(det) > _DET_MIN
        inv = np.where(ok, 1.0 / np.where(ok, det, 1.0), 0.0)
        return y0 * inv / d0, y1 * inv / d1, y2 * inv / d2, ok


def _init_params(b, y, theta, config, s0_cap):
    """Closed-form warm start: background-corrected log-linear estimate."""
    g = np.sqrt(np.maximum(y * y - (theta * theta)[:, None], _EPS_SQ))
    s0 = np.clip(g[:, 0], S0_FLOOR, s0_cap)
    nz = np.flatnonzero(b > 0)
    if nz.size >= 2:
        i, j = int(nz[0]), int(nz[1])
    else:
        i, j = 0, int(nz[0])
    adc = np.log(g[:, i] / g[:, j]) / (b[j] - b[i])
    adc = np.clip(adc, config.adc_min, config.adc_max)
    akc_init = 0.0 if config.constrain_akc_zero else min(0.5, config.akc_max)
    akc = np.full(y.shape[0], akc_init)
    return s0, adc, akc


def _fit_batch(b, y, theta, config):
    """Damped Gauss-Newton over a batch of voxels sharing the b-vector.

    b is (K,) strictly sorted ascending, y is (N, K), theta is (N,).
    Returns per-voxel arrays (s0, adc, akc, residual_norm, iterations,
    converged). Every operation is elementwise in the batch axis, so a
    voxel's result never depends on what else shares the batch.
    """
    n = y.shape[0]
    s0_cap = np.maximum(10.0 * y[:, 0], S0_FLOOR)
    s0, adc, akc = _init_params(b, y, theta, config, s0_cap)
    free_akc = not config.constrain_akc_zero
    bb = b[None, :]
    th = theta[:, None]

    def residuals(s0v, adcv, akcv):
        pred = _signal(s0v[:, None], adcv[:, None], akcv[:, None], th, bb)
        res = y - pred
        return res, np.sum(res * res, axis=1)

    r, cost = residuals(s0, adc, akc)
    lam = np.full(n, config.damping_init)
    active = np.ones(n, dtype=bool)
    converged = np.zeros(n, dtype=bool)
    iters = np.zeros(n, dtype=np.int64)

    for _ in range(config.max_iterations):
        if not active.any():
            break
        j0, j1, j2 = _jacobian(s0[:, None], adc[:, None], akc[:, None], th, bb)
        m = 1.0 + lam
        a00 = np.sum(j0 * j0, axis=1)
        a01 = np.sum(j0 * j1, axis=1)
        a11 = np.sum(j1 * j1, axis=1)
        g0 = np.sum(j0 * r, axis=1)
        g1 = np.sum(j1 * r, axis=1)
        if free_akc:
            a02 = np.sum(j0 * j2, axis=1)
            a12 = np.sum(j1 * j2, axis=1)
            a22 = np.sum(j2 * j2, axis=1)
            g2 = np.sum(j2 * r, axis=1)
            d0, d1, d2, ok = _solve3(a00 * m, a01, a02, a11 * m, a12, a22 * m, g0, g1, g2)
        else:
            d0, d1, ok = _solve2(a00 * m, a01, a11 * m, g0, g1)
            d2 = np.zeros(n)
        s0_t = np.clip(s0 + d0, S0_FLOOR, s0_cap)
        adc_t = np.clip(adc + d1, config.adc_min, config.adc_max)
        akc_t = np.clip(akc + d2, 0.0, config.akc_max)
        r_t, cost_t = residuals(s0_t, adc_t, akc_t)
        accept = active & ok & (cost_t <= cost)
        small_gain = cost - cost_t <= config.cost_tolerance * np.maximum(cost, _TINY)
        tol = config.param_tolerance
        small_step = (
            (np.abs(s0_t - s0) <= tol * (np.abs(s0) + tol))
            & (np.abs(adc_t - adc) <= tol * (np.abs(adc) + tol))
            & (np.abs(akc_t - akc) <= tol * (np.abs(akc) + tol))
        )
        conv_now = accept & (small_gain | small_step)
        s0 = np.where(accept, s0_t, s0)
        adc = np.where(accept, adc_t, adc)
        akc = np.where(accept, akc_t, akc)
        r = np.where(accept[:, None], r_t, r)
        cost = np.where(accept, cost_t, cost)
        lam = np.where(accept, np.maximum(lam * 0.1, 1e-15), np.where(active, lam * 10.0, lam))
        stalled = active & ~accept & (lam > _LAMBDA_MAX)
        iters = iters + active.astype(np.int64)
        converged = converged | conv_now
        active = active & ~(conv_now | stalled)
    return s0, adc, akc, np.sqrt(cost), iters, converged


def fit_voxel(samples, theta: float, config: FitConfig | None = None) -> FitResult:
    """Least-squares fit of (s0, adc, akc) to one voxel's measured samples.

    Parameters
    ----------
    samples : sequence of (b, signal) pairs
        At least two distinct b-values; at least three unless
        config.constrain_akc_zero. Order does not matter.
    theta : float
        Fixed background level from the fat calibration.
    config : FitConfig, optional

    Returns
    -------
    FitResult
        Best parameters found; converged is False when the iteration
        budget or damping limit ran out first.
    """
    config = config or FitConfig()
    pts = sorted(((float(b), float(s)) for b, s in samples), key=lambda t: (t[0], t[1]))
    if len(pts) < 2:
        raise DegenerateInput(f"need >= 2 samples, got {len(pts)}")
    b = np.array([p[0] for p in pts])
    y = np.array([[p[1] for p in pts]])
    if not (np.all(np.isfinite(b)) and np.all(b >= 0)):
        raise FormatError("b-values must be finite and >= 0")
    if not (np.all(np.isfinite(y)) and np.all(y >= 0)):
        raise FormatError("signals must be finite and >= 0")
    theta = float(theta)
    if not (math.isfinite(theta) and theta >= 0):
        raise FormatError(f"theta must be finite and >= 0, got {theta}")
    distinct = int(np.unique(b).size)
    if distinct < 2:
        raise DegenerateInput(f"need >= 2 distinct b-values, got {distinct}")
    if np.all(y == 0):
        raise DegenerateInput("all signals are zero")
    if distinct < 3 and not config.constrain_akc_zero:
        raise UnderDetermined(
            f"3 free parameters but only {distinct} distinct b-values; "
            "set constrain_akc_zero to fit a mono-exponential"
        )
    s0, adc, akc, resid, iters, conv = _fit_batch(b, y, np.array([theta]), config)
    params = DkiParams(float(s0[0]), float(adc[0]), float(akc[0]), theta)
    return FitResult(params, float(resid[0]), int(iters[0]), bool(conv[0]))


def fit_roi(stack: DwiStack, config: FitConfig | None = None) -> ParameterMaps:
    """Fit every lesion-mask voxel of a stack; zeros outside the mask.

    All-zero voxels (no signal at any b) are assigned the degenerate
    result (s0 floor, adc_min, akc 0) instead of poisoning ROI means.
    """
    config = config or FitConfig()
    if len(stack.protocol) < 3 and not config.constrain_akc_zero:
        raise UnderDetermined(
            f"protocol has {len(stack.protocol)} b-values; "
            "set constrain_akc_zero to fit a mono-exponential"
        )
    mask = stack.lesion_mask
    h, w = mask.shape
    adc_map = np.zeros((h, w))
    akc_map = np.zeros((h, w))
    s0_map = np.zeros((h, w))
    if mask.any():
        b = np.array(stack.protocol.bvalues)
        y = np.stack([p[mask] for p in stack.planes], axis=1)
        theta = np.full(y.shape[0], stack.theta)
        s0, adc, akc, _, _, conv = _fit_batch(b, y, theta, config)
        dead = np.all(y == 0, axis=1)
        s0 = np.where(dead, S0_FLOOR, s0)
        adc = np.where(dead, config.adc_min, adc)
        akc = np.where(dead, 0.0, akc)
        conv = conv | dead
        if not conv.all():
            # expected for a few noisy voxels at the iteration cap; the
            # best-so-far iterate is kept, so surface at info level only
            logger.info(
                "fit_roi: %d of %d voxels did not converge", int((~conv).sum()), conv.size
            )
        adc_map[mask] = adc
        akc_map[mask] = akc
        s0_map[mask] = s0
    return ParameterMaps(as_plane(adc_map), as_plane(akc_map), as_plane(s0_map), mask)


def roi_mean_coefficients(maps: ParameterMaps) -> tuple[float, float]:
    """Arithmetic mean of (adc, akc) over the mask."""
    n = int(maps.mask.sum())
    if n == 0:
        raise EmptyMask("cannot average coefficients over an empty mask")
    adc_mean = float(maps.adc_map[maps.mask].sum() / n)
    akc_mean = float(maps.akc_map[maps.mask].sum() / n)
    return adc_mean, akc_mean


def threshold_classify(adc_mean: float, threshold: float, scale: float = 0.2e-3) -> float:
    """Logistic malignancy score, monotone decreasing in adc_mean.

    Smooth stand-in for the classical thresholded-ADC decision rule:
    0.5 at the threshold, saturating toward 1 for low adc and 0 for high.
    """
    if scale <= 0:
        raise FormatError(f"scale must be > 0, got {scale}")
    x = (float(threshold) - float(adc_mean)) / float(scale)
    if x >= 0:
        return 1.0 / (1.0 + math.exp(-x))
    e = math.exp(x)
    return e / (1.0 + e)


# --- maps persistence ---------------------------------------------------------


def save_maps(
    maps: ParameterMaps,
    out_dir,
    *,
    source_id: str | None = None,
    fit_config: FitConfig | None = None,
) -> Path:
    """Write parameter maps (float32 planes + mask) with a manifest."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    files = {"adc_map": "adc.f32", "akc_map": "akc.f32", "s0_map": "s0.f32"}
    for attr, fname in files.items():
        plane = getattr(maps, attr)
        (out_dir / fname).write_bytes(plane.astype(_PLANE_DTYPE).tobytes())
    (out_dir / "mask.u8").write_bytes(maps.mask.astype(np.uint8).tobytes())
    manifest = {
        "format": MAPS_FORMAT,
        "version": MAPS_VERSION,
        "width": maps.width,
        "height": maps.height,
        "maps": files,
        "mask": "mask.u8",
    }
    if source_id is not None:
        manifest["source_id"] = source_id
    if fit_config is not None:
        manifest["fit_config"] = asdict(fit_config)
    manifest_path = out_dir / "manifest.json"
    _write_json(manifest_path, manifest)
    return manifest_path


def load_maps(path) -> ParameterMaps:
    manifest, base = _read_manifest(path, expected=MAPS_FORMAT)
    try:
        width, height = int(manifest["width"]), int(manifest["height"])
        files = manifest["maps"]
        mask_file = manifest["mask"]
    except (KeyError, TypeError, ValueError) as e:
        raise FormatError(f"maps manifest missing/invalid field: {e}") from e
    n = width * height
    planes = {}
    for attr in ("adc_map", "akc_map", "s0_map"):
        raw = _read_raw(base / files[attr], n, _PLANE_DTYPE)
        planes[attr] = raw.astype(np.float64).reshape(height, width)
    raw = _read_raw(base / mask_file, n, np.dtype(np.uint8))
    if not np.isin(raw, (0, 1)).all():
        raise FormatError("mask bytes must be 0 or 1")
    mask = as_mask(raw.reshape(height, width).astype(bool))
    return ParameterMaps(
        as_plane(planes["adc_map"]), as_plane(planes["akc_map"]), as_plane(planes["s0_map"]), mask
    )
