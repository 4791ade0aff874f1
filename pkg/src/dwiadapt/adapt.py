"""Restore a training protocol's channels from a mismatched inference stack.

The inference stack is fitted voxelwise on ALL measured b-values, then the
fitted model synthesizes planes for the b-values the trained classifier
expects but the scan did not provide. Channels present in both protocols
pass through bit-identically; measured channels absent from the training
protocol are dropped from the output but still inform the fit, which is
exactly what makes a shifted acquisition more informative than a missing
one.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np

from .core import DwiStack, Protocol, as_plane, save_stack
from .dki import FitConfig, ParameterMaps, _signal, fit_roi
from .errors import FormatError

__all__ = ["AdaptationReport", "restore_channel", "adapt_stack", "save_adapted_stack"]


@dataclass(frozen=True)
class AdaptationReport:
    """Audit record of one adaptation: which channels came from where."""

    kept: tuple[float, ...]
    derived: tuple[float, ...]
    dropped: tuple[float, ...]

    def __post_init__(self):
        if set(self.kept) & set(self.derived):
            raise FormatError("kept and derived b-values must be disjoint")


def _effective_config(stack: DwiStack, config: FitConfig) -> FitConfig:
    # two distinct b-values cannot pin down three parameters; force the
    # mono-exponential constraint rather than fail or guess
    if len(stack.protocol) == 2 and not config.constrain_akc_zero:
        return replace(config, constrain_akc_zero=True)
    return config


def _forward_plane(maps: ParameterMaps, theta: float, b: float) -> np.ndarray:
    """Evaluate the fitted model at b over the mask; zeros elsewhere."""
    plane = np.zeros(maps.mask.shape)
    m = maps.mask
    if m.any():
        plane[m] = _signal(maps.s0_map[m], maps.adc_map[m], maps.akc_map[m], theta, float(b))
    return plane


def restore_channel(stack: DwiStack, target_b: float, config: FitConfig | None = None) -> np.ndarray:
    """Synthesize the signal plane at target_b from a voxelwise fit.

    Always evaluates the fitted model, even when target_b was measured;
    deciding when to pass a measured plane through instead is
    :func:`adapt_stack`'s job. Voxels outside the lesion mask are 0.
    """
    config = config or FitConfig()
    target_b = float(target_b)
    if not target_b >= 0:
        raise FormatError(f"target b-value must be >= 0, got {target_b}")
    maps = fit_roi(stack, config)
    return as_plane(_forward_plane(maps, stack.theta, target_b))


def adapt_stack(
    inference_stack: DwiStack,
    training_protocol: Protocol,
    config: FitConfig | None = None,
) -> tuple[DwiStack, AdaptationReport]:
    """Produce a stack with exactly the training protocol's channels.

    Measured channels shared with the training protocol pass through
    bit-identically. Missing channels are synthesized from one voxelwise
    fit over all measured b-values, including measured channels the
    training protocol does not contain. With only two measured b-values
    the fit is forced to the akc = 0 constraint.
    """
    config = config or FitConfig()
    have = set(inference_stack.protocol)
    want = set(training_protocol)
    kept = tuple(sorted(have & want))
    derived = tuple(sorted(want - have))
    dropped = tuple(sorted(have - want))
    report = AdaptationReport(kept, derived, dropped)

    if derived:
        cfg = _effective_config(inference_stack, config)
        maps = fit_roi(inference_stack, cfg)
    planes = []
    for b in training_protocol:
        if b in have:
            planes.append(inference_stack.plane(b))
        else:
            planes.append(as_plane(_forward_plane(maps, inference_stack.theta, b)))
    adapted = DwiStack(
        training_protocol,
        tuple(planes),
        inference_stack.lesion_mask,
        inference_stack.fat_mask,
        inference_stack.theta,
    )
    return adapted, report


def save_adapted_stack(
    stack: DwiStack,
    report: AdaptationReport,
    out_dir,
    *,
    config: FitConfig | None = None,
    case_id: str | None = None,
    label: str | None = None,
) -> Path:
    """Persist an adapted stack with the adaptation record in its manifest."""
    record = {
        "kept": list(report.kept),
        "derived": list(report.derived),
        "dropped": list(report.dropped),
    }
    if config is not None:
        record["fit_config"] = asdict(config)
    return save_stack(stack, out_dir, case_id=case_id, label=label,
                      extra={"adaptation": record})
