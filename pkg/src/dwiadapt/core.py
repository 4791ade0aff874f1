"""Core domain types and bit-exact stack IO.

A *stack* bundles the co-registered diffusion-weighted planes of one case
(one 2D plane per b-value), the lesion and fat masks, and the cached
background level ``theta`` measured over the fat mask.

On disk a stack is a directory with a UTF-8 JSON manifest plus raw binary
files: planes are little-endian IEEE-754 float32, row-major, no header;
masks are one byte per pixel (0 or 1). In memory planes are float64 (the
fitting code needs the headroom); values are rounded to single precision
when written, so ``load(save(stack))`` is the identity exactly when the
stack's values are single-precision representable, which holds for
everything that came out of :func:`load_stack`.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

from .errors import (
    B0Required,
    DimensionMismatch,
    EmptyFatMask,
    FormatError,
    MissingBValue,
    ProtocolError,
)

logger = logging.getLogger(__name__)

BENIGN = "benign"
MALIGNANT = "malignant"
LABELS = (BENIGN, MALIGNANT)

MANIFEST_NAME = "manifest.json"
STACK_FORMAT = "dwiadapt-stack"
STACK_VERSION = 1

_PLANE_DTYPE = np.dtype("<f4")


def _readonly(arr: np.ndarray) -> np.ndarray:
    """Return ``arr`` with the writeable flag cleared (copying if needed)."""
    if arr.flags.writeable:
        arr = arr.copy()
        arr.flags.writeable = False
    return arr


def as_plane(data, width: int | None = None, height: int | None = None) -> np.ndarray:
    """Validate and canonicalize a signal plane.

    Returns a read-only, C-contiguous float64 array of shape (height, width)
    with finite, non-negative values.
    """
    arr = np.ascontiguousarray(data, dtype=np.float64)
    if arr.ndim != 2:
        raise DimensionMismatch(f"plane must be 2D, got shape {arr.shape}")
    if height is not None and arr.shape != (height, width):
        raise DimensionMismatch(f"plane shape {arr.shape} != ({height}, {width})")
    if not np.all(np.isfinite(arr)):
        raise FormatError("plane contains non-finite values")
    if np.any(arr < 0):
        raise FormatError("plane contains negative intensities")
    return _readonly(arr)


def as_mask(data, width: int | None = None, height: int | None = None) -> np.ndarray:
    """Validate and canonicalize a binary mask to a read-only bool array."""
    arr = np.ascontiguousarray(data)
    if arr.dtype != np.bool_:
        if not np.isin(arr, (0, 1)).all():
            raise FormatError("mask values must be 0 or 1")
        arr = arr.astype(bool)
    if arr.ndim != 2:
        raise DimensionMismatch(f"mask must be 2D, got shape {arr.shape}")
    if height is not None and arr.shape != (height, width):
        raise DimensionMismatch(f"mask shape {arr.shape} != ({height}, {width})")
    return _readonly(np.ascontiguousarray(arr))


@dataclass(frozen=True)
class Protocol:
    """Ordered acquisition protocol: the b-values (s/mm^2) of one scan.

    Invariants: at least two b-values, strictly increasing, finite,
    non-negative, and the first one is exactly 0 (every protocol includes
    the unweighted b0 image).
    """

    bvalues: tuple[float, ...]

    def __init__(self, bvalues: Iterable[float]):
        object.__setattr__(self, "bvalues", tuple(float(b) for b in bvalues))
        bv = self.bvalues
        if len(bv) < 2:
            raise ProtocolError(f"protocol needs >= 2 b-values, got {len(bv)}")
        if not all(np.isfinite(b) and b >= 0 for b in bv):
            raise ProtocolError(f"b-values must be finite and >= 0: {bv}")
        if bv[0] != 0.0:
            raise ProtocolError(f"first b-value must be 0, got {bv[0]}")
        if any(b1 >= b2 for b1, b2 in zip(bv, bv[1:])):
            raise ProtocolError(f"b-values must be strictly increasing: {bv}")

    def __len__(self) -> int:
        return len(self.bvalues)

    def __iter__(self) -> Iterator[float]:
        return iter(self.bvalues)

    def __contains__(self, b: float) -> bool:
        return float(b) in self.bvalues

    def index(self, b: float) -> int:
        """Position of b-value ``b``; raises MissingBValue if absent."""
        try:
            return self.bvalues.index(float(b))
        except ValueError:
            raise MissingBValue(f"b={b} not in protocol {self.bvalues}") from None

    @property
    def nonzero(self) -> tuple[float, ...]:
        return self.bvalues[1:]


@dataclass(frozen=True)
class DwiStack:
    """One case's diffusion-weighted planes plus lesion / fat masks.

    ``theta`` caches the mean b0 signal over the fat mask; it is derived,
    not free, and is recomputed whenever a stack is built or loaded. All
    arrays are read-only; stacks are safe to share between workers.
    """

    protocol: Protocol
    planes: tuple[np.ndarray, ...]
    lesion_mask: np.ndarray
    fat_mask: np.ndarray
    theta: float

    def __post_init__(self):
        if len(self.planes) != len(self.protocol):
            raise DimensionMismatch(
                f"{len(self.planes)} planes for {len(self.protocol)} b-values"
            )
        shape = self.planes[0].shape
        for p in self.planes:
            if p.shape != shape:
                raise DimensionMismatch("planes disagree in shape")
        for m in (self.lesion_mask, self.fat_mask):
            if m.shape != shape:
                raise DimensionMismatch("mask shape does not match planes")
        if not (np.isfinite(self.theta) and self.theta >= 0):
            raise FormatError(f"theta must be finite and >= 0, got {self.theta}")

    @classmethod
    def build(
        cls,
        protocol: Protocol,
        planes: Sequence[np.ndarray],
        lesion_mask,
        fat_mask,
        *,
        theta_on_empty: str = "zero",
    ) -> "DwiStack":
        """Validate arrays, compute theta, and assemble a stack.

        ``theta_on_empty`` controls the empty-fat-mask policy: ``"zero"``
        substitutes theta = 0 with a logged warning, ``"raise"`` raises
        :class:`EmptyFatMask`.
        """
        planes = tuple(as_plane(p) for p in planes)
        h, w = planes[0].shape
        lesion_mask = as_mask(lesion_mask, w, h)
        fat_mask = as_mask(fat_mask, w, h)
        stack = cls(protocol, planes, lesion_mask, fat_mask, theta=0.0)
        try:
            theta = compute_theta(stack)
        except EmptyFatMask:
            if theta_on_empty != "zero":
                raise
            logger.warning("empty fat mask: falling back to theta = 0")
            theta = 0.0
        return replace(stack, theta=theta)

    @property
    def width(self) -> int:
        return self.planes[0].shape[1]

    @property
    def height(self) -> int:
        return self.planes[0].shape[0]

    def plane(self, b: float) -> np.ndarray:
        """The signal plane measured at b-value ``b``."""
        return self.planes[self.protocol.index(b)]

    @property
    def b0_plane(self) -> np.ndarray:
        return self.planes[0]


@dataclass(frozen=True)
class LabeledCase:
    """A stack with its ground-truth label and case identifier."""

    id: str
    stack: DwiStack
    label: str

    def __post_init__(self):
        if self.label not in LABELS:
            raise FormatError(f"label must be one of {LABELS}, got {self.label!r}")

    @property
    def is_malignant(self) -> bool:
        return self.label == MALIGNANT


def compute_theta(stack: DwiStack) -> float:
    """Mean b0 signal intensity over the fat mask.

    Raises :class:`EmptyFatMask` when the fat mask has no pixels; callers
    that tolerate fat-free cases substitute 0 (see :meth:`DwiStack.build`).
    """
    n = int(stack.fat_mask.sum())
    if n == 0:
        raise EmptyFatMask("fat mask has no pixels")
    return float(stack.b0_plane[stack.fat_mask].sum() / n)


def subset_protocol(stack: DwiStack, keep: Iterable[float]) -> DwiStack:
    """Restrict a stack to the b-values in ``keep``.

    ``keep`` must be a subset of the stack's protocol and must contain b0.
    Kept planes are shared with the source stack (arrays are immutable),
    so the subset is bit-identical to the original on those channels.
    """
    keep_set = {float(b) for b in keep}
    if 0.0 not in keep_set:
        raise B0Required("b=0 must be kept in any protocol subset")
    for b in sorted(keep_set):
        if b not in stack.protocol:
            raise MissingBValue(f"b={b} not in stack protocol {stack.protocol.bvalues}")
    kept = [b for b in stack.protocol if b in keep_set]
    planes = tuple(stack.plane(b) for b in kept)
    return DwiStack(Protocol(kept), planes, stack.lesion_mask, stack.fat_mask, stack.theta)


# --- persistence -------------------------------------------------------------


def _plane_filename(b: float) -> str:
    return f"plane_b{b:g}.f32"


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, sort_keys=True, indent=2) + "\n", encoding="utf-8")


def save_stack(
    stack: DwiStack,
    out_dir,
    *,
    case_id: str | None = None,
    label: str | None = None,
    extra: dict | None = None,
) -> Path:
    """Write a stack directory and return the manifest path.

    Planes are stored as raw little-endian float32; masks as one byte per
    pixel. ``extra`` entries (e.g. an adaptation audit record) are merged
    into the manifest.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    plane_files = [_plane_filename(b) for b in stack.protocol]
    for fname, plane in zip(plane_files, stack.planes):
        (out_dir / fname).write_bytes(plane.astype(_PLANE_DTYPE).tobytes())
    (out_dir / "lesion_mask.u8").write_bytes(stack.lesion_mask.astype(np.uint8).tobytes())
    (out_dir / "fat_mask.u8").write_bytes(stack.fat_mask.astype(np.uint8).tobytes())
    manifest = {
        "format": STACK_FORMAT,
        "version": STACK_VERSION,
        "width": stack.width,
        "height": stack.height,
        "protocol": list(stack.protocol),
        "planes": plane_files,
        "lesion_mask": "lesion_mask.u8",
        "fat_mask": "fat_mask.u8",
        "theta": stack.theta,
    }
    if case_id is not None:
        manifest["case_id"] = case_id
    if label is not None:
        if label not in LABELS:
            raise FormatError(f"label must be one of {LABELS}, got {label!r}")
        manifest["label"] = label
    if extra:
        manifest.update(extra)
    manifest_path = out_dir / MANIFEST_NAME
    _write_json(manifest_path, manifest)
    return manifest_path


def _read_manifest(path, expected: str = STACK_FORMAT) -> tuple[dict, Path]:
    path = Path(path)
    if path.is_dir():
        path = path / MANIFEST_NAME
    if not path.is_file():
        raise FormatError(f"manifest not found: {path}")
    try:
        manifest = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise FormatError(f"manifest is not valid JSON: {path}: {e}") from e
    if not isinstance(manifest, dict) or manifest.get("format") != expected:
        raise FormatError(f"not a {expected} manifest: {path}")
    return manifest, path.parent


def _read_raw(path: Path, count: int, dtype) -> np.ndarray:
    if not path.is_file():
        raise FormatError(f"missing data file: {path}")
    data = path.read_bytes()
    expected = count * dtype.itemsize
    if len(data) != expected:
        raise FormatError(f"{path.name}: expected {expected} bytes, got {len(data)}")
    return np.frombuffer(data, dtype=dtype)


def load_stack(path, *, theta_on_empty: str = "zero") -> DwiStack:
    """Load a stack directory (or its manifest path). Theta is recomputed."""
    manifest, base = _read_manifest(path)
    try:
        width, height = int(manifest["width"]), int(manifest["height"])
        bvalues = manifest["protocol"]
        plane_files = manifest["planes"]
    except (KeyError, TypeError, ValueError) as e:
        raise FormatError(f"manifest missing/invalid field: {e}") from e
    protocol = Protocol(bvalues)
    if len(plane_files) != len(protocol):
        raise FormatError("manifest plane list does not match protocol length")
    n = width * height
    planes = [
        _read_raw(base / f, n, _PLANE_DTYPE).astype(np.float64).reshape(height, width)
        for f in plane_files
    ]
    masks = {}
    for key in ("lesion_mask", "fat_mask"):
        raw = _read_raw(base / manifest[key], n, np.dtype(np.uint8))
        if not np.isin(raw, (0, 1)).all():
            raise FormatError(f"{manifest[key]}: mask bytes must be 0 or 1")
        masks[key] = raw.reshape(height, width).astype(bool)
    return DwiStack.build(
        protocol,
        planes,
        masks["lesion_mask"],
        masks["fat_mask"],
        theta_on_empty=theta_on_empty,
    )


def load_case(path, *, theta_on_empty: str = "zero") -> LabeledCase:
    """Load a stack whose manifest carries a case id and label."""
    manifest, _ = _read_manifest(path)
    if "case_id" not in manifest or "label" not in manifest:
        raise FormatError(f"manifest at {path} has no case_id/label")
    stack = load_stack(path, theta_on_empty=theta_on_empty)
    return LabeledCase(str(manifest["case_id"]), stack, str(manifest["label"]))
