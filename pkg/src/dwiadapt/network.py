"""Compact trainable classifier on masked channel stacks, numpy only.

Two configurations share one implementation. The end-to-end (E2E) form
takes raw b-value channels through a stage of 1x1 convolutions that mix
channels per pixel (learned signal exploitation), then 3x3 convolutions,
masked global pooling, and an affine softmax head. The fit-to-end (F2E)
form drops the 1x1 stage and consumes two fitted parameter maps instead.

Activations are multiplied by the lesion mask after every layer, so the
output depends only on pixels inside the mask: padding the image with
out-of-mask zeros, or cropping it to the mask's bounding box, leaves the
result unchanged exactly. Pooling likewise averages over the mask's
cardinality, never the image area.

Training is plain mini-batch Adam on the cross-entropy, deterministic for
a fixed seed: cases are sorted by id before the seeded shuffle, so the
caller's ordering cannot leak into the result.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .core import BENIGN, LABELS, MALIGNANT, DwiStack
from .dki import FitConfig, ParameterMaps
from .errors import EmptyMask, FormatError, ShapeMismatch, SingleClassTraining, TooFewCases

NETWORK_MAGIC = b"DWIADNET"
NETWORK_VERSION = 1
CLASSES = 2
_LABEL_INDEX = {BENIGN: 0, MALIGNANT: 1}


@dataclass(frozen=True)
class ArchitectureConfig:
    """Layer widths; an empty exploit stage selects the two-map F2E form."""

    input_channels: int
    exploit_widths: tuple[int, ...] = (8, 4)
    feature_widths: tuple[int, ...] = (16, 16)
    pooling: str = "average"

    def __post_init__(self):
        object.__setattr__(self, "exploit_widths", tuple(int(w) for w in self.exploit_widths))
        object.__setattr__(self, "feature_widths", tuple(int(w) for w in self.feature_widths))
        if self.input_channels < 1:
            raise FormatError("input_channels must be >= 1")
        if any(w < 1 for w in self.exploit_widths + self.feature_widths):
            raise FormatError("layer widths must be >= 1")
        if not self.feature_widths:
            raise FormatError("at least one feature layer is required")
        if not self.exploit_widths and self.input_channels != 2:
            raise FormatError("without an exploit stage the input must be the 2 parameter maps")
        if self.pooling not in ("average", "max"):
            raise FormatError(f"pooling must be 'average' or 'max', got {self.pooling!r}")

    @property
    def is_e2e(self) -> bool:
        return bool(self.exploit_widths)


def e2e_architecture(input_channels: int, **kw) -> ArchitectureConfig:
    return ArchitectureConfig(input_channels=input_channels, **kw)


def f2e_architecture(**kw) -> ArchitectureConfig:
    return ArchitectureConfig(input_channels=2, exploit_widths=(), **kw)


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 8
    max_epochs: int = 100
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise FormatError("learning_rate must be > 0")
        if self.batch_size < 1:
            raise FormatError("batch_size must be >= 1")
        if self.max_epochs < 0:
            raise FormatError("max_epochs must be >= 0")


@dataclass(frozen=True)
class Network:
    """Immutable weights plus the metadata of the run that produced them."""

    arch: ArchitectureConfig
    params: tuple[np.ndarray, ...]  # canonical order: exploit w,b.. features w,b.. head w,b
    seed: int = 0
    epochs_run: int = 0
    selected_epoch: int = 0

    def __post_init__(self):
        expected = [a.shape for a in _init_arrays(self.arch, np.random.default_rng(0))]
        got = [a.shape for a in self.params]
        if got != expected:
            raise ShapeMismatch(f"parameter shapes {got} do not match architecture {expected}")


@dataclass(frozen=True)
class NetworkInput:
    """One case prepared for the network: gated channels plus its mask."""

    case_id: str
    channels: np.ndarray  # (C, H, W), zero outside the mask
    mask: np.ndarray  # bool (H, W)
    label: str | None = None

    def __post_init__(self):
        if self.channels.ndim != 3 or self.mask.ndim != 2:
            raise ShapeMismatch("channels must be (C, H, W) and mask (H, W)")
        if self.channels.shape[1:] != self.mask.shape:
            raise ShapeMismatch(
                f"channels {self.channels.shape} do not sit on mask {self.mask.shape}"
            )
        if self.label is not None and self.label not in LABELS:
            raise FormatError(f"label must be one of {LABELS}, got {self.label!r}")


# --- input preparation --------------------------------------------------------


def _crop_to_mask(channels: np.ndarray, mask: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Crop to the mask's bounding box; gating makes this output-neutral."""
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    r0, r1 = int(rows[0]), int(rows[-1]) + 1
    c0, c1 = int(cols[0]), int(cols[-1]) + 1
    return channels[:, r0:r1, c0:c1], mask[r0:r1, c0:c1]


def input_from_stack(stack: DwiStack, *, case_id: str = "", label: str | None = None) -> NetworkInput:
    """E2E input: masked signal channels, normalized per case.

    Channels are divided by the case's background-corrected b0 level
    (sqrt of mean-b0-over-mask squared minus theta squared) so that the
    arbitrary scanner scale of s0 does not dominate training.
    """
    mask = stack.lesion_mask
    k = len(stack.protocol)
    if not mask.any():
        return NetworkInput(case_id, np.zeros((k, 1, 1)), np.zeros((1, 1), dtype=bool), label)
    b0_mean = float(stack.b0_plane[mask].mean())
    corrected_sq = b0_mean * b0_mean - stack.theta * stack.theta
    norm = float(np.sqrt(max(corrected_sq, 1e-12)))
    channels = np.stack([p * mask for p in stack.planes]) / norm
    channels, mask = _crop_to_mask(channels, mask)
    return NetworkInput(case_id, np.ascontiguousarray(channels), np.ascontiguousarray(mask), label)


def input_from_maps(
    maps: ParameterMaps,
    *,
    case_id: str = "",
    label: str | None = None,
    fit_config: FitConfig | None = None,
) -> NetworkInput:
    """F2E input: (adc, akc) maps scaled by their fit bounds to order 1."""
    cfg = fit_config or FitConfig()
    mask = maps.mask
    if not mask.any():
        return NetworkInput(case_id, np.zeros((2, 1, 1)), np.zeros((1, 1), dtype=bool), label)
    channels = np.stack([
        maps.adc_map * mask / cfg.adc_max,
        maps.akc_map * mask / cfg.akc_max,
    ])
    channels, mask = _crop_to_mask(channels, mask)
    return NetworkInput(case_id, np.ascontiguousarray(channels), np.ascontiguousarray(mask), label)


# --- forward / backward -------------------------------------------------------


def _init_arrays(arch: ArchitectureConfig, rng) -> list[np.ndarray]:
    """Fan-in-scaled uniform weights and zero biases, in canonical order."""
    params: list[np.ndarray] = []
    c = arch.input_channels
    for width in arch.exploit_widths:
        bound = 1.0 / np.sqrt(c)
        params.append(rng.uniform(-bound, bound, size=(width, c)))
        params.append(np.zeros(width))
        c = width
    for width in arch.feature_widths:
        bound = 1.0 / np.sqrt(c * 9)
        params.append(rng.uniform(-bound, bound, size=(width, c, 3, 3)))
        params.append(np.zeros(width))
        c = width
    bound = 1.0 / np.sqrt(c)
    params.append(rng.uniform(-bound, bound, size=(CLASSES, c)))
    params.append(np.zeros(CLASSES))
    return params


def init_network(arch: ArchitectureConfig, seed: int = 0) -> Network:
    rng = np.random.default_rng([seed, 0])
    params = tuple(_readonly(a) for a in _init_arrays(arch, rng))
    return Network(arch, params, seed=seed)


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a, dtype=np.float64)
    a.flags.writeable = False
    return a


def _patches3x3(x: np.ndarray) -> np.ndarray:
    """im2col view with zero padding 1: (C, 3, 3, H, W)."""
    c, h, w = x.shape
    xp = np.zeros((c, h + 2, w + 2))
    xp[:, 1:-1, 1:-1] = x
    view = np.lib.stride_tricks.sliding_window_view(xp, (3, 3), axis=(1, 2))
    return np.moveaxis(view, (3, 4), (1, 2))


def _col2im(dpatches: np.ndarray, h: int, w: int) -> np.ndarray:
    c = dpatches.shape[0]
    dxp = np.zeros((c, h + 2, w + 2))
    for di in range(3):
        for dj in range(3):
            dxp[:, di:di + h, dj:dj + w] += dpatches[:, di, dj]
    return dxp[:, 1:-1, 1:-1]


def _split_params(arch: ArchitectureConfig, params):
    n_e = len(arch.exploit_widths)
    n_f = len(arch.feature_widths)
    exploit = [(params[2 * i], params[2 * i + 1]) for i in range(n_e)]
    off = 2 * n_e
    features = [(params[off + 2 * i], params[off + 2 * i + 1]) for i in range(n_f)]
    head = (params[-2], params[-1])
    return exploit, features, head


def _forward_params(arch, params, channels, mask):
    """Run the network, returning class probabilities and backprop caches."""
    if channels.shape[0] != arch.input_channels:
        raise ShapeMismatch(
            f"{channels.shape[0]} input channels, architecture wants {arch.input_channels}"
        )
    if channels.shape[1:] != mask.shape:
        raise ShapeMismatch("channels and mask disagree in shape")
    n_mask = int(mask.sum())
    if n_mask == 0:
        raise EmptyMask("forward needs a non-empty mask")
    exploit, features, head = _split_params(arch, params)
    x = channels * mask
    cache = []
    for w, b in exploit:
        z = np.tensordot(w, x, axes=(1, 0)) + b[:, None, None]
        cache.append((x, z))
        x = np.maximum(z, 0.0) * mask
    for w, b in features:
        z = np.tensordot(w, _patches3x3(x), axes=([1, 2, 3], [0, 1, 2])) + b[:, None, None]
        cache.append((x, z))
        x = np.maximum(z, 0.0) * mask
    masked = x[:, mask]  # (C, n_mask), fixed pixel order
    if arch.pooling == "average":
        pooled = masked.sum(axis=1) / n_mask
        pool_cache = None
    else:
        pool_idx = masked.argmax(axis=1)
        pooled = masked[np.arange(masked.shape[0]), pool_idx]
        pool_cache = pool_idx
    wh, bh = head
    logits = wh @ pooled + bh
    shifted = logits - logits.max()
    e = np.exp(shifted)
    probs = e / e.sum()
    return probs, (cache, x, pooled, pool_cache, n_mask)


def forward(net: Network, channels: np.ndarray, mask: np.ndarray) -> float:
    """Malignancy probability for one masked input."""
    probs, _ = _forward_params(net.arch, net.params, channels, mask)
    return float(probs[_LABEL_INDEX[MALIGNANT]])


def _grads_params(arch, params, channels, mask, label_index):
    """Cross-entropy loss and gradients for one case, canonical order."""
    probs, (cache, x_last, pooled, pool_cache, n_mask) = _forward_params(
        arch, params, channels, mask
    )
    loss = -float(np.log(max(probs[label_index], 1e-300)))
    exploit, features, head = _split_params(arch, params)
    wh, bh = head
    dlogits = probs.copy()
    dlogits[label_index] -= 1.0
    d_wh = np.outer(dlogits, pooled)
    d_bh = dlogits.copy()
    dpooled = wh.T @ dlogits
    dx = np.zeros_like(x_last)
    if arch.pooling == "average":
        dx[:, mask] = dpooled[:, None] / n_mask
    else:
        dmasked = np.zeros((x_last.shape[0], n_mask))
        dmasked[np.arange(dmasked.shape[0]), pool_cache] = dpooled
        dx[:, mask] = dmasked
    grads = [None] * len(params)
    grads[-2], grads[-1] = d_wh, d_bh
    n_e = len(exploit)
    for i in range(len(features) - 1, -1, -1):
        w, _ = features[i]
        x_in, z = cache[n_e + i]
        dz = dx * (z > 0)  # dx is already mask-gated
        d_w = np.tensordot(dz, _patches3x3(x_in), axes=([1, 2], [3, 4]))
        d_b = dz.sum(axis=(1, 2))
        slot = 2 * (n_e + i)
        grads[slot], grads[slot + 1] = d_w, d_b
        dpatches = np.tensordot(w, dz, axes=(0, 0))
        dx = _col2im(dpatches, *mask.shape) * mask
    for i in range(n_e - 1, -1, -1):
        w, _ = exploit[i]
        x_in, z = cache[i]
        dz = dx * (z > 0)
        d_w = np.tensordot(dz, x_in, axes=([1, 2], [1, 2]))
        d_b = dz.sum(axis=(1, 2))
        grads[2 * i], grads[2 * i + 1] = d_w, d_b
        dx = np.tensordot(w, dz, axes=(0, 0)) * mask
    return loss, grads, probs


def _batch_grads(arch, params, batch):
    """Mean loss and gradients over a batch of (input, label_index)."""
    total = [np.zeros_like(p) for p in params]
    loss_sum = 0.0
    for inp, y in batch:
        loss, grads, _ = _grads_params(arch, params, inp.channels, inp.mask, y)
        loss_sum += loss
        for t, g in zip(total, grads):
            t += g
    n = len(batch)
    return loss_sum / n, [t / n for t in total]


# --- prediction ---------------------------------------------------------------


def predict_input(net: Network, inp: NetworkInput) -> float:
    """Empty-lesion rule, then the network: empty masks score 0 unseen."""
    if not inp.mask.any():
        return 0.0
    return forward(net, inp.channels, inp.mask)


def predict_case(net: Network, case, fit_config: FitConfig | None = None) -> float:
    """Score a stack (E2E) or fitted maps (F2E).

    Cases with an empty lesion mask score 0.0 without the network ever
    being touched.
    """
    if isinstance(case, DwiStack):
        if not case.lesion_mask.any():
            return 0.0
        return predict_input(net, input_from_stack(case))
    if isinstance(case, ParameterMaps):
        if not case.mask.any():
            return 0.0
        return predict_input(net, input_from_maps(case, fit_config=fit_config))
    if isinstance(case, NetworkInput):
        return predict_input(net, case)
    raise FormatError(f"cannot score a {type(case).__name__}")


# --- training -----------------------------------------------------------------


def _validation_error(arch, params, val_pairs) -> float:
    """Misclassification rate at the 0.5 threshold; empty masks score 0."""
    wrong = 0
    for inp, y in val_pairs:
        if not inp.mask.any():
            score = 0.0
        else:
            probs, _ = _forward_params(arch, params, inp.channels, inp.mask)
            score = float(probs[1])
        wrong += int(score > 0.5) != y
    return wrong / len(val_pairs)


def train(inputs, val_inputs, arch: ArchitectureConfig, cfg: TrainConfig | None = None) -> Network:
    """Mini-batch Adam with per-epoch snapshot selection.

    Selection returns the epoch with the lowest validation
    misclassification rate, earliest epoch on ties. Empty-mask cases are
    excluded from gradient batches (they carry no pixels) but still count
    in validation through the benign-by-rule score of 0.
    """
    cfg = cfg or TrainConfig()
    inputs = list(inputs)
    val_inputs = list(val_inputs)
    if any(inp.label is None for inp in inputs + val_inputs):
        raise FormatError("every training and validation input needs a label")
    labeled = inputs
    train_pairs = sorted(
        ((inp, _LABEL_INDEX[inp.label]) for inp in labeled if inp.mask.any()),
        key=lambda pair: pair[0].case_id,
    )
    val_pairs = sorted(
        ((inp, _LABEL_INDEX[inp.label]) for inp in val_inputs),
        key=lambda pair: pair[0].case_id,
    )
    if not train_pairs or not val_pairs:
        raise SingleClassTraining("training and validation sets must be non-empty")
    classes = {y for _, y in train_pairs}
    if len(classes) < 2:
        raise SingleClassTraining("training set must contain both classes")

    init_rng = np.random.default_rng([cfg.seed, 0])
    shuffle_rng = np.random.default_rng([cfg.seed, 1])
    params = _init_arrays(arch, init_rng)
    m = [np.zeros_like(p) for p in params]
    v = [np.zeros_like(p) for p in params]
    t = 0
    best_err = np.inf
    best_epoch = 0
    best_params = [p.copy() for p in params]
    n = len(train_pairs)
    for epoch in range(1, cfg.max_epochs + 1):
        order = shuffle_rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            batch = [train_pairs[i] for i in order[start:start + cfg.batch_size]]
            _, grads = _batch_grads(arch, params, batch)
            t += 1
            for k, g in enumerate(grads):
                m[k] = cfg.beta1 * m[k] + (1 - cfg.beta1) * g
                v[k] = cfg.beta2 * v[k] + (1 - cfg.beta2) * (g * g)
                m_hat = m[k] / (1 - cfg.beta1**t)
                v_hat = v[k] / (1 - cfg.beta2**t)
                params[k] = params[k] - cfg.learning_rate * m_hat / (np.sqrt(v_hat) + cfg.adam_eps)
        err = _validation_error(arch, params, val_pairs)
        if err < best_err:
            best_err = err
            best_epoch = epoch
            best_params = [p.copy() for p in params]
    return Network(
        arch,
        tuple(_readonly(p) for p in best_params),
        seed=cfg.seed,
        epochs_run=cfg.max_epochs,
        selected_epoch=best_epoch,
    )


def _loss_and_pattern(arch, params, channels, mask, label_index):
    """Loss plus the activation pattern (relu signs, pool argmax)."""
    probs, (cache, _, _, pool_cache, _) = _forward_params(arch, params, channels, mask)
    loss = -float(np.log(max(probs[label_index], 1e-300)))
    pattern = [z > 0 for _, z in cache]
    if pool_cache is not None:
        pattern.append(pool_cache)
    return loss, pattern


def _same_pattern(a, b) -> bool:
    return all(np.array_equal(x, y) for x, y in zip(a, b))


def backward_check(
    net: Network,
    inp: NetworkInput,
    label: str | None = None,
    *,
    samples_per_layer: int = 50,
    seed: int = 0,
    step_scale: float = 1e-5,
) -> float:
    """Max relative error of analytic loss gradients vs central differences.

    Samples up to samples_per_layer parameters per array; the step is
    step_scale times the parameter scale. Two kinds of sample are skipped
    because the difference quotient carries no information there: a
    perturbation that flips a relu sign or a pooling argmax (the quotient
    straddles a kink), and components below the quotient's own rounding
    resolution, a safety factor above eps * loss / step.
    """
    label = label if label is not None else inp.label
    if label not in LABELS:
        raise FormatError(f"need a label to compute the loss, got {label!r}")
    y = _LABEL_INDEX[label]
    params = [p.copy() for p in net.params]
    _, grads, _ = _grads_params(net.arch, params, inp.channels, inp.mask, y)
    base_loss, base_pattern = _loss_and_pattern(net.arch, params, inp.channels, inp.mask, y)
    rng = np.random.default_rng(seed)
    worst = 0.0
    for k, p in enumerate(params):
        flat = p.reshape(-1)
        count = min(samples_per_layer, flat.size)
        idx = rng.choice(flat.size, size=count, replace=False)
        for j in idx:
            orig = flat[j]
            h = step_scale * (abs(orig) + 0.1)
            flat[j] = orig + h
            lo_hi, pat_hi = _loss_and_pattern(net.arch, params, inp.channels, inp.mask, y)
            flat[j] = orig - h
            lo_lo, pat_lo = _loss_and_pattern(net.arch, params, inp.channels, inp.mask, y)
            flat[j] = orig
            if not (_same_pattern(base_pattern, pat_hi) and _same_pattern(base_pattern, pat_lo)):
                continue
            fd = (lo_hi - lo_lo) / (2 * h)
            a = grads[k].reshape(-1)[j]
            resolution = 2e4 * np.finfo(float).eps * (abs(base_loss) + 1.0) / h
            if abs(a) < resolution and abs(fd) < resolution:
                continue
            worst = max(worst, abs(a - fd) / max(abs(a), abs(fd), 1e-8))
    return worst


# --- splits -------------------------------------------------------------------


@dataclass(frozen=True)
class Fold:
    train_ids: tuple[str, ...]
    val_ids: tuple[str, ...]
    test_ids: tuple[str, ...]


@dataclass(frozen=True)
class SplitPlan:
    folds: tuple[Fold, ...]
    seed: int


def _chunk_sizes(n: int, k: int, offset: int) -> list[int]:
    """k chunk sizes summing to n; the n%k larger ones start at offset."""
    base = n // k
    extra = n % k
    sizes = [base] * k
    for i in range(extra):
        sizes[(offset + i) % k] += 1
    return sizes


def make_splits(cases, seed: int = 0, n_folds: int = 5) -> SplitPlan:
    """Stratified cross-validation folds at 60/20/20 train/val/test.

    Each case lands in exactly one fold's test set; the validation set of
    fold k is another fold's test chunk, chosen so every role stays
    within one case of its nominal share.
    """
    pairs = []
    for case in cases:
        if hasattr(case, "id"):
            pairs.append((str(case.id), case.label))
        else:
            cid, label = case
            pairs.append((str(cid), str(label)))
    ids = [cid for cid, _ in pairs]
    if len(set(ids)) != len(ids):
        raise FormatError("case ids must be unique")
    by_label = {lab: sorted(cid for cid, l in pairs if l == lab) for lab in LABELS}
    n_benign, n_malignant = len(by_label[BENIGN]), len(by_label[MALIGNANT])
    total = n_benign + n_malignant
    if total < 2 * n_folds or min(n_benign, n_malignant) < n_folds:
        raise TooFewCases(
            f"need >= {n_folds} cases per class for {n_folds} folds, "
            f"got {n_benign} benign / {n_malignant} malignant"
        )
    rng = np.random.default_rng([seed, 0])
    chunks: list[list[str]] = [[] for _ in range(n_folds)]
    offset = 0
    for lab in LABELS:
        pool = list(by_label[lab])
        rng.shuffle(pool)
        sizes = _chunk_sizes(len(pool), n_folds, offset)
        start = 0
        for k, size in enumerate(sizes):
            chunks[k].extend(pool[start:start + size])
            start += size
        offset += len(pool) % n_folds

    def deviations(val_offset: int) -> float:
        worst = 0.0
        for k in range(n_folds):
            n_test = len(chunks[k])
            n_val = len(chunks[(k + val_offset) % n_folds])
            n_train = total - n_test - n_val
            worst = max(
                worst,
                abs(n_test - 0.2 * total),
                abs(n_val - 0.2 * total),
                abs(n_train - 0.6 * total),
            )
        return worst

    val_offset = min(range(1, n_folds), key=lambda off: (deviations(off), off))
    folds = []
    for k in range(n_folds):
        test = chunks[k]
        val = chunks[(k + val_offset) % n_folds]
        taken = set(test) | set(val)
        train_ids = [cid for cid in ids if cid not in taken]
        folds.append(Fold(tuple(sorted(train_ids)), tuple(sorted(val)), tuple(sorted(test))))
    return SplitPlan(tuple(folds), seed)


# --- persistence ---------------------------------------------------------------


def save_network(net: Network, path) -> Path:
    """Magic + JSON header + raw little-endian float64 weight blob."""
    path = Path(path)
    header = {
        "version": NETWORK_VERSION,
        "architecture": asdict(net.arch),
        "seed": net.seed,
        "epochs_run": net.epochs_run,
        "selected_epoch": net.selected_epoch,
        "shapes": [list(p.shape) for p in net.params],
    }
    hb = json.dumps(header, sort_keys=True).encode("utf-8")
    blob = b"".join(np.ascontiguousarray(p, dtype="<f8").tobytes() for p in net.params)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(NETWORK_MAGIC + struct.pack("<I", len(hb)) + hb + blob)
    return path


def load_network(path) -> Network:
    raw = Path(path).read_bytes()
    if raw[: len(NETWORK_MAGIC)] != NETWORK_MAGIC:
        raise FormatError(f"not a network file: {path}")
    off = len(NETWORK_MAGIC)
    (hlen,) = struct.unpack_from("<I", raw, off)
    off += 4
    try:
        header = json.loads(raw[off:off + hlen].decode("utf-8"))
    except (json.JSONDecodeError, UnicodeDecodeError) as e:
        raise FormatError(f"bad network header: {e}") from e
    off += hlen
    if header.get("version") != NETWORK_VERSION:
        raise FormatError(f"unsupported network version {header.get('version')}")
    arch_d = dict(header["architecture"])
    for key in ("exploit_widths", "feature_widths"):
        arch_d[key] = tuple(arch_d[key])
    arch = ArchitectureConfig(**arch_d)
    params = []
    for shape in header["shapes"]:
        count = int(np.prod(shape)) if shape else 1
        nbytes = count * 8
        if off + nbytes > len(raw):
            raise FormatError("network file truncated")
        arr = np.frombuffer(raw, dtype="<f8", count=count, offset=off).reshape(shape)
        params.append(_readonly(arr.astype(np.float64)))
        off += nbytes
    if off != len(raw):
        raise FormatError("trailing bytes in network file")
    return Network(
        arch,
        tuple(params),
        seed=int(header["seed"]),
        epochs_run=int(header["epochs_run"]),
        selected_epoch=int(header["selected_epoch"]),
    )
