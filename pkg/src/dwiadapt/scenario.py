"""Experiment matrix over training/inference b-value mismatches.

A scenario pins a training protocol and an inference protocol drawn from
the same full acquisition. Per cross-validation fold the end-to-end
network is trained on the training channels, then tested under several
modes: matched (inference equals training), altered (the mismatched
channels fed directly, slotted into the trained channel positions),
mbda (the inference stack adapted through the signal model first), and
the fitted-map variants (f2e_matched, altered_f2e). Test scores are
pooled across folds, each case scored exactly once, and MBDA is compared
against the unadapted baselines with paired DeLong tests under a
Holm-Bonferroni correction.
"""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from itertools import combinations
from pathlib import Path

import numpy as np

from .adapt import adapt_stack
from .core import DwiStack, Protocol, as_plane, subset_protocol
from .dki import FitConfig, fit_roi
from .errors import FormatError
from .network import (
    TrainConfig,
    e2e_architecture,
    f2e_architecture,
    input_from_maps,
    input_from_stack,
    predict_input,
    train,
)
from .stats import DelongComparison, HolmResult, ScoredSet, auc, delong_test, holm_bonferroni

MODES = ("matched", "altered_e2e", "altered_f2e", "mbda", "f2e_matched")
KINDS = ("shifted", "missing", "matched")
COMPARED_PAIRS = (("mbda", "altered_e2e"), ("mbda", "altered_f2e"))


@dataclass(frozen=True)
class ScenarioSpec:
    """One training/inference protocol pairing.

    kind "shifted": equal channel counts, exactly one non-zero b-value
    swapped. kind "missing": inference is the training protocol minus one
    non-zero b-value. kind "matched" (identity, never enumerated) keeps
    the two protocols equal; it exists so adaptation idempotence can be
    exercised through the same machinery.
    """

    kind: str
    training_bvalues: tuple[float, ...]
    inference_bvalues: tuple[float, ...]
    modes: tuple[str, ...] = MODES

    def __post_init__(self):
        object.__setattr__(self, "training_bvalues",
                           tuple(float(b) for b in self.training_bvalues))
        object.__setattr__(self, "inference_bvalues",
                           tuple(float(b) for b in self.inference_bvalues))
        object.__setattr__(self, "modes", tuple(self.modes))
        if self.kind not in KINDS:
            raise FormatError(f"kind must be one of {KINDS}, got {self.kind!r}")
        for mode in self.modes:
            if mode not in MODES:
                raise FormatError(f"unknown mode {mode!r}")
        if len(set(self.modes)) != len(self.modes):
            raise FormatError("duplicate modes")
        train_p = Protocol(self.training_bvalues)  # validates order, b0, length
        inf_p = Protocol(self.inference_bvalues)
        t, i = set(train_p), set(inf_p)
        if self.kind == "shifted":
            if len(t) != len(i) or len(t - i) != 1 or len(i - t) != 1:
                raise FormatError("shifted: protocols must differ in exactly one element")
            if 0.0 in (t ^ i):
                raise FormatError("shifted: the swapped element must be non-zero")
        elif self.kind == "missing":
            if not (i < t and len(t - i) == 1):
                raise FormatError("missing: inference must drop exactly one training b-value")
            if 0.0 in (t - i):
                raise FormatError("missing: b0 cannot be the dropped channel")
        else:
            if t != i:
                raise FormatError("matched: protocols must be identical")

    def describe(self) -> str:
        train = ",".join(f"{b:g}" for b in self.training_bvalues)
        test = ",".join(f"{b:g}" for b in self.inference_bvalues)
        return f"{self.kind} train[{train}] test[{test}]"


@dataclass(frozen=True)
class ScenarioResult:
    """Pooled scores, AUCs, and significance tests for one scenario."""

    spec: ScenarioSpec
    case_ids: tuple[str, ...]
    labels: tuple[str, ...]
    scores: dict[str, tuple[float, ...]]
    aucs: dict[str, float]
    fold_aucs: dict[str, tuple[float, ...]]
    comparisons: dict[str, DelongComparison]
    holm: HolmResult | None
    alpha: float

    def scored_set(self, mode: str) -> ScoredSet:
        return ScoredSet(self.scores[mode], self.labels)


def enumerate_scenarios(full_protocol, kind: str) -> tuple[ScenarioSpec, ...]:
    """All single-channel alterations of subsets of the full protocol.

    missing: every training subset (b0 kept) from which one non-zero
    b-value can be removed while leaving a valid protocol. shifted: every
    proper training subset with one non-zero b-value swapped for one
    outside the subset. Order: larger training sets first, then
    lexicographic, then ascending altered channel.
    """
    if kind not in ("shifted", "missing"):
        raise FormatError(f"enumerable kinds are 'shifted' and 'missing', got {kind!r}")
    bvalues = tuple(float(b) for b in
                    (full_protocol.bvalues if isinstance(full_protocol, Protocol)
                     else full_protocol))
    Protocol(bvalues)
    nonzero = [b for b in bvalues if b != 0.0]
    specs = []
    subsets = []
    for size in range(len(nonzero), 0, -1):
        for combo in combinations(nonzero, size):
            subsets.append((0.0,) + combo)
    for training in subsets:
        inside = [b for b in training if b != 0.0]
        outside = sorted(set(nonzero) - set(inside))
        if kind == "missing":
            if len(training) < 3:
                continue  # removal would leave b0 alone, not a protocol
            for dropped in inside:
                inference = tuple(b for b in training if b != dropped)
                specs.append(ScenarioSpec("missing", training, inference))
        else:
            if not outside:
                continue  # nothing to shift to
            options = []
            for replaced in inside:
                for replacement in outside:
                    inference = tuple(sorted(set(training) - {replaced} | {replacement}))
                    options.append(ScenarioSpec("shifted", training, inference))
            options.sort(key=lambda s: s.inference_bvalues)
            specs.extend(options)
    return tuple(specs)


def _auto_constrained(bvalues, config: FitConfig) -> FitConfig:
    # 2 distinct b-values cannot determine 3 free parameters
    if len(bvalues) == 2 and not config.constrain_akc_zero:
        return replace(config, constrain_akc_zero=True)
    return config


def _fitted_maps(case, bvalues, config, cache):
    key = (case.id, bvalues)
    if cache is not None and key in cache:
        return cache[key]
    sub = subset_protocol(case.stack, bvalues)
    maps = fit_roi(sub, _auto_constrained(bvalues, config))
    if cache is not None:
        cache[key] = maps
    return maps


def _slotted_stack(stack: DwiStack, spec: ScenarioSpec, fill: str) -> DwiStack:
    """Inference planes arranged in the training protocol's channel slots.

    A shifted measurement occupies the slot of the b-value it replaced.
    A missing channel is filled with the nearest measured plane by |Δb|
    (ties to the lower b), or with zeros when fill is "zero".
    """
    inference = set(spec.inference_bvalues)
    extra = sorted(set(spec.inference_bvalues) - set(spec.training_bvalues))
    planes = []
    for b in spec.training_bvalues:
        if b in inference:
            planes.append(stack.plane(b))
        elif spec.kind == "shifted":
            planes.append(stack.plane(extra[0]))
        elif fill == "zero":
            planes.append(as_plane(np.zeros_like(stack.b0_plane)))
        else:
            nearest = min(spec.inference_bvalues, key=lambda a: (abs(a - b), a))
            planes.append(stack.plane(nearest))
    return DwiStack(
        Protocol(spec.training_bvalues),
        tuple(planes),
        stack.lesion_mask,
        stack.fat_mask,
        stack.theta,
    )


def run_scenario(
    spec: ScenarioSpec,
    dataset,
    split,
    fit_config: FitConfig | None = None,
    train_config: TrainConfig | None = None,
    *,
    fill: str = "nearest",
    alpha: float = 0.05,
    maps_cache: dict | None = None,
) -> ScenarioResult:
    """Train per fold, score the fold's test cases under every mode.

    The per-fold training seed is the configured seed plus the fold
    index, so folds draw independent streams but the whole run stays
    deterministic.
    """
    if fill not in ("nearest", "zero"):
        raise FormatError(f"fill must be 'nearest' or 'zero', got {fill!r}")
    fit_config = fit_config or FitConfig()
    train_config = train_config or TrainConfig()
    cases = {c.id: c for c in dataset}
    labels_by_id = {cid: c.label for cid, c in cases.items()}
    need_e2e = bool({"matched", "altered_e2e", "mbda"} & set(spec.modes))
    need_f2e = bool({"f2e_matched", "altered_f2e"} & set(spec.modes))
    train_b = spec.training_bvalues
    scores: dict[str, dict[str, float]] = {mode: {} for mode in spec.modes}

    for fold_index, fold in enumerate(split.folds):
        fold_cfg = replace(train_config, seed=train_config.seed + fold_index)
        if need_e2e:
            t_inputs = [
                input_from_stack(subset_protocol(cases[cid].stack, train_b),
                                 case_id=cid, label=cases[cid].label)
                for cid in fold.train_ids
            ]
            v_inputs = [
                input_from_stack(subset_protocol(cases[cid].stack, train_b),
                                 case_id=cid, label=cases[cid].label)
                for cid in fold.val_ids
            ]
            e2e_net = train(t_inputs, v_inputs, e2e_architecture(len(train_b)), fold_cfg)
        if need_f2e:
            t_maps = [
                input_from_maps(_fitted_maps(cases[cid], train_b, fit_config, maps_cache),
                                case_id=cid, label=cases[cid].label, fit_config=fit_config)
                for cid in fold.train_ids
            ]
            v_maps = [
                input_from_maps(_fitted_maps(cases[cid], train_b, fit_config, maps_cache),
                                case_id=cid, label=cases[cid].label, fit_config=fit_config)
                for cid in fold.val_ids
            ]
            f2e_net = train(t_maps, v_maps, f2e_architecture(), fold_cfg)

        for cid in fold.test_ids:
            case = cases[cid]
            if "matched" in scores:
                inp = input_from_stack(subset_protocol(case.stack, train_b), case_id=cid)
                scores["matched"][cid] = predict_input(e2e_net, inp)
            if "altered_e2e" in scores:
                slotted = _slotted_stack(case.stack, spec, fill)
                inp = input_from_stack(slotted, case_id=cid)
                scores["altered_e2e"][cid] = predict_input(e2e_net, inp)
            if "mbda" in scores:
                inf_stack = subset_protocol(case.stack, spec.inference_bvalues)
                adapted, _ = adapt_stack(inf_stack, Protocol(train_b), fit_config)
                inp = input_from_stack(adapted, case_id=cid)
                scores["mbda"][cid] = predict_input(e2e_net, inp)
            if "f2e_matched" in scores:
                maps = _fitted_maps(case, train_b, fit_config, maps_cache)
                inp = input_from_maps(maps, case_id=cid, fit_config=fit_config)
                scores["f2e_matched"][cid] = predict_input(f2e_net, inp)
            if "altered_f2e" in scores:
                maps = _fitted_maps(case, spec.inference_bvalues, fit_config, maps_cache)
                inp = input_from_maps(maps, case_id=cid, fit_config=fit_config)
                scores["altered_f2e"][cid] = predict_input(f2e_net, inp)

    case_ids = tuple(sorted(scores[spec.modes[0]])) if spec.modes else ()
    labels = tuple(labels_by_id[cid] for cid in case_ids)
    pooled = {
        mode: tuple(scores[mode][cid] for cid in case_ids) for mode in spec.modes
    }
    aucs = {mode: auc(ScoredSet(pooled[mode], labels)) for mode in spec.modes}
    fold_aucs = {}
    for mode in spec.modes:
        per_fold = []
        for fold in split.folds:
            ids = tuple(sorted(fold.test_ids))
            fold_set = ScoredSet(
                tuple(scores[mode][cid] for cid in ids),
                tuple(labels_by_id[cid] for cid in ids),
            )
            per_fold.append(auc(fold_set))
        fold_aucs[mode] = tuple(per_fold)
    comparisons = {}
    for mode_a, mode_b in COMPARED_PAIRS:
        if mode_a in pooled and mode_b in pooled:
            comparisons[f"{mode_a}_vs_{mode_b}"] = delong_test(
                ScoredSet(pooled[mode_a], labels), ScoredSet(pooled[mode_b], labels)
            )
    holm = None
    if comparisons:
        names = sorted(comparisons)
        holm = holm_bonferroni([comparisons[n].p_two_sided for n in names], alpha)
    return ScenarioResult(
        spec=spec,
        case_ids=case_ids,
        labels=labels,
        scores=pooled,
        aucs=aucs,
        fold_aucs=fold_aucs,
        comparisons=comparisons,
        holm=holm,
        alpha=alpha,
    )


def run_matrix(
    specs,
    dataset,
    split,
    fit_config: FitConfig | None = None,
    train_config: TrainConfig | None = None,
    *,
    fill: str = "nearest",
    alpha: float = 0.05,
    threads: int = 1,
) -> tuple[ScenarioResult, ...]:
    """Run many scenarios; results keep the input order regardless of threads.

    Fitted maps are cached by (case id, protocol) and shared across
    scenarios: refitting the same subset would reproduce bit-identical
    maps anyway, so the cache cannot change any result.
    """
    specs = tuple(specs)
    cache: dict = {}

    def one(spec):
        return run_scenario(
            spec, dataset, split, fit_config, train_config,
            fill=fill, alpha=alpha, maps_cache=cache,
        )

    if threads <= 1 or len(specs) <= 1:
        return tuple(one(s) for s in specs)
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return tuple(pool.map(one, specs))


# --- plain-data round trip for persistence -------------------------------------


def result_to_dict(result: ScenarioResult) -> dict:
    return {
        "spec": {
            "kind": result.spec.kind,
            "training_bvalues": list(result.spec.training_bvalues),
            "inference_bvalues": list(result.spec.inference_bvalues),
            "modes": list(result.spec.modes),
        },
        "case_ids": list(result.case_ids),
        "labels": list(result.labels),
        "scores": {m: list(v) for m, v in result.scores.items()},
        "aucs": dict(result.aucs),
        "fold_aucs": {m: list(v) for m, v in result.fold_aucs.items()},
        "comparisons": {
            name: {
                "auc_a": c.auc_a, "auc_b": c.auc_b,
                "var_a": c.var_a, "var_b": c.var_b, "cov_ab": c.cov_ab,
                "z": c.z, "p_two_sided": c.p_two_sided, "degenerate": c.degenerate,
            }
            for name, c in result.comparisons.items()
        },
        "holm": None if result.holm is None else {
            "pvalues": list(result.holm.pvalues),
            "order": list(result.holm.order),
            "reject": list(result.holm.reject),
            "alpha": result.holm.alpha,
        },
        "alpha": result.alpha,
    }


def save_results(results, path) -> None:
    """Store results as JSON; floats survive the round trip exactly."""
    payload = [result_to_dict(r) for r in results]
    Path(path).write_text(
        json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )


def load_results(path) -> tuple[ScenarioResult, ...]:
    try:
        payload = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as e:
        raise FormatError(f"cannot read results file {path}: {e}") from e
    if not isinstance(payload, list):
        raise FormatError("results file must hold a list of scenario records")
    return tuple(result_from_dict(d) for d in payload)


def result_from_dict(data: dict) -> ScenarioResult:
    try:
        spec = ScenarioSpec(
            kind=data["spec"]["kind"],
            training_bvalues=tuple(data["spec"]["training_bvalues"]),
            inference_bvalues=tuple(data["spec"]["inference_bvalues"]),
            modes=tuple(data["spec"]["modes"]),
        )
        holm = None
        if data["holm"] is not None:
            holm = HolmResult(
                pvalues=tuple(data["holm"]["pvalues"]),
                order=tuple(int(i) for i in data["holm"]["order"]),
                reject=tuple(bool(r) for r in data["holm"]["reject"]),
                alpha=float(data["holm"]["alpha"]),
            )
        return ScenarioResult(
            spec=spec,
            case_ids=tuple(data["case_ids"]),
            labels=tuple(data["labels"]),
            scores={m: tuple(v) for m, v in data["scores"].items()},
            aucs={m: float(v) for m, v in data["aucs"].items()},
            fold_aucs={m: tuple(v) for m, v in data["fold_aucs"].items()},
            comparisons={
                name: DelongComparison(**c) for name, c in data["comparisons"].items()
            },
            holm=holm,
            alpha=float(data["alpha"]),
        )
    except (KeyError, TypeError, ValueError) as e:
        raise FormatError(f"malformed scenario result record: {e}") from e
