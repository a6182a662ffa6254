"""Diagnosis reports: sensitivity histograms, disentanglement, flip statistics.

Every report is computed over seeded style populations with fixed-order
aggregation, carries the config/world/model hashes it was produced under, and
reproduces bit-identically. Histogram bars keep both raw and sum-normalized
scores; a constant model yields an explicitly flagged degenerate report
rather than an error.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.stats import spearmanr

from . import engine as eng
from . import world as tw
from .directions import AttributeSpace, RelevanceMatrix, build_space, edit_direction, text_delta
from .errors import DuplicateAttributeError, EmptyDirectionError, PreconditionError
from .serialize import document_hash, model_hash, world_hash

DEFAULT_POPULATION = 200


def _search_config_dict(config: eng.SearchConfig) -> dict:
    return {
        "step_size": config.step_size,
        "bound": config.bound,
        "iterations": config.iterations,
        "optimizer": config.optimizer,
        "space": config.space,
        "flip_threshold": config.flip_threshold,
        "weights": [config.weights.target, config.weights.structure, config.weights.attribute],
        "keypoint_displacement": config.keypoint_displacement,
        "seed_index": config.seed_index,
    }


def output_change(result: eng.CounterfactualResult) -> float:
    """|f(x) - f(x_hat)| at the returned counterfactual.

    Classifier: absolute probability change. Keypoint: mean keypoint
    displacement in normalized coordinates.
    """
    if result.kind == "classifier":
        return abs(float(result.best_output) - float(result.original_output))
    disp = np.asarray(result.best_output).reshape(-1, 2) - np.asarray(
        result.original_output
    ).reshape(-1, 2)
    return float(np.mean(np.linalg.norm(disp, axis=1)))


@dataclass
class SensitivityReport:
    names: Tuple[str, ...]
    raw: np.ndarray  # per-name mean |output change|, >= 0
    normalized: np.ndarray  # sums to one; uniform fallback when degenerate
    n_samples: int
    flip_flags: np.ndarray  # (names, samples) bool: crossed within the budget
    degenerate: bool
    config_hash: str
    world_hash: str
    model_hash: str
    mode: str = "edit-direction"  # or "oracle-knob"

    def top1(self) -> str:
        return self.names[int(np.argmax(self.raw))]

    def content_hash(self) -> str:
        return document_hash(self.to_dict())

    def to_dict(self) -> dict:
        return {
            "mode": self.mode,
            "names": list(self.names),
            "raw": self.raw,
            "normalized": self.normalized,
            "n_samples": self.n_samples,
            "flip_flags": self.flip_flags.astype(int),
            "degenerate": self.degenerate,
            "config_hash": self.config_hash,
            "world_hash": self.world_hash,
            "model_hash": self.model_hash,
        }


def _finish_report(names, scores, flips, n_samples, hashes, mode) -> SensitivityReport:
    raw = np.asarray(scores, dtype=np.float64)
    if np.any(raw < 0):
        raise PreconditionError("sensitivity scores must be nonnegative")
    total = float(raw.sum())
    degenerate = total <= 0.0
    if degenerate:
        normalized = np.full(len(raw), 1.0 / len(raw))
    else:
        normalized = raw / total
    report = SensitivityReport(
        names=tuple(names),
        raw=raw,
        normalized=normalized,
        n_samples=n_samples,
        flip_flags=np.asarray(flips, dtype=bool),
        degenerate=degenerate,
        config_hash=hashes[0],
        world_hash=hashes[1],
        model_hash=hashes[2],
        mode=mode,
    )
    if not degenerate:
        assert abs(report.normalized.sum() - 1.0) <= 1e-9
        assert int(np.argmax(report.raw)) == int(np.argmax(report.normalized))
    return report


def _population(world: tw.World, n_samples: int, seed_index: int) -> List[np.ndarray]:
    return [
        tw.sample_style(world, seed_index * 1_000_000 + k, stream=tw.STREAM_DIAGNOSIS)
        for k in range(n_samples)
    ]


def sensitivity_histogram(
    world: tw.World,
    model: tw.TargetModel,
    space: AttributeSpace,
    n_samples: int = DEFAULT_POPULATION,
    config: eng.SearchConfig = eng.SearchConfig(),
    seed_index: int = 0,
) -> SensitivityReport:
    """Per-attribute mean |output change| under single-attribute searches.

    Every attribute is searched on the same seeded style population, so bars
    are paired sample by sample.
    """
    if n_samples < 1:
        raise PreconditionError("histogram needs n_samples >= 1")
    if len(space) == 0:
        raise PreconditionError("histogram needs a nonempty attribute space")
    styles = _population(world, n_samples, seed_index)
    hashes = (document_hash(_search_config_dict(config)), world_hash(world), model_hash(model))

    scores, flips = [], []
    for attr in space.names:
        sub = space.subspace([attr])
        changes = np.zeros(n_samples)
        crossed = np.zeros(n_samples, dtype=bool)
        for k, s in enumerate(styles):
            res = eng.search_counterfactual(world, model, sub, s, config, sample_index=k)
            changes[k] = output_change(res)
            crossed[k] = res.crossed_by()
        scores.append(float(changes.mean()))
        flips.append(crossed)
    return _finish_report(space.names, scores, flips, n_samples, hashes, "edit-direction")


def combination_histogram(
    world: tw.World,
    model: tw.TargetModel,
    space: AttributeSpace,
    pairs: Sequence[Tuple[str, str]],
    n_samples: int = DEFAULT_POPULATION,
    config: eng.SearchConfig = eng.SearchConfig(),
    seed_index: int = 0,
) -> SensitivityReport:
    """Like sensitivity_histogram, but each bar searches a 2-attribute subspace."""
    if n_samples < 1:
        raise PreconditionError("histogram needs n_samples >= 1")
    for a, b in pairs:
        if a == b:
            raise DuplicateAttributeError(f"attribute pair ({a!r}, {b!r}) repeats an attribute")
    styles = _population(world, n_samples, seed_index)
    hashes = (document_hash(_search_config_dict(config)), world_hash(world), model_hash(model))

    names, scores, flips = [], [], []
    for a, b in pairs:
        sub = space.subspace([a, b])
        changes = np.zeros(n_samples)
        crossed = np.zeros(n_samples, dtype=bool)
        for k, s in enumerate(styles):
            res = eng.search_counterfactual(world, model, sub, s, config, sample_index=k)
            changes[k] = output_change(res)
            crossed[k] = res.crossed_by()
        names.append(f"{a}+{b}")
        scores.append(float(changes.mean()))
        flips.append(crossed)
    return _finish_report(names, scores, flips, n_samples, hashes, "edit-direction")


def oracle_histogram(
    world: tw.World,
    model: tw.TargetModel,
    attrs: Sequence[str],
    n_samples: int = DEFAULT_POPULATION,
    config: eng.SearchConfig = eng.SearchConfig(),
    seed_index: int = 0,
) -> SensitivityReport:
    """Sensitivity histogram for the supervised baseline on oracle intensity knobs."""
    if n_samples < 1:
        raise PreconditionError("histogram needs n_samples >= 1")
    if len(attrs) == 0:
        raise PreconditionError("histogram needs at least one attribute")
    styles = _population(world, n_samples, seed_index)
    hashes = (document_hash(_search_config_dict(config)), world_hash(world), model_hash(model))

    scores, flips = [], []
    for attr in attrs:
        changes = np.zeros(n_samples)
        crossed = np.zeros(n_samples, dtype=bool)
        for k, s in enumerate(styles):
            res = eng.search_oracle(world, model, [attr], s, config, sample_index=k)
            changes[k] = output_change(res)
            crossed[k] = res.crossed_by()
        scores.append(float(changes.mean()))
        flips.append(crossed)
    return _finish_report(tuple(attrs), scores, flips, n_samples, hashes, "oracle-knob")


# --- disentanglement -------------------------------------------------------------


@dataclass
class ConfusionMatrix:
    """Mean embedding-score change (rows) under single-attribute edits (columns)."""

    row_names: Tuple[str, ...]
    col_names: Tuple[str, ...]
    matrix: np.ndarray  # (rows, cols)
    n_samples: int
    config_hash: str
    world_hash: str
    model_hash: str

    def diagonally_dominant_columns(self, factor: float = 2.0) -> int:
        count = 0
        for c, name in enumerate(self.col_names):
            r = self.row_names.index(name)
            diag = abs(self.matrix[r, c])
            off = max(
                (abs(self.matrix[i, c]) for i in range(len(self.row_names)) if i != r),
                default=0.0,
            )
            if diag >= factor * off:
                count += 1
        return count

    def content_hash(self) -> str:
        return document_hash(self.to_dict())

    def to_dict(self) -> dict:
        return {
            "row_names": list(self.row_names),
            "col_names": list(self.col_names),
            "matrix": self.matrix,
            "n_samples": self.n_samples,
            "config_hash": self.config_hash,
            "world_hash": self.world_hash,
            "model_hash": self.model_hash,
        }


def confusion_matrix(
    world: tw.World,
    model: tw.TargetModel,
    space: AttributeSpace,
    n_samples: int = DEFAULT_POPULATION,
    config: eng.SearchConfig = eng.SearchConfig(),
    seed_index: int = 0,
) -> ConfusionMatrix:
    """Score every attribute's change while optimizing each attribute alone."""
    if n_samples < 1:
        raise PreconditionError("confusion matrix needs n_samples >= 1")
    styles = _population(world, n_samples, seed_index)
    names = space.names
    acc = np.zeros((len(names), len(names)))
    for c, attr in enumerate(names):
        sub = space.subspace([attr])
        for k, s in enumerate(styles):
            res = eng.search_counterfactual(world, model, sub, s, config, sample_index=k)
            for r, scored in enumerate(names):
                before = eng.attribute_score(world, res.original_image, scored)
                after = eng.attribute_score(world, res.best_image, scored)
                acc[r, c] += after - before
    return ConfusionMatrix(
        row_names=names,
        col_names=names,
        matrix=acc / n_samples,
        n_samples=n_samples,
        config_hash=document_hash(_search_config_dict(config)),
        world_hash=world_hash(world),
        model_hash=model_hash(model),
    )


# --- flip statistics ----------------------------------------------------------------


@dataclass
class FlipStats:
    flip_rate: float
    flip_resistance: float
    budget: int
    n_samples: int

    def to_dict(self) -> dict:
        return {
            "flip_rate": self.flip_rate,
            "flip_resistance": self.flip_resistance,
            "budget": self.budget,
            "n_samples": self.n_samples,
        }


def flip_stats(results: Sequence[eng.CounterfactualResult], budget: int) -> FlipStats:
    """Fraction of searches that crossed the threshold within the budget prefix."""
    if not results:
        raise PreconditionError("flip statistics need at least one search result")
    if budget < 1:
        raise PreconditionError("budget must be >= 1")
    crossed = [r.crossed_by(budget) for r in results]
    rate = float(np.mean(crossed))
    return FlipStats(
        flip_rate=rate,
        flip_resistance=1.0 - rate,
        budget=int(budget),
        n_samples=len(results),
    )


# --- image quality comparison ---------------------------------------------------------

psnr = eng.psnr  # quality metrics live beside SSIM in the engine
ssim = eng.ssim


@dataclass
class QualityRow:
    space: str
    n_samples: int
    n_flipped: int
    psnr_mean: float
    psnr_std: float
    ssim_mean: float
    ssim_std: float


@dataclass
class QualityTable:
    rows: List[QualityRow]
    attribute_not_worse: Optional[bool]  # soft comparison flag, None if undecidable

    def to_dict(self) -> dict:
        return {
            "rows": [
                {
                    "space": r.space,
                    "n_samples": r.n_samples,
                    "n_flipped": r.n_flipped,
                    "psnr_mean": r.psnr_mean,
                    "psnr_std": r.psnr_std,
                    "ssim_mean": r.ssim_mean,
                    "ssim_std": r.ssim_std,
                }
                for r in self.rows
            ],
            "attribute_not_worse": self.attribute_not_worse,
        }


def quality_table(
    world: tw.World,
    model: tw.TargetModel,
    space: AttributeSpace,
    n_samples: int = DEFAULT_POPULATION,
    config: eng.SearchConfig = eng.SearchConfig(),
    seed_index: int = 0,
) -> QualityTable:
    """Mean/std PSNR and SSIM over flipped counterfactuals, per search space."""
    if n_samples < 0:
        raise PreconditionError("n_samples must be nonnegative")
    styles = _population(world, n_samples, seed_index) if n_samples else []
    rows: List[QualityRow] = []
    means: Dict[str, Optional[float]] = {}
    for space_kind in ("attribute", "raw-style"):
        cfg = eng.SearchConfig(
            step_size=config.step_size,
            bound=config.bound,
            iterations=config.iterations,
            optimizer=config.optimizer,
            space=space_kind,
            flip_threshold=config.flip_threshold,
            weights=config.weights,
            keypoint_displacement=config.keypoint_displacement,
            seed_index=config.seed_index,
        )
        psnrs, ssims = [], []
        for k, s in enumerate(styles):
            res = eng.search_counterfactual(world, model, space, s, cfg, sample_index=k)
            if res.flipped:
                psnrs.append(res.psnr_to_original)
                ssims.append(res.ssim_to_original)
        n_flipped = len(ssims)
        rows.append(
            QualityRow(
                space=space_kind,
                n_samples=len(styles),
                n_flipped=n_flipped,
                psnr_mean=float(np.mean(psnrs)) if n_flipped else float("nan"),
                psnr_std=float(np.std(psnrs)) if n_flipped else float("nan"),
                ssim_mean=float(np.mean(ssims)) if n_flipped else float("nan"),
                ssim_std=float(np.std(ssims)) if n_flipped else float("nan"),
            )
        )
        means[space_kind] = float(np.mean(ssims)) if n_flipped else None
    if means["attribute"] is None or means["raw-style"] is None:
        flag = None
    else:
        flag = means["attribute"] >= means["raw-style"]
    return QualityTable(rows=rows, attribute_not_worse=flag)


# --- threshold sweep --------------------------------------------------------------------


@dataclass
class LambdaSweepRow:
    lam: float
    survivors: int
    direction_norm: float
    strip: Optional[List[np.ndarray]]  # one image per strip weight; None if empty


@dataclass
class LambdaSweep:
    attribute: str
    strip_weights: Tuple[float, ...]
    rows: List[LambdaSweepRow]


STRIP_WEIGHTS = (-30.0, -15.0, 0.0, 15.0, 30.0)


def lambda_sweep(
    world: tw.World,
    relevance: RelevanceMatrix,
    attr: str,
    lam_values: Sequence[float],
    strip_style: Optional[np.ndarray] = None,
    strip_weights: Sequence[float] = STRIP_WEIGHTS,
) -> LambdaSweep:
    """Per-threshold direction summaries plus rendered edit strips.

    Thresholds must be sorted ascending; surviving-channel counts are
    non-increasing along the sweep by construction.
    """
    lam_values = [float(v) for v in lam_values]
    if lam_values != sorted(lam_values):
        raise PreconditionError("lambda values must be sorted ascending")
    if strip_style is None:
        strip_style = tw.sample_style(world, 0, stream=tw.STREAM_DIAGNOSIS)
    dt = text_delta(world, attr)

    rows: List[LambdaSweepRow] = []
    any_alive = False
    for lam in lam_values:
        try:
            d = edit_direction(relevance, dt, lam=lam, attribute=attr)
        except EmptyDirectionError:
            rows.append(LambdaSweepRow(lam=lam, survivors=0, direction_norm=0.0, strip=None))
            continue
        any_alive = True
        strip = [
            tw.render(world, strip_style + w * d.unit) for w in strip_weights
        ]
        rows.append(
            LambdaSweepRow(
                lam=lam,
                survivors=len(d.survivors),
                direction_norm=float(np.linalg.norm(d.filtered)),
                strip=strip,
            )
        )
    if not any_alive:
        raw = relevance.matrix @ dt
        raise EmptyDirectionError(attr, lam_values[0] if lam_values else 0.0, float(raw.max()))
    return LambdaSweep(attribute=attr, strip_weights=tuple(strip_weights), rows=rows)


# --- prompt phrasing stability ----------------------------------------------------------


@dataclass
class StabilityReport:
    attribute_names: Tuple[str, ...]
    set_labels: Tuple[str, ...]
    histograms: List[SensitivityReport]
    spearman_to_first: List[float]
    top1_agreement: List[bool]
    degenerate: bool

    def to_dict(self) -> dict:
        return {
            "attribute_names": list(self.attribute_names),
            "set_labels": list(self.set_labels),
            "raw_scores": [r.raw for r in self.histograms],
            "normalized_scores": [r.normalized for r in self.histograms],
            "spearman_to_first": self.spearman_to_first,
            "top1_agreement": self.top1_agreement,
            "degenerate": self.degenerate,
        }


def prompt_stability(
    world: tw.World,
    model: tw.TargetModel,
    relevance: RelevanceMatrix,
    phrasing_sets: Sequence[Dict[str, str]],
    n_samples: int = DEFAULT_POPULATION,
    config: eng.SearchConfig = eng.SearchConfig(),
    seed_index: int = 0,
    quantile: float = 0.95,
) -> StabilityReport:
    """Histogram agreement across prompt phrasings of the same attributes.

    Each phrasing set maps every attribute to one phrase (canonical when the
    attribute is omitted). The first set is the reference; Spearman rank
    correlation and top-1 agreement are reported against it.
    """
    if len(phrasing_sets) < 2:
        raise PreconditionError("stability needs at least two phrasing sets")
    attrs = sorted({a for ps in phrasing_sets for a in ps})
    if not attrs:
        raise PreconditionError("phrasing sets name no attributes")

    histograms = []
    for ps in phrasing_sets:
        space = build_space(world, relevance, attrs, phrases=dict(ps), quantile=quantile)
        histograms.append(
            sensitivity_histogram(world, model, space, n_samples, config, seed_index)
        )

    ref = histograms[0]
    spearman_vals, top1_vals = [], []
    degenerate = len(attrs) < 2
    for rep in histograms:
        if degenerate:
            rho = 1.0
        else:
            rho = float(spearmanr(ref.raw, rep.raw).statistic)
            if np.isnan(rho):  # constant scores on either side
                rho = 1.0 if np.array_equal(np.argsort(ref.raw), np.argsort(rep.raw)) else 0.0
        spearman_vals.append(rho)
        top1_vals.append(rep.top1() == ref.top1())
    return StabilityReport(
        attribute_names=tuple(attrs),
        set_labels=tuple(f"set_{i}" for i in range(len(phrasing_sets))),
        histograms=histograms,
        spearman_to_first=spearman_vals,
        top1_agreement=top1_vals,
        degenerate=degenerate,
    )
