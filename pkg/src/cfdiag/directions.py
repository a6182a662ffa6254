"""Edit-direction extraction: relevance probing, text deltas, thresholding.

The relevance matrix is estimated by forward differences of the composed
embed(render(.)) map: bump one style channel at a time on sampled styles and
average the embedding change per unit step. Mapping a prompt delta through it
scores every channel; thresholding keeps the channels whose response is
strictly above lambda (one-sided by default, absolute-value behind a flag),
and edits combine the surviving directions linearly after normalization.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, Optional, Sequence, Tuple

import numpy as np

from . import autodiff as ad
from . import world as tw
from .errors import (
    DuplicateAttributeError,
    EmptyDirectionError,
    PreconditionError,
)
from .serialize import document_hash, prompt_table_hash

DEFAULT_LAMBDA_QUANTILE = 0.95


@dataclass(frozen=True)
class RelevanceMatrix:
    """Style-to-embedding sensitivity map plus its probe provenance."""

    matrix: np.ndarray  # (style_dim, embed_dim)
    n_samples: int
    step: float
    seed: int
    seed_index: int = 0

    def content_hash(self) -> str:
        return document_hash(
            {
                "matrix": self.matrix,
                "n_samples": self.n_samples,
                "step": self.step,
                "seed": self.seed,
                "seed_index": self.seed_index,
            }
        )


def probe_relevance(
    world: tw.World, n_samples: int, step: float, seed_index: int = 0
) -> RelevanceMatrix:
    """Estimate d embed_image(render(s)) / d s_c per channel, averaged over styles."""
    if n_samples < 1:
        raise PreconditionError("probe needs n_samples >= 1")
    if step <= 0:
        raise PreconditionError("probe step must be positive")
    c = world.config
    acc = np.zeros((c.style_dim, c.embed_dim))
    for i in range(n_samples):
        s = tw.sample_style(world, seed_index * 1_000_000 + i, stream=tw.STREAM_PROBE)
        base = tw.embed_image(world, tw.render(world, s))
        for ch in range(c.style_dim):
            bumped = s.copy()
            bumped[ch] += step
            emb = tw.embed_image(world, tw.render(world, bumped))
            acc[ch] += (emb - base) / step
    return RelevanceMatrix(
        matrix=acc / n_samples,
        n_samples=n_samples,
        step=float(step),
        seed=c.seed,
        seed_index=seed_index,
    )


def text_delta(world: tw.World, attr: str, phrase: Optional[str] = None) -> np.ndarray:
    """Prompt-embedding difference against the neutral prefix.

    By default the attribute's canonical phrase is used; pass an explicit
    phrase (e.g. a synonym wording) to override.
    """
    prefix = world.prompts.prefix
    prompt = phrase if phrase is not None else tw.join_prompt(prefix, attr)
    return tw.embed_text(world, prompt) - tw.embed_text(world, prefix)


@dataclass(frozen=True)
class EditDirection:
    attribute: str
    raw: np.ndarray  # M . delta_t, all channels
    filtered: np.ndarray  # raw masked by the threshold
    lam: float
    survivors: Tuple[int, ...]
    unit: np.ndarray  # filtered / ||filtered||
    symmetric: bool = False


def default_lambda(raw: np.ndarray, quantile: float = DEFAULT_LAMBDA_QUANTILE) -> float:
    """Per-direction threshold: the given quantile of the relevance entries.

    Clamped to zero from below, since the one-sided filter requires a
    nonnegative threshold.
    """
    return float(max(0.0, np.quantile(raw, quantile)))


def edit_direction(
    relevance: RelevanceMatrix | np.ndarray,
    delta_t: np.ndarray,
    lam: Optional[float] = None,
    attribute: str = "",
    symmetric: bool = False,
) -> EditDirection:
    """Threshold the mapped prompt delta into a sparse style direction.

    Keeps entries strictly greater than lam (one-sided, the default) or with
    absolute value strictly greater than lam (symmetric variant).
    """
    m = relevance.matrix if isinstance(relevance, RelevanceMatrix) else np.asarray(relevance)
    delta_t = np.asarray(delta_t, dtype=np.float64)
    if m.ndim != 2 or m.shape[1] != delta_t.shape[0]:
        raise PreconditionError(
            f"relevance {m.shape} does not match prompt delta {delta_t.shape}"
        )
    raw = m @ delta_t
    if lam is None:
        lam = default_lambda(raw)
    lam = float(lam)
    if lam < 0:
        raise PreconditionError("threshold lambda must be nonnegative")
    mask = (np.abs(raw) > lam) if symmetric else (raw > lam)
    if not mask.any():
        scale = float(np.abs(raw).max()) if symmetric else float(raw.max())
        raise EmptyDirectionError(attribute or "<unnamed>", lam, scale)
    filtered = np.where(mask, raw, 0.0)
    return EditDirection(
        attribute=attribute,
        raw=raw,
        filtered=filtered,
        lam=lam,
        survivors=tuple(int(i) for i in np.flatnonzero(mask)),
        unit=filtered / np.linalg.norm(filtered),
        symmetric=symmetric,
    )


@dataclass(frozen=True)
class AttributeSpace:
    """Ordered, named edit directions sharing one world and relevance matrix."""

    directions: Tuple[EditDirection, ...]
    prompt_hash: str
    relevance_hash: str

    def __post_init__(self):
        names = [d.attribute for d in self.directions]
        if len(set(names)) != len(names):
            raise DuplicateAttributeError(f"duplicate attributes in space: {names}")

    @property
    def names(self) -> Tuple[str, ...]:
        return tuple(d.attribute for d in self.directions)

    def __len__(self):
        return len(self.directions)

    def unit_matrix(self) -> np.ndarray:
        return np.stack([d.unit for d in self.directions])

    def subspace(self, names: Sequence[str]) -> "AttributeSpace":
        by_name = {d.attribute: d for d in self.directions}
        missing = [n for n in names if n not in by_name]
        if missing:
            raise PreconditionError(f"attributes not in space: {missing}")
        return AttributeSpace(
            directions=tuple(by_name[n] for n in names),
            prompt_hash=self.prompt_hash,
            relevance_hash=self.relevance_hash,
        )

    def content_hash(self) -> str:
        return document_hash(
            {
                "prompt_hash": self.prompt_hash,
                "relevance_hash": self.relevance_hash,
                "directions": [
                    {
                        "attribute": d.attribute,
                        "raw": d.raw,
                        "lam": d.lam,
                        "symmetric": d.symmetric,
                    }
                    for d in self.directions
                ],
            }
        )


def build_space(
    world: tw.World,
    relevance: RelevanceMatrix,
    attrs: Sequence[str],
    lambdas: Optional[Dict[str, float]] = None,
    quantile: float = DEFAULT_LAMBDA_QUANTILE,
    symmetric: bool = False,
    phrases: Optional[Dict[str, str]] = None,
) -> AttributeSpace:
    """Extract one edit direction per attribute and assemble the search space."""
    lambdas = lambdas or {}
    phrases = phrases or {}
    dirs = []
    for attr in attrs:
        dt = text_delta(world, attr, phrases.get(attr))
        raw = relevance.matrix @ dt
        lam = lambdas.get(attr)
        if lam is None:
            lam = default_lambda(raw, quantile)
        dirs.append(edit_direction(relevance, dt, lam, attribute=attr, symmetric=symmetric))
    return AttributeSpace(
        directions=tuple(dirs),
        prompt_hash=prompt_table_hash(world),
        relevance_hash=relevance.content_hash(),
    )


def combine_edits(space: AttributeSpace, weights: np.ndarray) -> np.ndarray:
    """Linear combination of normalized directions: sum_i w_i * unit_i."""
    weights = np.asarray(weights, dtype=np.float64)
    if weights.shape != (len(space),):
        raise PreconditionError(
            f"got {weights.shape[0] if weights.ndim else 'scalar'} weights "
            f"for {len(space)} directions"
        )
    return space.unit_matrix().T @ weights


def combine_edits_node(tape: ad.Tape, space: AttributeSpace, weights: ad.Node) -> ad.Node:
    if weights.value.shape != (len(space),):
        raise PreconditionError(
            f"got weight shape {weights.value.shape} for {len(space)} directions"
        )
    return ad.matmul(tape.constant(space.unit_matrix().T), weights)
