"""Counterfactual synthesis: composite loss, SSIM, and the clamped search.

A search owns its weight vector w (one strength per edit direction, or one
per raw style channel, or one per oracle intensity knob). Each iteration
rebuilds the tape, evaluates the weighted loss

    total = alpha * target + beta * structure + gamma * attribute,

records a trace entry, and steps w by plain gradient descent or by the
signed-gradient rule, clamping every iterate into [-bound, bound]. The
returned counterfactual is the best-loss iterate, not the last one.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.special import expit

from . import autodiff as ad
from . import world as tw
from .directions import AttributeSpace, combine_edits_node
from .errors import PreconditionError, SearchDivergedError, ShapeError

SSIM_WINDOW = 7
SSIM_C1 = (0.01 * 1.0) ** 2  # stabilizers for dynamic range L = 1
SSIM_C2 = (0.03 * 1.0) ** 2
ATTR_TAU = 0.1  # temperature of the attribute-consistency scorer
ORACLE_BOUND = 1.0  # intensity offsets live in [-1, 1]


@dataclass(frozen=True)
class LossWeights:
    target: float = 1.0
    structure: float = 0.5
    attribute: float = 0.5

    def __post_init__(self):
        if min(self.target, self.structure, self.attribute) < 0:
            raise PreconditionError("loss weights must be nonnegative")
        if max(self.target, self.structure, self.attribute) <= 0:
            raise PreconditionError("at least one loss weight must be positive")


@dataclass(frozen=True)
class SearchConfig:
    step_size: float = 0.2
    bound: float = 30.0
    iterations: int = 100
    optimizer: str = "plain"  # "plain" | "signed"
    space: str = "attribute"  # "attribute" | "raw-style"
    flip_threshold: float = 0.5
    weights: LossWeights = field(default_factory=LossWeights)
    keypoint_displacement: float = 0.25
    seed_index: int = 0  # stream index for per-search keypoint targets

    def __post_init__(self):
        if self.step_size < 0:
            raise PreconditionError("step size must be nonnegative")
        if self.bound <= 0:
            raise PreconditionError("clamp bound must be positive")
        if self.iterations < 1:
            raise PreconditionError("need at least one iteration")
        if self.optimizer not in ("plain", "signed"):
            raise PreconditionError(f"unknown optimizer {self.optimizer!r}")
        if self.space not in ("attribute", "raw-style"):
            raise PreconditionError(f"unknown search space {self.space!r}")


# --- structural similarity ----------------------------------------------------


@dataclass(frozen=True)
class SsimReference:
    """Precomputed window statistics of the fixed comparison image."""

    image: np.ndarray
    mean: np.ndarray
    variance: np.ndarray
    window: int


def ssim_reference(image: np.ndarray, window: int = SSIM_WINDOW) -> SsimReference:
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 2:
        raise ShapeError(f"ssim expects 2-d images, got {image.shape}")
    if window > min(image.shape):
        raise ShapeError(f"ssim window {window} larger than image {image.shape}")
    patches = np.lib.stride_tricks.sliding_window_view(image, (window, window))
    mu = patches.mean(axis=(-1, -2))
    m2 = (patches * patches).mean(axis=(-1, -2))
    return SsimReference(image=image, mean=mu, variance=m2 - mu * mu, window=window)


def ssim_node(tape: ad.Tape, a: ad.Node, ref: SsimReference) -> ad.Node:
    """Mean local SSIM of a tape image against a fixed reference image."""
    if a.value.shape != ref.image.shape:
        raise ShapeError(f"ssim extent mismatch: {a.value.shape} vs {ref.image.shape}")
    k = ref.window
    mu_a = ad.windowed_mean(a, k)
    var_a = ad.windowed_mean(ad.mul(a, a), k) - ad.mul(mu_a, mu_a)
    mu_b = tape.constant(ref.mean)
    cov = ad.windowed_mean(ad.mul(a, tape.constant(ref.image)), k) - ad.mul(mu_a, mu_b)

    num = ad.mul(
        ad.scale(ad.mul(mu_a, mu_b), 2.0) + SSIM_C1,
        ad.scale(cov, 2.0) + SSIM_C2,
    )
    den = ad.mul(
        ad.mul(mu_a, mu_a) + ad.mul(mu_b, mu_b) + SSIM_C1,
        var_a + tape.constant(ref.variance) + SSIM_C2,
    )
    return ad.mean_all(ad.div(num, den))


def ssim(a: np.ndarray, b: np.ndarray, window: int = SSIM_WINDOW) -> float:
    """Mean local SSIM with a uniform window, stride 1, valid padding."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"ssim extent mismatch: {a.shape} vs {b.shape}")
    tape = ad.Tape()
    return float(ssim_node(tape, tape.constant(a), ssim_reference(b, window)).value)


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """Peak signal-to-noise ratio in dB for unit dynamic range; inf when equal."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"psnr extent mismatch: {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return float("inf")
    return float(10.0 * np.log10(1.0 / mse))


# --- loss terms ------------------------------------------------------------------


def classifier_target_loss_node(
    tape: ad.Tape, model: tw.TargetModel, image: ad.Node, flip_target: float
) -> ad.Node:
    """Cross-entropy pulling the prediction toward the soft flipped target.

    Implemented on the logit for stability: CE(sigmoid(z), p) = softplus(z) - p*z.
    """
    z = ad.reshape(model.logit_node(tape, image), ())
    return ad.softplus(z) - ad.scale(z, float(flip_target))


def loss_target_classifier(model: tw.TargetModel, x_hat: np.ndarray, x: np.ndarray) -> float:
    """Value of the classifier target loss with the soft target 1 - f(x)."""
    p_hat = 1.0 - float(model.predict(x))
    tape = ad.Tape()
    return float(classifier_target_loss_node(tape, model, tape.constant(x_hat), p_hat).value)


def draw_keypoint_targets(world: tw.World, config: SearchConfig, sample_index: int) -> np.ndarray:
    """Random coordinates N(0.5, 0.25^2) clipped to [0,1], fixed per search."""
    rng = tw.rng_for(
        world.config.seed, tw.STREAM_SEARCH, config.seed_index * 1_000_000 + sample_index
    )
    return np.clip(rng.normal(0.5, 0.25, size=4), 0.0, 1.0)


def keypoint_target_loss_node(
    tape: ad.Tape, model: tw.TargetModel, image: ad.Node, targets: np.ndarray
) -> ad.Node:
    """Mean squared error between predicted and target coordinates."""
    pred = model.output_node(tape, image)
    diff = pred - tape.constant(np.asarray(targets, dtype=np.float64))
    return ad.mean_all(ad.mul(diff, diff))


def loss_target_keypoint(model: tw.TargetModel, x_hat: np.ndarray, targets: np.ndarray) -> float:
    tape = ad.Tape()
    return float(keypoint_target_loss_node(tape, model, tape.constant(x_hat), targets).value)


def _similarity_logits_node(
    tape: ad.Tape, world: tw.World, image: ad.Node, attr: str, tau: float
) -> ad.Node:
    """Temperature-scaled cosine similarities against (attribute, neutral) prompts."""
    emb = tw.embed_image_node(world, tape, image)
    t_attr = tape.constant(tw.embed_text(world, tw.join_prompt(world.prompts.prefix, attr)))
    t_neutral = tape.constant(tw.embed_text(world, world.prompts.prefix))
    sims = ad.concat(
        [ad.reshape(ad.dot(emb, t_attr), (1,)), ad.reshape(ad.dot(emb, t_neutral), (1,))]
    )
    return ad.scale(sims, 1.0 / float(tau))


def attribute_distribution(
    world: tw.World, image: np.ndarray, attr: str, tau: float = ATTR_TAU
) -> np.ndarray:
    """Two-way softmax over (attribute, neutral) prompt similarities."""
    tape = ad.Tape()
    logits = _similarity_logits_node(tape, world, tape.constant(image), attr, tau)
    z = logits.value - logits.value.max()
    e = np.exp(z)
    return e / e.sum()


def attribute_score(world: tw.World, image: np.ndarray, attr: str, tau: float = ATTR_TAU) -> float:
    """Probability mass the scorer puts on the attribute prompt."""
    return float(attribute_distribution(world, image, attr, tau)[0])


def attr_consistency_loss_node(
    tape: ad.Tape,
    world: tw.World,
    attr: str,
    image: ad.Node,
    reference_distribution: np.ndarray,
    tau: float = ATTR_TAU,
) -> ad.Node:
    """Cross-entropy of the edited image's scorer distribution against the original's."""
    logits = _similarity_logits_node(tape, world, image, attr, tau)
    p = tape.constant(np.asarray(reference_distribution, dtype=np.float64))
    return ad.logsumexp(logits) - ad.dot(p, logits)


def loss_attr(
    world: tw.World, diag_attr: str, x_hat: np.ndarray, x: np.ndarray, tau: float = ATTR_TAU
) -> float:
    ref = attribute_distribution(world, x, diag_attr, tau)
    tape = ad.Tape()
    return float(
        attr_consistency_loss_node(tape, world, diag_attr, tape.constant(x_hat), ref, tau).value
    )


def total_loss(terms: Tuple[float, float, float], weights: LossWeights) -> float:
    t, s, a = terms
    return weights.target * t + weights.structure * s + weights.attribute * a


# --- the search -------------------------------------------------------------------


@dataclass
class TraceEntry:
    iteration: int
    weights: np.ndarray
    loss_target: float
    loss_structure: float
    loss_attribute: float
    loss_total: float
    output: Union[float, np.ndarray]


@dataclass
class CounterfactualResult:
    style: np.ndarray
    original_image: np.ndarray
    original_output: Union[float, np.ndarray]
    best_weights: np.ndarray
    best_image: np.ndarray
    best_output: Union[float, np.ndarray]
    best_index: int
    best_loss: float
    flipped: bool
    ssim_to_original: float
    psnr_to_original: float
    trace: List[TraceEntry]
    space_names: Tuple[str, ...]
    kind: str
    flip_threshold: float
    keypoint_displacement: float

    def output_crossed(self, output) -> bool:
        if self.kind == "classifier":
            thr = self.flip_threshold
            return (float(output) > thr) != (float(self.original_output) > thr)
        disp = np.asarray(output).reshape(-1, 2) - np.asarray(self.original_output).reshape(-1, 2)
        return float(np.mean(np.linalg.norm(disp, axis=1))) > self.keypoint_displacement

    def crossed_by(self, budget: Optional[int] = None) -> bool:
        """Whether any iterate within the budget prefix crossed the threshold."""
        entries = self.trace if budget is None else self.trace[: int(budget)]
        return any(self.output_crossed(e.output) for e in entries)


def _model_output(model: tw.TargetModel, logit_value: np.ndarray):
    out = expit(logit_value)
    return float(out[0]) if model.kind == "classifier" else np.asarray(out)


class _LossAssembler:
    """Fixed per-search state plus one-tape evaluation of the composite loss."""

    def __init__(self, world, model, config, build_image, n_dims, sample_index):
        self.world = world
        self.model = model
        self.config = config
        self.build_image = build_image
        self.n_dims = n_dims

        tape0 = ad.Tape()
        x0 = build_image(tape0, tape0.leaf(np.zeros(n_dims)))
        self.original_image = np.array(x0.value)
        self.original_output = _model_output(model, model.logit_node(tape0, x0).value)

        if model.kind == "classifier":
            self.flip_target = 1.0 - float(self.original_output)
            self.kp_targets = None
        else:
            self.flip_target = None
            self.kp_targets = draw_keypoint_targets(world, config, sample_index)

        weights = config.weights
        if weights.attribute > 0:
            if model.kind != "classifier":
                raise PreconditionError(
                    "attribute-consistency loss is defined for classifiers; "
                    "set the attribute weight to zero for keypoint searches"
                )
            if not model.attribute:
                raise PreconditionError(
                    "attribute-consistency loss needs the classifier's diagnosed attribute"
                )
            self.attr_ref = attribute_distribution(world, self.original_image, model.attribute)
        else:
            self.attr_ref = None

        self.ssim_ref = ssim_reference(self.original_image, SSIM_WINDOW)

    def evaluate(self, w: np.ndarray):
        """One forward pass; returns (tape, w_node, x_hat, terms, total, output)."""
        tape = ad.Tape()
        w_node = tape.leaf(w)
        x_hat = self.build_image(tape, w_node)
        z = self.model.logit_node(tape, x_hat)

        if self.model.kind == "classifier":
            zs = ad.reshape(z, ())
            l_target = ad.softplus(zs) - ad.scale(zs, self.flip_target)
        else:
            pred = ad.sigmoid(z)
            diff = pred - tape.constant(self.kp_targets)
            l_target = ad.mean_all(ad.mul(diff, diff))
        l_struct = 1.0 - ssim_node(tape, x_hat, self.ssim_ref)
        if self.attr_ref is not None:
            l_attr = attr_consistency_loss_node(
                tape, self.world, self.model.attribute, x_hat, self.attr_ref
            )
        else:
            l_attr = tape.constant(0.0)

        weights = self.config.weights
        total = (
            ad.scale(l_target, weights.target)
            + ad.scale(l_struct, weights.structure)
            + ad.scale(l_attr, weights.attribute)
        )
        output = _model_output(self.model, z.value)
        return tape, w_node, x_hat, (l_target, l_struct, l_attr), total, output


def _attribute_builder(world, space, style):
    def build_image(tape, w_node):
        edited = tape.constant(style) + combine_edits_node(tape, space, w_node)
        return tw.render_node(world, tape, edited)

    return build_image


def _raw_style_builder(world, style):
    def build_image(tape, w_node):
        return tw.render_node(world, tape, tape.constant(style) + w_node)

    return build_image


def _oracle_builder(world, attrs, style):
    indices = [world.attribute_index(a) for a in attrs]
    all_alphas = tw.oracle_intensities(world, style)
    searched = {j: k for k, j in enumerate(indices)}

    def build_image(tape, w_node):
        alphas = []
        for j in range(world.config.n_features):
            if j in searched:
                offset = ad.reshape(ad.take(w_node, [searched[j]]), ())
                alphas.append(offset + float(all_alphas[j]))
            else:
                alphas.append(tape.constant(float(all_alphas[j])))
        return tw.render_from_intensities(world, tape, alphas)

    return build_image


def _prepare(world, model, space, style, config, sample_index):
    style = np.asarray(style, dtype=np.float64)
    if style.shape != (world.config.style_dim,):
        raise PreconditionError(
            f"style has shape {style.shape}, expected ({world.config.style_dim},)"
        )
    if config.space == "attribute":
        if space is None or len(space) == 0:
            raise PreconditionError("attribute-space search needs a nonempty attribute space")
        builder = _attribute_builder(world, space, style)
        n, names, bound = len(space), space.names, config.bound
    else:
        builder = _raw_style_builder(world, style)
        n = world.config.style_dim
        names = tuple(f"channel_{i}" for i in range(n))
        bound = config.bound
    assembler = _LossAssembler(world, model, config, builder, n, sample_index)
    return style, assembler, n, names, bound


def composite_loss(
    world: tw.World,
    model: tw.TargetModel,
    space: Optional[AttributeSpace],
    style: np.ndarray,
    w: np.ndarray,
    config: SearchConfig = SearchConfig(),
    sample_index: int = 0,
) -> Tuple[float, np.ndarray]:
    """Total loss value and its gradient w.r.t. the edit weights at fixed w."""
    style, assembler, n, _, _ = _prepare(world, model, space, style, config, sample_index)
    w = np.asarray(w, dtype=np.float64)
    if w.shape != (n,):
        raise PreconditionError(f"weights have shape {w.shape}, expected ({n},)")
    tape, w_node, _, _, total, _ = assembler.evaluate(w)
    grad = ad.backward(total, [w_node])[w_node]
    return float(total.value), grad


def _run_search(style, assembler, config, bound, names) -> CounterfactualResult:
    model = assembler.model
    w = np.zeros(assembler.n_dims)
    trace: List[TraceEntry] = []
    best_idx, best_total = -1, np.inf
    best_w = w.copy()
    best_img = assembler.original_image.copy()
    best_out = assembler.original_output

    for it in range(config.iterations):
        tape, w_node, x_hat, terms, total, output = assembler.evaluate(w)
        if not np.isfinite(total.value):
            raise SearchDivergedError(it, trace)
        entry = TraceEntry(
            iteration=it,
            weights=w.copy(),
            loss_target=float(terms[0].value),
            loss_structure=float(terms[1].value),
            loss_attribute=float(terms[2].value),
            loss_total=float(total.value),
            output=output,
        )
        trace.append(entry)
        if entry.loss_total < best_total:
            best_idx, best_total = it, entry.loss_total
            best_w, best_img, best_out = w.copy(), np.array(x_hat.value), output

        grad = ad.backward(total, [w_node])[w_node]
        step = grad if config.optimizer == "plain" else np.sign(grad)
        w = np.clip(w - config.step_size * step, -bound, bound)

    result = CounterfactualResult(
        style=style,
        original_image=assembler.original_image,
        original_output=assembler.original_output,
        best_weights=best_w,
        best_image=best_img,
        best_output=best_out,
        best_index=best_idx,
        best_loss=best_total,
        flipped=False,
        ssim_to_original=ssim(best_img, assembler.original_image),
        psnr_to_original=psnr(best_img, assembler.original_image),
        trace=trace,
        space_names=tuple(names),
        kind=model.kind,
        flip_threshold=config.flip_threshold,
        keypoint_displacement=config.keypoint_displacement,
    )
    result.flipped = result.output_crossed(best_out)
    return result


def search_counterfactual(
    world: tw.World,
    model: tw.TargetModel,
    space: Optional[AttributeSpace],
    style: np.ndarray,
    config: SearchConfig = SearchConfig(),
    sample_index: int = 0,
) -> CounterfactualResult:
    """Clamped adversarial search in attribute-edit or raw style space."""
    style, assembler, _, names, bound = _prepare(world, model, space, style, config, sample_index)
    return _run_search(style, assembler, config, bound, names)


def search_oracle(
    world: tw.World,
    model: tw.TargetModel,
    attrs: Sequence[str],
    style: np.ndarray,
    config: SearchConfig = SearchConfig(),
    sample_index: int = 0,
) -> CounterfactualResult:
    """Search that perturbs ground-truth intensity knobs instead of edit directions.

    The supervised disentangled baseline: offsets on the oracle intensities,
    clamped to [-1, 1] regardless of the configured bound.
    """
    style = np.asarray(style, dtype=np.float64)
    if len(attrs) == 0:
        raise PreconditionError("oracle search needs at least one attribute")
    builder = _oracle_builder(world, attrs, style)
    assembler = _LossAssembler(world, model, config, builder, len(attrs), sample_index)
    bound = min(config.bound, ORACLE_BOUND)
    return _run_search(style, assembler, config, bound, tuple(attrs))
