"""Hermetic, seeded toy world: renderer, joint text/image embedder, targets.

The generator is template-additive with disjoint channel ownership. Each of
the K semantic features owns a dedicated pair of style channels; a feature's
intensity is tanh of a fixed mixing of its pair, and the rendered image is a
smooth squash of a fixed base pattern plus intensity-scaled templates. Ground
truth is therefore checkable: oracle intensities, labels, and disentanglement
all follow from the construction.

Text and image embeddings share one space. K+1 orthonormal axes are drawn per
world: one neutral axis and one per attribute. Canonical prompts embed as the
normalized neutral-plus-attribute vector; synonym prompts add bounded noise.
Image embeddings project the rendered image onto the (zero-mean) templates and
map those projections onto the attribute axes, so raising a feature's
intensity moves the image embedding toward that attribute's prompt.

Worlds are immutable after construction and safe for concurrent reads. All
randomness is counter-based: every draw derives from (master seed, stream,
index), so sampling order never matters.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Dict, Optional, Tuple

import numpy as np
from scipy.special import expit

from . import autodiff as ad
from .errors import (
    GenerationBudgetError,
    PreconditionError,
    TrainingDivergedError,
    UnknownAttributeError,
)

# rng stream ids; every consumer of world randomness gets its own stream
STREAM_WORLD = 0
STREAM_STYLE = 1
STREAM_DATASET = 2
STREAM_TRAIN = 3
STREAM_PROBE = 4
STREAM_DIAGNOSIS = 5
STREAM_SEARCH = 6
STREAM_CT = 7
STREAM_EVAL = 8

DEFAULT_ATTRIBUTES = ("stripes", "dots", "rings", "haze", "checker", "glow")

# synonym wordings per canonical attribute; all decompose as prefix (+) phrase
SYNONYMS: Dict[str, Tuple[str, ...]] = {
    "stripes": ("banding", "striped texture"),
    "dots": ("speckles", "dotted texture"),
    "rings": ("circles", "ring shapes"),
    "haze": ("fog", "hazy veil"),
    "checker": ("checkerboard", "checkered texture"),
    "glow": ("shine", "glowing spot"),
}

# norm of an attribute axis relative to the unit neutral vector; keeps the
# prompt-delta cosine against the raw axis above 0.95
ATTR_VECTOR_NORM = 0.4


def rng_for(seed: int, stream: int, index: int = 0) -> np.random.Generator:
    """Independent generator derived from (master seed, stream, index)."""
    return np.random.default_rng([int(seed), int(stream), int(index)])


def join_prompt(prefix: str, attribute: str) -> str:
    """String concatenation used by the prompt table; empty attribute is identity."""
    return f"{prefix} with {attribute}" if attribute else prefix


@dataclass(frozen=True)
class WorldConfig:
    style_dim: int = 16
    embed_dim: int = 12
    height: int = 32
    width: int = 32
    n_features: int = 6
    text_noise: float = 0.02
    seed: int = 0
    attributes: Tuple[str, ...] = DEFAULT_ATTRIBUTES

    def __post_init__(self):
        if self.n_features < 1:
            raise PreconditionError("n_features must be >= 1")
        if 2 * self.n_features > self.style_dim:
            raise PreconditionError(
                f"need 2*n_features <= style_dim, got {2 * self.n_features} > {self.style_dim}"
            )
        if self.n_features + 1 > self.embed_dim:
            raise PreconditionError(
                f"need n_features+1 <= embed_dim, got {self.n_features + 1} > {self.embed_dim}"
            )
        if len(self.attributes) != self.n_features:
            raise PreconditionError(
                f"{self.n_features} features but {len(self.attributes)} attribute names"
            )
        if len(set(self.attributes)) != len(self.attributes):
            raise PreconditionError("attribute names must be unique")
        if self.height < 8 or self.width < 8:
            raise PreconditionError("image extent too small")
        if self.text_noise < 0:
            raise PreconditionError("text_noise must be nonnegative")
        object.__setattr__(self, "attributes", tuple(self.attributes))


@dataclass(frozen=True)
class PromptTable:
    prefix: str
    embeddings: Dict[str, np.ndarray]  # full phrase -> unit embedding
    canonical: Dict[str, str]  # attribute -> canonical phrase
    synonyms: Dict[str, Tuple[str, ...]]  # attribute -> synonym phrases

    def lookup(self, prompt: str) -> np.ndarray:
        if prompt not in self.embeddings:
            raise UnknownAttributeError(prompt, known=self.embeddings.keys())
        return self.embeddings[prompt]


def _gaussian_bump(h, w, cy, cx, sigma):
    ys = np.arange(h)[:, None]
    xs = np.arange(w)[None, :]
    return np.exp(-(((ys - cy) ** 2) + ((xs - cx) ** 2)) / (2.0 * sigma * sigma))


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a, dtype=np.float64)
    a.flags.writeable = False
    return a


class World:
    """All fixed world state derived deterministically from a WorldConfig."""

    def __init__(self, config: WorldConfig):
        self.config = config
        c = config
        rng = rng_for(c.seed, STREAM_WORLD)

        # feature centers on a jittered ring, well separated, away from borders
        k = c.n_features
        angles = 2.0 * np.pi * np.arange(k) / k + rng.uniform(-0.2, 0.2, size=k)
        radii = 0.30 + rng.uniform(-0.04, 0.04, size=k)
        cy = (0.5 + radii * np.sin(angles)) * (c.height - 1)
        cx = (0.5 + radii * np.cos(angles)) * (c.width - 1)
        sigmas = rng.uniform(0.09, 0.13, size=k) * min(c.height, c.width)
        self.centers = _readonly(np.stack([cy / (c.height - 1), cx / (c.width - 1)], axis=1))

        bumps = np.stack(
            [_gaussian_bump(c.height, c.width, cy[j], cx[j], sigmas[j]) for j in range(k)]
        )
        # zero-mean so the flat background drops out of projections, then
        # orthonormalized so one feature's intensity does not bleed into
        # another feature's projection at first order
        flat = (bumps - bumps.mean(axis=(1, 2), keepdims=True)).reshape(k, -1)
        for j in range(k):
            for i in range(j):
                flat[j] -= (flat[j] @ flat[i]) * flat[i]
            flat[j] /= np.linalg.norm(flat[j])
        self.templates = _readonly(flat.reshape(k, c.height, c.width))
        # positive masks retained for the keypoint oracle
        self.masks = _readonly(bumps / bumps.reshape(k, -1).max(axis=1)[:, None, None])

        # smooth low-frequency base pattern (pre-squash logits); kept faint so
        # its projection onto the templates does not drown feature responses
        ys = np.linspace(0.0, 1.0, c.height)[:, None]
        xs = np.linspace(0.0, 1.0, c.width)[None, :]
        f1, f2 = rng.uniform(0.5, 1.5, size=2)
        p1, p2 = rng.uniform(0.0, 1.0, size=2)
        a1, a2 = rng.uniform(0.05, 0.10, size=2)
        self.base = _readonly(
            a1 * np.cos(2.0 * np.pi * (f1 * xs + p1)) + a2 * np.sin(2.0 * np.pi * (f2 * ys + p2))
        )

        # disjoint channel ownership: feature j reads channels (2j, 2j+1)
        self.channel_pairs = tuple((2 * j, 2 * j + 1) for j in range(k))
        mixing = rng.uniform(0.35, 1.0, size=(k, 2))
        self.mixing = _readonly(mixing / np.linalg.norm(mixing, axis=1, keepdims=True))
        self.bias = _readonly(rng.normal(0.0, 0.1, size=k))

        # joint embedding axes: K attribute axes plus one neutral axis
        raw = rng.normal(size=(c.embed_dim, k + 1))
        q, r = np.linalg.qr(raw)
        q = q * np.sign(np.diag(r))
        self.attr_axes = _readonly(q[:, :k].T)  # (K, c_T)
        self.neutral_axis = _readonly(q[:, k])
        self.image_map = _readonly(q[:, :k])  # (c_T, K): projections -> embedding

        self.prompts = self._build_prompts(rng)

        # flattened template matrix reused by the embedder
        self._template_rows = _readonly(self.templates.reshape(k, -1))

    def _build_prompts(self, rng: np.random.Generator) -> PromptTable:
        c = self.config
        prefix = "a canvas"
        embeddings: Dict[str, np.ndarray] = {}
        canonical: Dict[str, str] = {}
        synonyms: Dict[str, Tuple[str, ...]] = {}

        embeddings[prefix] = _readonly(self.neutral_axis.copy())
        cap = 3.0 * c.text_noise
        for j, attr in enumerate(c.attributes):
            vec = self.neutral_axis + ATTR_VECTOR_NORM * self.attr_axes[j]
            phrase = join_prompt(prefix, attr)
            embeddings[phrase] = _readonly(vec / np.linalg.norm(vec))
            canonical[attr] = phrase

            words = SYNONYMS.get(attr, ())
            kept = []
            for word in words:
                eta = rng.normal(0.0, c.text_noise, size=c.embed_dim)
                n = np.linalg.norm(eta)
                if cap > 0 and n > cap:
                    eta = eta * (cap / n)
                elif cap == 0:
                    eta = np.zeros_like(eta)
                noisy = vec + eta
                sphrase = join_prompt(prefix, word)
                embeddings[sphrase] = _readonly(noisy / np.linalg.norm(noisy))
                kept.append(sphrase)
            synonyms[attr] = tuple(kept)
        return PromptTable(prefix, embeddings, canonical, synonyms)

    # --- attribute bookkeeping -------------------------------------------

    def attribute_index(self, attr: str) -> int:
        try:
            return self.config.attributes.index(attr)
        except ValueError:
            raise UnknownAttributeError(attr, known=self.config.attributes) from None


def sample_style(world: World, index: int, stream: int = STREAM_STYLE) -> np.ndarray:
    """Standard-normal style vector for (master seed, stream, index)."""
    rng = rng_for(world.config.seed, stream, index)
    return rng.standard_normal(world.config.style_dim)


# --- differentiable forward maps ------------------------------------------


def intensity_node(world: World, tape: ad.Tape, style: ad.Node, feature: int) -> ad.Node:
    lo, hi = world.channel_pairs[feature]
    pair = ad.take(style, [lo, hi])
    pre = ad.dot(pair, tape.constant(world.mixing[feature])) + float(world.bias[feature])
    return ad.tanh(pre)


def render_from_intensities(world: World, tape: ad.Tape, alphas) -> ad.Node:
    """squash(base + sum_j alpha_j * template_j) for per-feature scalar nodes."""
    logits = tape.constant(world.base)
    for j, alpha in enumerate(alphas):
        logits = logits + ad.mul(alpha, tape.constant(world.templates[j]))
    return ad.squash(logits)


def render_node(world: World, tape: ad.Tape, style: ad.Node) -> ad.Node:
    if style.value.shape != (world.config.style_dim,):
        raise PreconditionError(
            f"style has shape {style.value.shape}, expected ({world.config.style_dim},)"
        )
    alphas = [intensity_node(world, tape, style, j) for j in range(world.config.n_features)]
    return render_from_intensities(world, tape, alphas)


def embed_image_node(world: World, tape: ad.Tape, image: ad.Node) -> ad.Node:
    c = world.config
    if image.value.shape != (c.height, c.width):
        raise PreconditionError(
            f"image has extent {image.value.shape}, expected {(c.height, c.width)}"
        )
    flat = ad.reshape(image, (c.height * c.width,))
    proj = ad.matmul(tape.constant(world._template_rows), flat)
    vec = ad.matmul(tape.constant(world.image_map), proj)
    norm = ad.sqrt(ad.dot(vec, vec))
    return ad.div(vec, norm)


def render(world: World, style: np.ndarray) -> np.ndarray:
    tape = ad.Tape()
    return render_node(world, tape, tape.leaf(style)).value


def embed_image(world: World, image: np.ndarray) -> np.ndarray:
    tape = ad.Tape()
    return embed_image_node(world, tape, tape.constant(image)).value


def embed_text(world: World, prompt: str) -> np.ndarray:
    return world.prompts.lookup(prompt).copy()


def oracle_intensity(world: World, style: np.ndarray, attr: str) -> float:
    """Ground-truth feature intensity exactly as the renderer consumes it."""
    j = world.attribute_index(attr)
    lo, hi = world.channel_pairs[j]
    pre = float(world.mixing[j] @ np.asarray(style)[[lo, hi]] + world.bias[j])
    return float(np.tanh(pre))


def oracle_intensities(world: World, style: np.ndarray) -> np.ndarray:
    return np.array([oracle_intensity(world, style, a) for a in world.config.attributes])


def keypoint_oracle(world: World, style: np.ndarray, features: Tuple[int, int] = (0, 1)) -> np.ndarray:
    """Brightness-weighted centers of the designated features, in [0,1]^2.

    Interleaved as (y0, x0, y1, x1), normalized by the image extent.
    """
    c = world.config
    img = render(world, style)
    ys = np.arange(c.height)[:, None] / (c.height - 1)
    xs = np.arange(c.width)[None, :] / (c.width - 1)
    out = []
    for j in features:
        wgt = img * world.masks[j]
        tot = wgt.sum()
        out.extend([float((wgt * ys).sum() / tot), float((wgt * xs).sum() / tot)])
    return np.array(out)


# --- datasets ----------------------------------------------------------------


@dataclass
class LabeledDataset:
    styles: np.ndarray  # (n, c_S)
    images: np.ndarray  # (n, H, W)
    labels: np.ndarray  # (n,) binary or (n, 4) keypoint coordinates
    kind: str  # "classifier" | "keypoint"
    label_attribute: Optional[str] = None
    confound_attribute: Optional[str] = None
    cells: Dict[Tuple[int, int], int] = field(default_factory=dict)

    def __len__(self):
        return len(self.labels)


def _reflect_pair(world: World, style: np.ndarray, feature: int, positive: bool) -> np.ndarray:
    """Flip the sign of feature's pre-tanh response if it mismatches the target."""
    lo, hi = world.channel_pairs[feature]
    u = world.mixing[feature]
    r = float(u @ style[[lo, hi]] + world.bias[feature])
    want_pos = bool(positive)
    if (r > 0) == want_pos:
        return style
    out = style.copy()
    out[[lo, hi]] = style[[lo, hi]] - 2.0 * r * u
    return out


def make_dataset(
    world: World,
    label_attr: str,
    confound_attr: str,
    cell_counts: Dict[Tuple[int, int], int],
    seed_index: int = 0,
) -> LabeledDataset:
    """Classifier dataset with exact (label, confound) cell counts.

    Styles come from the prior, then each owned channel pair is reflected
    across its oracle hyperplane to land in the requested cell. A 100x
    rejection budget guards the degenerate cases (e.g. label attribute equals
    confound attribute, which makes mixed cells infeasible).
    """
    jl = world.attribute_index(label_attr)
    jc = world.attribute_index(confound_attr)
    for cell, count in cell_counts.items():
        if count < 0:
            raise PreconditionError(f"negative count for cell {cell}")

    styles, labels = [], []
    counter = 0
    for cell in sorted(cell_counts):
        want_l, want_c = (bool(cell[0]), bool(cell[1]))
        need = int(cell_counts[cell])
        budget = 100 * max(need, 1)
        got = 0
        while got < need:
            if budget <= 0:
                raise GenerationBudgetError(
                    f"could not realize cell {cell} for ({label_attr!r}, {confound_attr!r}) "
                    f"within the rejection budget"
                )
            s = sample_style(world, counter, stream=STREAM_DATASET)
            counter += 1
            budget -= 1
            s = _reflect_pair(world, s, jl, want_l)
            s = _reflect_pair(world, s, jc, want_c)
            if (oracle_intensity(world, s, label_attr) > 0) != want_l:
                continue
            if (oracle_intensity(world, s, confound_attr) > 0) != want_c:
                continue
            styles.append(s)
            labels.append(1.0 if want_l else 0.0)
            got += 1

    n = len(styles)
    c = world.config
    images = np.zeros((n, c.height, c.width))
    for i, s in enumerate(styles):
        images[i] = render(world, s)
    return LabeledDataset(
        styles=np.array(styles).reshape(n, c.style_dim),
        images=images,
        labels=np.array(labels),
        kind="classifier",
        label_attribute=label_attr,
        confound_attribute=confound_attr,
        cells=dict(cell_counts),
    )


def balanced_cells(n_per_cell: int) -> Dict[Tuple[int, int], int]:
    return {(1, 1): n_per_cell, (0, 0): n_per_cell, (1, 0): n_per_cell, (0, 1): n_per_cell}


def confounded_cells(n_major: int, n_minor: int) -> Dict[Tuple[int, int], int]:
    """The imbalanced design: big agreeing cells, tiny disagreeing cells."""
    return {(1, 1): n_major, (0, 0): n_major, (1, 0): n_minor, (0, 1): n_minor}


def make_keypoint_dataset(
    world: World, n: int, features: Tuple[int, int] = (0, 1), seed_index: int = 0
) -> LabeledDataset:
    c = world.config
    styles = np.zeros((n, c.style_dim))
    images = np.zeros((n, c.height, c.width))
    labels = np.zeros((n, 2 * len(features)))
    for i in range(n):
        s = sample_style(world, seed_index * 1_000_000 + i, stream=STREAM_DATASET)
        styles[i] = s
        images[i] = render(world, s)
        labels[i] = keypoint_oracle(world, s, features)
    return LabeledDataset(styles=styles, images=images, labels=labels, kind="keypoint")


# --- target models -------------------------------------------------------------


@dataclass
class TargetModel:
    """Two-layer perceptron over the flattened image.

    Classifier: scalar probability through a sigmoid head. Keypoint: four
    sigmoid-squashed coordinates (two points, normalized to [0,1]).
    """

    kind: str
    w1: np.ndarray  # (d, h)
    b1: np.ndarray  # (h,)
    w2: np.ndarray  # (h, o)
    b2: np.ndarray  # (o,)
    attribute: Optional[str] = None  # attribute a classifier was trained on
    keypoint_features: Optional[Tuple[int, int]] = None
    train_metric: float = float("nan")
    heldout_metric: float = float("nan")

    @property
    def out_dim(self) -> int:
        return self.w2.shape[1]

    def logits(self, flat: np.ndarray) -> np.ndarray:
        """Pre-sigmoid outputs for a flattened batch of shape (n, d)."""
        hidden = np.tanh(flat @ self.w1 + self.b1)
        return hidden @ self.w2 + self.b2

    def predict(self, image: np.ndarray) -> np.ndarray:
        """Sigmoid outputs for one image: scalar probability or 4 coordinates."""
        out = expit(self.logits(image.reshape(1, -1)))[0]
        return out[0] if self.kind == "classifier" else out

    def predict_batch(self, images: np.ndarray) -> np.ndarray:
        out = expit(self.logits(images.reshape(images.shape[0], -1)))
        return out[:, 0] if self.kind == "classifier" else out

    def logit_node(self, tape: ad.Tape, image: ad.Node) -> ad.Node:
        """Pre-sigmoid output for a single image on the tape."""
        flat = ad.reshape(image, (image.value.size,))
        hidden = ad.tanh(ad.matmul(tape.constant(self.w1.T), flat) + tape.constant(self.b1))
        out = ad.matmul(tape.constant(self.w2.T), hidden) + tape.constant(self.b2)
        return ad.take(out, [0]) if self.kind == "classifier" else out

    def output_node(self, tape: ad.Tape, image: ad.Node) -> ad.Node:
        node = ad.sigmoid(self.logit_node(tape, image))
        return ad.reshape(node, ()) if self.kind == "classifier" else node

    def copy(self) -> "TargetModel":
        return TargetModel(
            kind=self.kind,
            w1=self.w1.copy(),
            b1=self.b1.copy(),
            w2=self.w2.copy(),
            b2=self.b2.copy(),
            attribute=self.attribute,
            keypoint_features=self.keypoint_features,
            train_metric=self.train_metric,
            heldout_metric=self.heldout_metric,
        )


@dataclass(frozen=True)
class TrainConfig:
    hidden_dim: int = 16
    learning_rate: float = 0.001  # Adam step size
    batch_size: int = 128
    max_epochs: int = 400
    plateau_tol: float = 1e-4
    plateau_epochs: int = 10
    heldout_fraction: float = 0.2
    seed: int = 0

    def __post_init__(self):
        if self.hidden_dim < 1 or self.batch_size < 1 or self.max_epochs < 1:
            raise PreconditionError("hidden_dim, batch_size, max_epochs must be >= 1")
        if not 0.0 <= self.heldout_fraction < 1.0:
            raise PreconditionError("heldout_fraction must be in [0, 1)")


class AdamState:
    """Standard Adam with bias correction, one slot per parameter array."""

    def __init__(self, params, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, params, grads):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for i, (p, g) in enumerate(zip(params, grads)):
            self.m[i] = b1 * self.m[i] + (1 - b1) * g
            self.v[i] = b2 * self.v[i] + (1 - b2) * g * g
            mhat = self.m[i] / (1 - b1**self.t)
            vhat = self.v[i] / (1 - b2**self.t)
            p -= self.lr * mhat / (np.sqrt(vhat) + self.eps)


def _batch_loss_node(tape, kind, params, xb, yb):
    w1, b1, w2, b2 = params
    x = tape.constant(xb)
    hidden = ad.tanh(ad.matmul(x, w1) + b1)
    z = ad.matmul(hidden, w2) + b2
    if kind == "classifier":
        zi = ad.reshape(z, (xb.shape[0],))
        # softplus(z) - y*z is the stable cross-entropy against soft targets
        return ad.mean_all(ad.softplus(zi) - ad.mul(tape.constant(yb), zi))
    pred = ad.sigmoid(z)
    diff = pred - tape.constant(yb)
    return ad.mean_all(ad.mul(diff, diff))


def train_target(
    dataset: LabeledDataset,
    kind: Optional[str] = None,
    hyper: TrainConfig = TrainConfig(),
) -> TargetModel:
    """Adam-train a target model to the plateau criterion; seeded, deterministic."""
    if len(dataset) == 0:
        raise PreconditionError("cannot train on an empty dataset")
    kind = kind or dataset.kind
    if kind not in ("classifier", "keypoint"):
        raise PreconditionError(f"unknown model kind {kind!r}")
    if kind == "classifier" and dataset.labels.ndim != 1:
        raise PreconditionError("classifier training needs binary labels")
    if kind == "keypoint" and (dataset.labels.ndim != 2 or dataset.labels.shape[1] != 4):
        raise PreconditionError("keypoint training needs (n, 4) coordinate labels")

    rng = np.random.default_rng(hyper.seed)
    n = len(dataset)
    order = rng.permutation(n)
    n_hold = int(round(hyper.heldout_fraction * n))
    hold_idx, train_idx = order[:n_hold], order[n_hold:]
    if len(train_idx) == 0:
        raise PreconditionError("heldout split leaves no training data")

    x_all = dataset.images.reshape(n, -1)
    d = x_all.shape[1]
    h = hyper.hidden_dim
    o = 1 if kind == "classifier" else 4

    w1 = rng.normal(0.0, 1.0 / np.sqrt(d), size=(d, h))
    b1 = np.zeros(h)
    w2 = rng.normal(0.0, 1.0 / np.sqrt(h), size=(h, o))
    b2 = np.zeros(o)
    values = [w1, b1, w2, b2]
    adam = AdamState(values, hyper.learning_rate)

    xtr, ytr = x_all[train_idx], dataset.labels[train_idx]
    history: list[float] = []
    step = 0
    for _ in range(hyper.max_epochs):
        perm = rng.permutation(len(train_idx))
        epoch_losses = []
        for start in range(0, len(perm), hyper.batch_size):
            idx = perm[start : start + hyper.batch_size]
            tape = ad.Tape()
            leaves = [tape.leaf(v) for v in values]
            loss = _batch_loss_node(tape, kind, leaves, xtr[idx], ytr[idx])
            step += 1
            if not np.isfinite(loss.value):
                raise TrainingDivergedError(step)
            grads = ad.backward(loss, leaves)
            adam.step(values, [grads[lv] for lv in leaves])
            epoch_losses.append(float(loss.value))
        history.append(float(np.mean(epoch_losses)))
        if len(history) >= hyper.plateau_epochs:
            window = history[-hyper.plateau_epochs :]
            if max(window) - min(window) < hyper.plateau_tol:
                break

    model = TargetModel(
        kind=kind,
        w1=values[0],
        b1=values[1],
        w2=values[2],
        b2=values[3],
        attribute=dataset.label_attribute,
        keypoint_features=(0, 1) if kind == "keypoint" else None,
    )
    model.train_metric = _evaluate(model, x_all[train_idx], dataset.labels[train_idx])
    if n_hold:
        model.heldout_metric = _evaluate(model, x_all[hold_idx], dataset.labels[hold_idx])
    return model


def _evaluate(model: TargetModel, x: np.ndarray, y: np.ndarray) -> float:
    """Accuracy for classifiers; mean keypoint L2 error for detectors."""
    out = expit(model.logits(x))
    if model.kind == "classifier":
        return float(np.mean((out[:, 0] > 0.5) == (y > 0.5)))
    pts = out.reshape(-1, 2, 2)
    ref = y.reshape(-1, 2, 2)
    return float(np.mean(np.linalg.norm(pts - ref, axis=2)))


def evaluate_accuracy(model: TargetModel, dataset: LabeledDataset) -> float:
    return _evaluate(model, dataset.images.reshape(len(dataset), -1), dataset.labels)
