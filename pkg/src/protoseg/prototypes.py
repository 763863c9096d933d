"""Prototype math: pooling, the cosine classifier, context fusion, registration.

A classifier is an ordered list of class prototypes scored by alpha-scaled
cosine similarity. Novel classes are installed by mask-average pooling over
their support shots; base classes present in those supports can additionally
be enriched by fusing their trained row with a pooled feature prototype,
weighted by a small learned gate network.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .backbone import BackboneParams, extract_features
from .errors import ConfigError, EmptyMaskError, RangeError, ShapeError
from .tensor import IGNORE_LABEL, Tensor

ROLE_BASE = "base"
ROLE_NOVEL = "novel"
BACKGROUND = 0
DEFAULT_ALPHA = 10.0
MIN_PIXELS_DEFAULT = 1


@dataclass(frozen=True)
class Classifier:
    """Ordered (class id, prototype row) table plus roles and the cosine scale.

    Rows are kept sorted by ascending class id so argmax tie-breaking lands on
    the lowest class id. Instances are immutable; registration returns a new one.
    """

    class_ids: tuple[int, ...]
    weights: np.ndarray  # (n, c) float64, row i belongs to class_ids[i]
    roles: dict[int, str]
    alpha: float = DEFAULT_ALPHA

    def __post_init__(self):
        ids = self.class_ids
        if len(set(ids)) != len(ids):
            raise ConfigError("duplicate class ids in classifier")
        if tuple(sorted(ids)) != ids:
            raise ConfigError("classifier rows must be sorted by class id")
        if BACKGROUND not in ids or self.roles.get(BACKGROUND) != ROLE_BASE:
            raise ConfigError("background class 0 must be present with role base")
        if self.alpha <= 0:
            raise ConfigError("alpha must be positive")
        if self.weights.shape[0] != len(ids):
            raise ShapeError("one weight row per class id required")

    @property
    def embed_dim(self) -> int:
        return self.weights.shape[1]

    @property
    def num_classes(self) -> int:
        return len(self.class_ids)

    def index_of(self, class_id: int) -> int:
        return self.class_ids.index(class_id)

    def row(self, class_id: int) -> np.ndarray:
        return self.weights[self.index_of(class_id)]

    def ids_with_role(self, role: str) -> tuple[int, ...]:
        return tuple(i for i in self.class_ids if self.roles[i] == role)


def make_classifier(class_ids, weights, roles, alpha=DEFAULT_ALPHA) -> Classifier:
    order = np.argsort(class_ids, kind="stable")
    ids = tuple(int(class_ids[i]) for i in order)
    w = np.ascontiguousarray(np.asarray(weights, dtype=np.float64)[order])
    return Classifier(ids, w, dict(roles), float(alpha))


@dataclass
class SupportSample:
    image: Tensor  # (h, w, 3)
    mask: np.ndarray  # (h, w) int labels with IGNORE_LABEL holes
    novel_class: int  # the class this sample was selected for


@dataclass
class SupportSet:
    """K support samples per novel class, flattened; grouped via novel_class."""

    samples: list[SupportSample] = field(default_factory=list)

    def novel_ids(self) -> tuple[int, ...]:
        return tuple(sorted({s.novel_class for s in self.samples}))

    def shots_for(self, novel_id: int) -> list[SupportSample]:
        return [s for s in self.samples if s.novel_class == novel_id]


@dataclass
class GammaNet:
    """Two-layer MLP gate: concat(p_cls, p_feat) -> hidden c (ReLU) -> sigmoid scalar."""

    w1: Tensor  # (2c, c)
    b1: Tensor  # (c,)
    w2: Tensor  # (c, 1)
    b2: Tensor  # (1,)

    @property
    def embed_dim(self) -> int:
        return self.w1.shape[1]

    def tensors(self) -> list[tuple[str, Tensor]]:
        return [
            ("gamma.w1", self.w1),
            ("gamma.b1", self.b1),
            ("gamma.w2", self.w2),
            ("gamma.b2", self.b2),
        ]


def init_gamma_net(c: int, seed: int, trainable: bool = True) -> GammaNet:
    if c < 2:
        raise ConfigError(f"embed_dim must be >= 2, got {c}")
    rng = np.random.default_rng(seed)
    s1 = np.sqrt(1.0 / (2 * c))
    s2 = np.sqrt(1.0 / c)
    return GammaNet(
        w1=Tensor(rng.uniform(-s1, s1, (2 * c, c)), requires_grad=trainable),
        b1=Tensor(np.zeros(c), requires_grad=trainable),
        w2=Tensor(rng.uniform(-s2, s2, (c, 1)), requires_grad=trainable),
        b2=Tensor(np.zeros(1), requires_grad=trainable),
    )


# ---------------------------------------------------------------------------
# pooling
# ---------------------------------------------------------------------------


def pool_prototype(features: Tensor, mask: np.ndarray) -> Tensor:
    """Mask-average pooling: mean feature vector over set mask pixels."""
    m = np.asarray(mask)
    count = int(np.count_nonzero(m))
    if count == 0:
        raise EmptyMaskError("mask selects no pixels")
    return T.div_scalar(T.masked_sum(features, m), count)


def form_novel_prototype(shots: list[tuple[Tensor, np.ndarray]]) -> Tensor:
    """Shot-level mean of per-shot masked means; empty-mask shots are skipped.

    Distinct from context accumulation: every contributing shot carries equal
    weight regardless of its pixel count.
    """
    pooled = [
        pool_prototype(features, mask)
        for features, mask in shots
        if np.count_nonzero(np.asarray(mask)) > 0
    ]
    if not pooled:
        raise EmptyMaskError("every shot has an empty mask")
    acc = pooled[0]
    for p in pooled[1:]:
        acc = T.add(acc, p)
    return T.div_scalar(acc, len(pooled))


def accumulate_context_prototype(
    supports: SupportSet, features: list[Tensor], base_class: int
) -> tuple[Tensor, int]:
    """Pixel-count-weighted mean of a base class over every support sample.

    Sums masked features and pixel counts across all shots of all novel
    classes before dividing; a class that never appears yields the zero
    vector with count 0.
    """
    if len(features) != len(supports.samples):
        raise ShapeError("features must align 1:1 with support samples")
    c = features[0].shape[-1] if features else 0
    total = None
    count = 0
    for sample, feat in zip(supports.samples, features):
        m = sample.mask == base_class
        n = int(np.count_nonzero(m))
        if n == 0:
            continue
        part = T.masked_sum(feat, m)
        total = part if total is None else T.add(total, part)
        count += n
    if count == 0:
        return Tensor(np.zeros(c)), 0
    return T.div_scalar(total, count), count


# ---------------------------------------------------------------------------
# gating and fusion
# ---------------------------------------------------------------------------


def gamma_forward(net: GammaNet, p_cls: Tensor, p_feat: Tensor) -> Tensor:
    """Adaptive fusion weight in (0, 1), conditioned on both prototypes."""
    c = net.embed_dim
    if p_cls.shape != (c,) or p_feat.shape != (c,):
        raise ShapeError(f"expected two ({c},) vectors, got {p_cls.shape} and {p_feat.shape}")
    h = T.relu(T.linear(T.concat([p_cls, p_feat]), net.w1, net.b1))
    out = T.sigmoid(T.linear(h, net.w2, net.b2))
    return T.reshape(out, ())


def fuse_prototype(p_cls: Tensor, p_feat: Tensor, gamma) -> Tensor:
    """Convex combination gamma * p_cls + (1 - gamma) * p_feat.

    ``gamma`` is a float or a scalar tensor (the latter keeps gradients
    flowing through the gate during training).
    """
    if isinstance(gamma, Tensor):
        g = float(gamma.data.reshape(()))
        if not 0.0 <= g <= 1.0:
            raise RangeError(f"gamma {g} outside [0, 1]")
        return T.add(T.mul(p_cls, gamma), T.mul(p_feat, T.scale(gamma, -1.0, 1.0)))
    if not 0.0 <= gamma <= 1.0:
        raise RangeError(f"gamma {gamma} outside [0, 1]")
    return T.add(T.scale(p_cls, gamma), T.scale(p_feat, 1.0 - gamma))


# ---------------------------------------------------------------------------
# registration and classification
# ---------------------------------------------------------------------------


def register_novel_classes(
    classifier: Classifier,
    net: GammaNet | None,
    backbone: BackboneParams,
    supports: SupportSet,
    min_pixels: int = MIN_PIXELS_DEFAULT,
    *,
    enrich: bool = True,
    fixed_gamma: float | None = None,
) -> Classifier:
    """Build a new classifier with novel rows imprinted and base rows enriched.

    Each declared novel class gets the shot-averaged pooled prototype. Each
    base class covering at least ``min_pixels`` support pixels is replaced by
    the gated fusion of its trained row with the accumulated context
    prototype; every other base row is carried over bitwise. The input
    classifier is never mutated.

    ``enrich=False`` skips the base-enrichment branch entirely (imprint-only
    registration); ``fixed_gamma`` bypasses the gate network with a constant.
    """
    declared = supports.novel_ids()
    for nid in declared:
        if nid in classifier.class_ids:
            raise ConfigError(f"class {nid} is already registered")
    if len(declared) != len(set(declared)):
        raise ConfigError("duplicate novel class ids")
    if enrich and fixed_gamma is None and net is None:
        raise ConfigError("adaptive enrichment needs a gate network")
    if fixed_gamma is not None and not 0.0 <= fixed_gamma <= 1.0:
        raise RangeError(f"fixed gamma {fixed_gamma} outside [0, 1]")

    features = [extract_features(backbone, s.image) for s in supports.samples]

    novel_rows: dict[int, np.ndarray] = {}
    for nid in declared:
        shots = [
            (feat, sample.mask == nid)
            for sample, feat in zip(supports.samples, features)
            if sample.novel_class == nid
        ]
        if not any(np.count_nonzero(m) for _, m in shots):
            raise EmptyMaskError(f"novel class {nid} has no pixels in any shot")
        novel_rows[nid] = form_novel_prototype(shots).data

    new_ids = list(classifier.class_ids)
    new_rows = [classifier.weights[i].copy() for i in range(classifier.num_classes)]
    if enrich:
        for idx, cid in enumerate(classifier.class_ids):
            if classifier.roles[cid] != ROLE_BASE:
                continue
            p_feat, count = accumulate_context_prototype(supports, features, cid)
            if count < max(min_pixels, 1):
                continue
            p_cls = Tensor(classifier.weights[idx])
            if fixed_gamma is not None:
                fused = fuse_prototype(p_cls, p_feat, fixed_gamma)
            else:
                gamma = gamma_forward(net, p_cls, p_feat)
                fused = fuse_prototype(p_cls, p_feat, gamma)
            new_rows[idx] = fused.data

    roles = dict(classifier.roles)
    for nid in declared:
        new_ids.append(nid)
        new_rows.append(novel_rows[nid])
        roles[nid] = ROLE_NOVEL
    return make_classifier(new_ids, np.stack(new_rows), roles, classifier.alpha)


def cosine_logits(classifier: Classifier, features: Tensor) -> np.ndarray:
    """alpha-scaled cosine similarity of every pixel against every prototype."""
    h, w, c = features.shape
    if c != classifier.embed_dim:
        raise ShapeError(f"feature channels {c} != classifier dim {classifier.embed_dim}")
    fn = T.l2_normalize(features).data.reshape(h * w, c)
    pn = T.l2_normalize(Tensor(classifier.weights)).data
    cos = np.clip(fn @ pn.T, -1.0, 1.0)
    return (classifier.alpha * cos).reshape(h, w, classifier.num_classes)


def classify(classifier: Classifier, features: Tensor) -> tuple[np.ndarray, np.ndarray]:
    """Predict per-pixel class ids; ties break toward the lowest class id.

    Returns (label mask, logits). Argmax of the scaled cosine scores equals
    argmax of the softmax in the output rule, so no softmax is materialized.
    """
    logits = cosine_logits(classifier, features)
    pred_idx = np.argmax(logits, axis=-1)
    ids = np.asarray(classifier.class_ids)
    return ids[pred_idx], logits
