"""Finite-difference audit of every op kind and the end-to-end training loss.

Each op gets randomized scalar-valued probes checked against central
differences; the end-to-end probe differentiates the full rehearsal loss on a
small fixed batch with respect to every trainable tensor. ``corrupt_kind``
deliberately breaks one op's forward/backward consistency so the audit's
fail path can be exercised.
"""

from __future__ import annotations

import zlib
from contextlib import contextmanager

import numpy as np

from . import tensor as T
from .backbone import extract_features, init_backbone
from .errors import UnsupportedOp
from .prototypes import init_gamma_net
from .tensor import GradCheckReport, Tensor, gradient_check, op_forward
from .training import FakeSplit, build_updated_classifier, dual_loss

DEFAULT_TRIALS = 5


@contextmanager
def corrupted_op(kind: str, relative_error: float = 1e-3):
    """Scale an op's forward output after it is recorded, leaving its pullback
    stale; any gradient check through it must then fail."""
    if kind not in T._OPS:
        raise UnsupportedOp(f"unknown op kind {kind!r}")
    original = T._OPS[kind]

    def broken(*args, **kwargs):
        out = original(*args, **kwargs)
        out.data = out.data * (1.0 + relative_error)
        return out

    T._OPS[kind] = broken
    setattr(T, kind, broken)
    try:
        yield
    finally:
        T._OPS[kind] = original
        setattr(T, kind, original)


def _scalarize(out: Tensor, weights: np.ndarray) -> Tensor:
    return op_forward("dot", op_forward("reshape", out, shape=(out.size,)), Tensor(weights))


def _op_probes(rng):
    def away_from_zero(shape, margin=1e-3):
        x = rng.uniform(-2, 2, shape)
        return np.where(np.abs(x) < margin, x + np.sign(x + 0.5) * margin, x)

    def via(kind, *fixed_shapes, x_shape, margin=0.0, **kw):
        def build():
            draw = away_from_zero(x_shape, margin) if margin else rng.uniform(-2, 2, x_shape)
            x0 = Tensor(draw)
            others = [Tensor(rng.uniform(-2, 2, s)) for s in fixed_shapes]
            probe_out = op_forward(kind, x0, *others, **kw)
            fw = rng.uniform(-1, 1, probe_out.size)
            return (lambda t: _scalarize(op_forward(kind, t, *others, **kw), fw)), x0

        return build

    mask = (rng.random((4, 3)) < 0.5).astype(float)
    mask[0, 0] = 1.0
    labels = rng.integers(0, 3, 8)

    def ce_build():
        x0 = Tensor(rng.uniform(-2, 2, (8, 3)))
        return (lambda t: op_forward("softmax_cross_entropy", t, labels)), x0

    def masked_build():
        x0 = Tensor(rng.uniform(-2, 2, (4, 3, 2)))
        fw = rng.uniform(-1, 1, 2)
        return (lambda t: _scalarize(op_forward("masked_sum", t, mask), fw)), x0

    def concat_build():
        x0 = Tensor(rng.uniform(-2, 2, (2, 3)))
        other = Tensor(rng.uniform(-2, 2, (3, 3)))
        fw = rng.uniform(-1, 1, 15)
        return (lambda t: _scalarize(op_forward("concat", [t, other]), fw)), x0

    def stack_build():
        x0 = Tensor(rng.uniform(-2, 2, 4))
        others = [Tensor(rng.uniform(-2, 2, 4)) for _ in range(2)]
        fw = rng.uniform(-1, 1, 12)
        return (lambda t: _scalarize(op_forward("stack", [t, *others]), fw)), x0

    return {
        "add": via("add", (5,), x_shape=(5,)),
        "mul": via("mul", (5,), x_shape=(5,)),
        "scale": via("scale", x_shape=(4,), alpha=-1.7, beta=0.3),
        "div_scalar": via("div_scalar", x_shape=(4,), denom=3.0),
        "relu": via("relu", x_shape=(6,), margin=1e-3),
        "sigmoid": via("sigmoid", x_shape=(6,)),
        "linear": via("linear", (4, 3), (3,), x_shape=(4,)),
        "dot": via("dot", (5,), x_shape=(5,)),
        "matmul": via("matmul", (4, 2), x_shape=(3, 4)),
        "reshape": via("reshape", x_shape=(6,), shape=(2, 3)),
        "concat": concat_build,
        "stack": stack_build,
        "take_row": via("take_row", x_shape=(3, 4), index=1),
        "conv2d": via("conv2d", (3, 3, 2, 2), (2,), x_shape=(4, 4, 2)),
        "masked_sum": masked_build,
        "l2_normalize": via("l2_normalize", x_shape=(3, 4)),
        "softmax_cross_entropy": ce_build,
    }


def run_op_checks(trials: int = DEFAULT_TRIALS, tol: float = 1e-4) -> list[tuple[str, GradCheckReport]]:
    """Worst report per op kind over the given number of randomized probes."""
    results = []
    for kind in T.op_kinds():
        rng = np.random.default_rng(zlib.crc32(kind.encode()))
        probes = _op_probes(rng)
        worst = None
        for _ in range(trials):
            f, x0 = probes[kind]()
            report = gradient_check(f, x0, step=1e-5, tol=tol)
            if worst is None or report.max_rel_err > worst.max_rel_err:
                worst = report
        results.append((kind, worst))
    return results


def run_end_to_end_check(
    c: int = 8,
    h: int = 8,
    w: int = 8,
    batch: int = 4,
    layers: int = 2,
    n_classes: int = 5,
    tol: float = 1e-4,
    seed: int = 0,
) -> list[tuple[str, GradCheckReport]]:
    """Check d(dual loss)/d(theta) for every trainable tensor on a fixed batch."""
    rng = np.random.default_rng(seed)
    backbone = init_backbone(c, layers, (seed, 1))
    net = init_gamma_net(c, (seed, 2))
    weights0 = rng.uniform(-1, 1, (n_classes, c))
    images = [Tensor(rng.random((h, w, 3))) for _ in range(batch)]
    masks = [rng.integers(0, n_classes, (h, w)) for _ in range(batch)]
    masks[0][0, :2] = 255  # exercise the ignore path
    class_ids = tuple(range(n_classes))
    split = FakeSplit((1,), (2,))
    support = tuple(range(batch // 2))
    query = tuple(range(batch // 2, batch))

    slots = [("classifier.weights", None)]
    for i in range(layers):
        slots.append((f"backbone.{i}.kernel", None))
        slots.append((f"backbone.{i}.bias", None))
    slots.extend([("gamma.w1", None), ("gamma.b1", None), ("gamma.w2", None), ("gamma.b2", None)])

    def loss_with(name: str, probe: Tensor) -> Tensor:
        bb = init_backbone(c, layers, (seed, 1))
        for i, (k, b) in enumerate(backbone.layers):
            bb.layers[i][0].data = k.data.copy()
            bb.layers[i][1].data = b.data.copy()
        gn = init_gamma_net(c, (seed, 2))
        for (gname, dst), (_, src) in zip(gn.tensors(), net.tensors()):
            dst.data = src.data.copy()
        wt = Tensor(weights0.copy())
        for i in range(layers):
            if name == f"backbone.{i}.kernel":
                bb.layers[i] = (probe, bb.layers[i][1])
            if name == f"backbone.{i}.bias":
                bb.layers[i] = (bb.layers[i][0], probe)
        if name == "classifier.weights":
            wt = probe
        replaced = {gname: t for gname, t in gn.tensors()}
        if name in replaced:
            gn.w1 = probe if name == "gamma.w1" else gn.w1
            gn.b1 = probe if name == "gamma.b1" else gn.b1
            gn.w2 = probe if name == "gamma.w2" else gn.w2
            gn.b2 = probe if name == "gamma.b2" else gn.b2
        feats = [extract_features(bb, img) for img in images]
        updated, _ = build_updated_classifier(
            wt, class_ids, gn,
            [feats[i] for i in support], [masks[i] for i in support], split,
        )
        loss, _ = dual_loss(wt, updated, feats, masks, query, class_ids, alpha=10.0)
        return loss

    initial = {
        "classifier.weights": weights0,
        **{f"backbone.{i}.kernel": backbone.layers[i][0].data for i in range(layers)},
        **{f"backbone.{i}.bias": backbone.layers[i][1].data for i in range(layers)},
        "gamma.w1": net.w1.data,
        "gamma.b1": net.b1.data,
        "gamma.w2": net.w2.data,
        "gamma.b2": net.b2.data,
    }
    results = []
    for name, _ in slots:
        report = gradient_check(
            lambda t, n=name: loss_with(n, t), Tensor(initial[name].copy()), tol=tol
        )
        results.append((name, report))
    return results
