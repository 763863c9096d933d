"""Binary checkpoint format with a trailing CRC32.

Layout (all integers little-endian):

    magic "CAPL" | u8 version | u8 endian flag (1 = little) | u16 reserved
    u32 embed_dim | f64 alpha
    u32 n_classes, then per class: u32 id | u8 role (0 base, 1 novel)
                                   | u16 name_len | name utf-8
    u32 meta_len | meta JSON utf-8
    u32 n_tensors, then per tensor: u16 name_len | name utf-8 | u8 dtype
                                    (0 = f64, 1 = f32) | u8 ndim | u32 dims...
                                    | raw little-endian payload
    u32 crc32 of every preceding byte

Tensors are stored as 64-bit reals by default; ``store_f32`` halves the file
at the cost of rounding every value to 32-bit precision on save.
"""

from __future__ import annotations

import io
import json
import os
import re
import struct
import zlib

import numpy as np

from .backbone import BackboneParams
from .errors import FormatError, IoError
from .model import EvalModel
from .prototypes import GammaNet, ROLE_BASE, ROLE_NOVEL, make_classifier
from .tensor import Tensor

MAGIC = b"CAPL"
VERSION = 1
_ROLE_CODE = {ROLE_BASE: 0, ROLE_NOVEL: 1}
_CODE_ROLE = {v: k for k, v in _ROLE_CODE.items()}


def _named_tensors(model: EvalModel) -> list[tuple[str, np.ndarray]]:
    named = [(name, t.data) for name, t in model.backbone.tensors()]
    named.append(("classifier.weights", model.classifier.weights))
    if model.gammanet is not None:
        named.extend((name, t.data) for name, t in model.gammanet.tensors())
    return named


def save_checkpoint(
    path: str,
    model: EvalModel,
    store_f32: bool = False,
    extra_tensors: list[tuple[str, np.ndarray]] | None = None,
) -> None:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<BBH", VERSION, 1, 0))
    buf.write(struct.pack("<I", model.classifier.embed_dim))
    buf.write(struct.pack("<d", model.classifier.alpha))

    clf = model.classifier
    buf.write(struct.pack("<I", clf.num_classes))
    for cid in clf.class_ids:
        name = model.name_of(cid).encode()
        buf.write(struct.pack("<IBH", cid, _ROLE_CODE[clf.roles[cid]], len(name)))
        buf.write(name)

    meta = {
        "variant": model.variant_kind,
        "converged_gamma": model.converged_gamma,
        "amp_gamma": model.amp_gamma,
        **model.meta,
    }
    meta_bytes = json.dumps(meta, sort_keys=True).encode()
    buf.write(struct.pack("<I", len(meta_bytes)))
    buf.write(meta_bytes)

    named = _named_tensors(model) + list(extra_tensors or [])
    names = [n for n, _ in named]
    if len(set(names)) != len(names):
        raise FormatError("duplicate tensor names")
    buf.write(struct.pack("<I", len(named)))
    for name, arr in named:
        nb = name.encode()
        dtype_code = 1 if store_f32 else 0
        payload = arr.astype("<f4" if store_f32 else "<f8").tobytes()
        buf.write(struct.pack("<H", len(nb)))
        buf.write(nb)
        buf.write(struct.pack("<BB", dtype_code, arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(payload)

    body = buf.getvalue()
    blob = body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)
    tmp = f"{path}.tmp.{os.getpid()}"
    try:
        with open(tmp, "wb") as fh:
            fh.write(blob)
        os.replace(tmp, path)
    except OSError as exc:
        raise IoError(f"cannot write checkpoint {path}: {exc}") from exc


class _Reader:
    def __init__(self, data: bytes, path: str):
        self.data = data
        self.pos = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise FormatError(f"{self.path}: truncated checkpoint")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def _read_all(path: str) -> dict:
    try:
        blob = open(path, "rb").read()
    except OSError as exc:
        raise IoError(f"cannot read checkpoint {path}: {exc}") from exc
    if len(blob) < len(MAGIC) + 4:
        raise FormatError(f"{path}: file too small to be a checkpoint")
    body, crc_stored = blob[:-4], struct.unpack("<I", blob[-4:])[0]
    if zlib.crc32(body) & 0xFFFFFFFF != crc_stored:
        raise FormatError(f"{path}: CRC mismatch, file is corrupt")

    r = _Reader(body, path)
    if r.take(4) != MAGIC:
        raise FormatError(f"{path}: bad magic")
    version, endian, _ = r.unpack("<BBH")
    if version != VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    if endian != 1:
        raise FormatError(f"{path}: unsupported byte order flag {endian}")
    (embed_dim,) = r.unpack("<I")
    (alpha,) = r.unpack("<d")

    (n_classes,) = r.unpack("<I")
    class_ids, roles, names = [], {}, {}
    for _ in range(n_classes):
        cid, role_code, name_len = r.unpack("<IBH")
        if role_code not in _CODE_ROLE:
            raise FormatError(f"{path}: unknown role code {role_code}")
        class_ids.append(cid)
        roles[cid] = _CODE_ROLE[role_code]
        names[cid] = r.take(name_len).decode()

    (meta_len,) = r.unpack("<I")
    try:
        meta = json.loads(r.take(meta_len).decode())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: bad meta block: {exc}") from exc

    (n_tensors,) = r.unpack("<I")
    tensors: dict[str, np.ndarray] = {}
    for _ in range(n_tensors):
        (name_len,) = r.unpack("<H")
        name = r.take(name_len).decode()
        dtype_code, ndim = r.unpack("<BB")
        if dtype_code not in (0, 1):
            raise FormatError(f"{path}: unknown dtype code {dtype_code}")
        dims = r.unpack(f"<{ndim}I") if ndim else ()
        count = int(np.prod(dims)) if dims else 1
        itemsize = 8 if dtype_code == 0 else 4
        raw = r.take(count * itemsize)
        arr = np.frombuffer(raw, dtype="<f8" if dtype_code == 0 else "<f4")
        if name in tensors:
            raise FormatError(f"{path}: duplicate tensor {name}")
        tensors[name] = arr.astype(np.float64).reshape(dims)

    return {
        "path": path,
        "embed_dim": embed_dim,
        "alpha": alpha,
        "class_ids": class_ids,
        "roles": roles,
        "names": names,
        "meta": meta,
        "tensors": tensors,
    }


def load_checkpoint(path: str) -> EvalModel:
    doc = _read_all(path)
    tensors = doc["tensors"]
    embed_dim, alpha = doc["embed_dim"], doc["alpha"]
    class_ids, roles, names, meta = doc["class_ids"], doc["roles"], doc["names"], doc["meta"]
    n_classes = len(class_ids)

    layer_ids = sorted(
        {
            int(m.group(1))
            for t in tensors
            if (m := re.fullmatch(r"backbone\.(\d+)\.kernel", t))
        }
    )
    if not layer_ids or layer_ids != list(range(len(layer_ids))):
        raise FormatError(f"{path}: incomplete backbone tensor set")
    layers = []
    for i in layer_ids:
        try:
            layers.append(
                (Tensor(tensors[f"backbone.{i}.kernel"]), Tensor(tensors[f"backbone.{i}.bias"]))
            )
        except KeyError as exc:
            raise FormatError(f"{path}: missing tensor {exc}") from exc
    backbone = BackboneParams(layers=layers, embed_dim=embed_dim)

    if "classifier.weights" not in tensors:
        raise FormatError(f"{path}: missing classifier weights")
    weights = tensors["classifier.weights"]
    if weights.shape[0] != n_classes:
        raise FormatError(f"{path}: classifier rows disagree with class table")
    classifier = make_classifier(class_ids, weights, roles, alpha)

    gammanet = None
    if "gamma.w1" in tensors:
        try:
            gammanet = GammaNet(
                w1=Tensor(tensors["gamma.w1"]),
                b1=Tensor(tensors["gamma.b1"]),
                w2=Tensor(tensors["gamma.w2"]),
                b2=Tensor(tensors["gamma.b2"]),
            )
        except KeyError as exc:
            raise FormatError(f"{path}: missing tensor {exc}") from exc

    known = {"variant", "converged_gamma", "amp_gamma"}
    return EvalModel(
        backbone=backbone,
        classifier=classifier,
        gammanet=gammanet,
        variant_kind=meta.get("variant", "baseline"),
        converged_gamma=meta.get("converged_gamma"),
        amp_gamma=meta.get("amp_gamma", 0.5),
        class_names=names,
        meta={k: v for k, v in meta.items() if k not in known},
    )


# ---------------------------------------------------------------------------
# resumable training snapshots
# ---------------------------------------------------------------------------


def save_train_state(path: str, state, class_names=None, store_f32: bool = False) -> None:
    """Persist a training run so it can continue bitwise-identically: model
    tensors plus momentum buffers ("opt.*") and generator states in the meta."""
    from dataclasses import asdict

    from .model import from_train_state

    model = from_train_state(state, class_names)
    model.meta["train_state"] = {
        "step": state.step,
        "config": asdict(state.config),
        "rng_batches": state.rng_batches.bit_generator.state,
        "rng_steps": state.rng_steps.bit_generator.state,
        "gamma_steps": state.gamma_steps,
    }
    extra = [(f"opt.{name}", vel) for name, vel in sorted(state.velocities.items())]
    save_checkpoint(path, model, store_f32=store_f32, extra_tensors=extra)


def load_train_state(path: str):
    """Rebuild a TrainState from a snapshot written by save_train_state."""
    from .backbone import BackboneParams as _BB
    from .training import TrainConfig, TrainState, make_variant

    doc = _read_all(path)
    meta = doc["meta"]
    saved = meta.get("train_state")
    if saved is None:
        raise FormatError(f"{path}: checkpoint carries no training state to resume")
    config = TrainConfig(**saved["config"])
    variant = make_variant(meta.get("variant", "baseline"))
    tensors = doc["tensors"]

    layer_ids = sorted(
        {
            int(m.group(1))
            for t in tensors
            if (m := re.fullmatch(r"backbone\.(\d+)\.kernel", t))
        }
    )
    layers = [
        (
            Tensor(tensors[f"backbone.{i}.kernel"], requires_grad=True),
            Tensor(tensors[f"backbone.{i}.bias"], requires_grad=True),
        )
        for i in layer_ids
    ]
    backbone = _BB(layers=layers, embed_dim=doc["embed_dim"])
    weights = Tensor(tensors["classifier.weights"], requires_grad=True)
    gammanet = None
    if "gamma.w1" in tensors:
        gammanet = GammaNet(
            w1=Tensor(tensors["gamma.w1"], requires_grad=True),
            b1=Tensor(tensors["gamma.b1"], requires_grad=True),
            w2=Tensor(tensors["gamma.w2"], requires_grad=True),
            b2=Tensor(tensors["gamma.b2"], requires_grad=True),
        )

    rng_batches = np.random.default_rng(0)
    rng_batches.bit_generator.state = saved["rng_batches"]
    rng_steps = np.random.default_rng(0)
    rng_steps.bit_generator.state = saved["rng_steps"]

    state = TrainState(
        config=config,
        variant=variant,
        backbone=backbone,
        class_ids=tuple(doc["class_ids"]),
        weights=weights,
        roles=dict(doc["roles"]),
        gammanet=gammanet,
        rng_batches=rng_batches,
        rng_steps=rng_steps,
        step=int(saved["step"]),
        velocities={
            name[len("opt.") :]: arr for name, arr in tensors.items() if name.startswith("opt.")
        },
        gamma_steps=[float(g) for g in saved["gamma_steps"]],
    )
    return state
