"""The two systems under test, their training steps, and checkpointing.

The teacher-student network routes acoustic frames through a linear
transfer layer into a GRU intent classifier, and returns both the intent
logits and the mean-pooled transferred embedding (the student side of the
distillation loss). The baseline feeds acoustic frames to the same intent
architecture directly and trains on cross-entropy alone.

Checkpoint files are self-describing binary: a 4-byte magic, a little-
endian uint32 header length, a canonical-JSON header (format version,
model kind, dimensions, parameter names/shapes, optimizer hyperparameters,
free-form metadata), then one raw little-endian float64 blob per named
parameter in header order, followed by the optimizer's first and second
moment blobs per parameter when optimizer state is included.
"""

from __future__ import annotations

import json
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from . import tensor as tt
from .errors import (
    CheckpointParseError,
    CheckpointVersionError,
    ContractError,
    DimensionError,
)
from .layers import GRULayer, LinearLayer, gru_sequence, linear_forward
from .losses import LossConfig, batch_loss, cross_entropy, distillation_kl, total_loss
from .optim import AdamState, adam_step, init_adam, zero_grads
from .tensor import Tensor

CHECKPOINT_MAGIC = b"MTSN"
CHECKPOINT_VERSION = 1


def _check_dims(**dims: int) -> None:
    for key, value in dims.items():
        if value < 1:
            raise ContractError(f"{key} must be positive, got {value}")


class MtsnModel:
    """Transfer layer -> GRU -> max-pool -> linear classifier."""

    kind = "mtsn"

    def __init__(self, acoustic_dim: int, teacher_dim: int, hidden_size: int,
                 num_intents: int, loss_cfg: Optional[LossConfig] = None,
                 seed: int = 0, dtype=np.float64):
        _check_dims(acoustic_dim=acoustic_dim, teacher_dim=teacher_dim,
                    hidden_size=hidden_size)
        if num_intents < 2:
            raise ContractError(f"num_intents must be at least 2, got {num_intents}")
        self.acoustic_dim = acoustic_dim
        self.teacher_dim = teacher_dim
        self.hidden_size = hidden_size
        self.num_intents = num_intents
        self.loss_cfg = loss_cfg if loss_cfg is not None else LossConfig()
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng(seed)
        self.transfer = LinearLayer(acoustic_dim, teacher_dim, rng, self.dtype,
                                    name="transfer")
        self.intent_gru = GRULayer(teacher_dim, hidden_size, rng, self.dtype,
                                   name="intent_gru")
        self.classifier = LinearLayer(hidden_size, num_intents, rng, self.dtype,
                                      name="classifier")

    def parameters(self) -> "OrderedDict[str, Tensor]":
        out: "OrderedDict[str, Tensor]" = OrderedDict()
        out.update(self.transfer.params())
        out.update(self.intent_gru.params())
        out.update(self.classifier.params())
        return out

    def dims(self) -> Dict[str, object]:
        return {
            "acoustic_dim": self.acoustic_dim,
            "teacher_dim": self.teacher_dim,
            "hidden_size": self.hidden_size,
            "num_intents": self.num_intents,
            "dtype": self.dtype.name,
        }


class Baseline2Model:
    """GRU -> max-pool -> linear classifier on raw acoustic frames."""

    kind = "baseline2"

    def __init__(self, acoustic_dim: int, hidden_size: int, num_intents: int,
                 seed: int = 0, dtype=np.float64):
        _check_dims(acoustic_dim=acoustic_dim, hidden_size=hidden_size)
        if num_intents < 2:
            raise ContractError(f"num_intents must be at least 2, got {num_intents}")
        self.acoustic_dim = acoustic_dim
        self.hidden_size = hidden_size
        self.num_intents = num_intents
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng(seed)
        self.intent_gru = GRULayer(acoustic_dim, hidden_size, rng, self.dtype,
                                   name="intent_gru")
        self.classifier = LinearLayer(hidden_size, num_intents, rng, self.dtype,
                                      name="classifier")

    def parameters(self) -> "OrderedDict[str, Tensor]":
        out: "OrderedDict[str, Tensor]" = OrderedDict()
        out.update(self.intent_gru.params())
        out.update(self.classifier.params())
        return out

    def dims(self) -> Dict[str, object]:
        return {
            "acoustic_dim": self.acoustic_dim,
            "hidden_size": self.hidden_size,
            "num_intents": self.num_intents,
            "dtype": self.dtype.name,
        }


AnyModel = Union[MtsnModel, Baseline2Model]


def _as_input(model: AnyModel, e_acoust) -> Tensor:
    x = e_acoust if isinstance(e_acoust, Tensor) else Tensor(
        np.asarray(e_acoust, dtype=model.dtype))
    if x.data.ndim != 2:
        raise DimensionError(f"expected a (T, {model.acoustic_dim}) sequence, got {x.shape}")
    if x.shape[1] != model.acoustic_dim:
        raise DimensionError(
            f"frame width {x.shape[1]} does not match acoustic_dim {model.acoustic_dim}")
    return x


def mtsn_forward(model: MtsnModel, e_acoust) -> Tuple[Tensor, Tensor]:
    """Intent logits and the pooled transferred embedding for one utterance."""
    x = _as_input(model, e_acoust)
    e_te = linear_forward(model.transfer, x)
    pooled_te = tt.mean_over_time(e_te)
    hidden = gru_sequence(model.intent_gru, e_te)
    pooled = tt.max_over_time(hidden)
    logits = linear_forward(model.classifier, pooled)
    return logits, pooled_te


def baseline2_forward(model: Baseline2Model, e_acoust) -> Tensor:
    """Intent logits for one utterance."""
    x = _as_input(model, e_acoust)
    hidden = gru_sequence(model.intent_gru, x)
    pooled = tt.max_over_time(hidden)
    return linear_forward(model.classifier, pooled)


def forward_logits(model: AnyModel, e_acoust) -> Tensor:
    if isinstance(model, MtsnModel):
        return mtsn_forward(model, e_acoust)[0]
    return baseline2_forward(model, e_acoust)


def predict(model: AnyModel, e_acoust) -> int:
    """Argmax intent; ties resolve to the smallest class index."""
    return int(np.argmax(forward_logits(model, e_acoust).data))


def mtsn_train_step(model: MtsnModel, acoustics: Sequence[np.ndarray],
                    teachers: Sequence[np.ndarray], labels: Sequence[int],
                    adam: AdamState) -> Tuple[float, float, float]:
    """One forward/backward/update over a batch; returns mean losses.

    Returned values are (total, distillation, intent), each averaged over
    the batch. The distillation loss is evaluated even when alpha pins its
    gradient weight to zero, so the report stays comparable across alpha.
    """
    if len(acoustics) == 0:
        raise ContractError("mtsn_train_step: empty batch")
    if not len(acoustics) == len(teachers) == len(labels):
        raise ContractError("mtsn_train_step: batch component lengths disagree")
    cfg = model.loss_cfg
    params = model.parameters()
    zero_grads(params)
    totals: List[Tensor] = []
    tl_sum = 0.0
    intent_sum = 0.0
    for xs, teacher, label in zip(acoustics, teachers, labels):
        teacher = np.asarray(teacher, dtype=model.dtype)
        if teacher.ndim != 1 or teacher.shape[0] != model.teacher_dim:
            raise DimensionError(
                f"teacher embedding shape {teacher.shape} does not match "
                f"teacher_dim {model.teacher_dim}")
        logits, pooled_te = mtsn_forward(model, xs)
        loss_intent = cross_entropy(logits, int(label))
        loss_tl = distillation_kl(pooled_te, teacher, cfg.temperature)
        totals.append(total_loss(loss_tl, loss_intent, cfg))
        tl_sum += loss_tl.item()
        intent_sum += loss_intent.item()
    loss = batch_loss(totals)
    loss.backward()
    adam_step(adam, params)
    n = len(acoustics)
    return loss.item(), tl_sum / n, intent_sum / n


def baseline2_train_step(model: Baseline2Model, acoustics: Sequence[np.ndarray],
                         labels: Sequence[int], adam: AdamState
                         ) -> Tuple[float, float, float]:
    """One cross-entropy-only update; distillation slot reported as 0."""
    if len(acoustics) == 0:
        raise ContractError("baseline2_train_step: empty batch")
    if len(acoustics) != len(labels):
        raise ContractError("baseline2_train_step: batch component lengths disagree")
    params = model.parameters()
    zero_grads(params)
    per_example = [cross_entropy(baseline2_forward(model, xs), int(label))
                   for xs, label in zip(acoustics, labels)]
    loss = batch_loss(per_example)
    loss.backward()
    adam_step(adam, params)
    value = loss.item()
    return value, 0.0, value


# ---------------------------------------------------------------------------
# checkpoints


@dataclass
class Checkpoint:
    model_kind: str
    dims: Dict[str, object]
    params: "OrderedDict[str, np.ndarray]"
    loss_cfg: Optional[Dict[str, float]] = None
    optimizer: Optional[Dict[str, object]] = None
    metadata: Dict[str, object] = field(default_factory=dict)


def _blob(arr: np.ndarray) -> bytes:
    return np.ascontiguousarray(arr, dtype="<f8").tobytes()


def save_checkpoint(path, model: AnyModel, adam: Optional[AdamState] = None,
                    metadata: Optional[Dict[str, object]] = None) -> None:
    params = model.parameters()
    header: Dict[str, object] = {
        "format_version": CHECKPOINT_VERSION,
        "model_kind": model.kind,
        "dims": model.dims(),
        "params": [{"name": name, "shape": list(p.data.shape)}
                   for name, p in params.items()],
        "optimizer": None,
        "metadata": metadata or {},
    }
    if isinstance(model, MtsnModel):
        header["loss_cfg"] = {"alpha": model.loss_cfg.alpha,
                              "temperature": model.loss_cfg.temperature}
    if adam is not None:
        header["optimizer"] = {"lr": adam.lr, "beta1": adam.beta1,
                               "beta2": adam.beta2, "eps": adam.eps, "t": adam.t}
    encoded = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(np.uint32(len(encoded)).tobytes())
        fh.write(encoded)
        for p in params.values():
            fh.write(_blob(p.data))
        if adam is not None:
            for name in params:
                fh.write(_blob(adam.m[name]))
                fh.write(_blob(adam.v[name]))


def _take(buf: bytes, pos: int, count: int, what: str) -> Tuple[bytes, int]:
    end = pos + count
    if end > len(buf):
        raise CheckpointParseError(f"truncated checkpoint while reading {what}", len(buf))
    return buf[pos:end], end


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        buf = fh.read()
    magic, pos = _take(buf, 0, 4, "magic")
    if magic != CHECKPOINT_MAGIC:
        raise CheckpointParseError("bad magic bytes", 0)
    raw_len, pos = _take(buf, pos, 4, "header length")
    header_len = int(np.frombuffer(raw_len, dtype="<u4")[0])
    raw_header, pos = _take(buf, pos, header_len, "header")
    try:
        header = json.loads(raw_header.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointParseError(f"unreadable header: {exc}", 8) from None
    version = header.get("format_version")
    if version != CHECKPOINT_VERSION:
        raise CheckpointVersionError(
            f"unsupported checkpoint format version {version!r} "
            f"(this build reads version {CHECKPOINT_VERSION})")
    for key in ("model_kind", "dims", "params"):
        if key not in header:
            raise CheckpointParseError(f"header is missing field '{key}'", 8)
    params: "OrderedDict[str, np.ndarray]" = OrderedDict()
    for entry in header["params"]:
        shape = tuple(int(s) for s in entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        raw, pos = _take(buf, pos, count * 8, f"parameter '{entry['name']}'")
        params[entry["name"]] = np.frombuffer(raw, dtype="<f8").reshape(shape).copy()
    optimizer = header.get("optimizer")
    if optimizer is not None:
        moments_m: Dict[str, np.ndarray] = {}
        moments_v: Dict[str, np.ndarray] = {}
        for name, arr in params.items():
            raw, pos = _take(buf, pos, arr.size * 8, f"first moment of '{name}'")
            moments_m[name] = np.frombuffer(raw, dtype="<f8").reshape(arr.shape).copy()
            raw, pos = _take(buf, pos, arr.size * 8, f"second moment of '{name}'")
            moments_v[name] = np.frombuffer(raw, dtype="<f8").reshape(arr.shape).copy()
        optimizer = dict(optimizer)
        optimizer["m"] = moments_m
        optimizer["v"] = moments_v
    if pos != len(buf):
        raise CheckpointParseError("trailing data after final parameter blob", pos)
    return Checkpoint(model_kind=header["model_kind"], dims=header["dims"],
                      params=params, loss_cfg=header.get("loss_cfg"),
                      optimizer=optimizer, metadata=header.get("metadata", {}))


def model_from_checkpoint(ckpt: Checkpoint) -> Tuple[AnyModel, Optional[AdamState]]:
    """Rebuild the model (and optimizer state, if saved) from a checkpoint."""
    dims = ckpt.dims
    dtype = np.dtype(dims.get("dtype", "float64"))
    if ckpt.model_kind == "mtsn":
        cfg = LossConfig(**ckpt.loss_cfg) if ckpt.loss_cfg else LossConfig()
        model: AnyModel = MtsnModel(
            int(dims["acoustic_dim"]), int(dims["teacher_dim"]),
            int(dims["hidden_size"]), int(dims["num_intents"]),
            loss_cfg=cfg, dtype=dtype)
    elif ckpt.model_kind == "baseline2":
        model = Baseline2Model(int(dims["acoustic_dim"]), int(dims["hidden_size"]),
                               int(dims["num_intents"]), dtype=dtype)
    else:
        raise CheckpointParseError(f"unknown model kind '{ckpt.model_kind}'", 8)
    params = model.parameters()
    if set(params) != set(ckpt.params):
        raise CheckpointParseError(
            "checkpoint parameter names do not match the declared model kind", 8)
    for name, p in params.items():
        stored = ckpt.params[name]
        if stored.shape != p.data.shape:
            raise CheckpointParseError(
                f"parameter '{name}' has shape {stored.shape}, "
                f"expected {p.data.shape}", 8)
        p.data = stored.astype(dtype)
    adam = None
    if ckpt.optimizer is not None:
        opt = ckpt.optimizer
        adam = init_adam(params, lr=float(opt["lr"]), beta1=float(opt["beta1"]),
                         beta2=float(opt["beta2"]), eps=float(opt["eps"]))
        adam.t = int(opt["t"])
        for name in params:
            adam.m[name] = opt["m"][name].astype(dtype)
            adam.v[name] = opt["v"][name].astype(dtype)
    return model, adam
