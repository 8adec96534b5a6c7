"""Prediction heads over set embeddings.

A head applies one map per embedding block (identity, linear, or one-hidden-
layer ReLU MLP), concatenates the results, and applies a final map of the
same kinds. With identity block maps this reduces to an ordinary probe on
the whole vector. Training is mini-batch AdamW on cross-entropy (class
targets) or the negative Cox partial log-likelihood (survival targets), with
hand-written gradients validated by :func:`grad_check`.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import Target
from .embedding import SetEmbedding
from .errors import NumericalError, ParseError, ValidationError
from .metrics import balanced_accuracy

_MAGIC = b"PHED"
_VERSION = 1
_KINDS = ("identity", "linear", "mlp")
_ADAM_BETA1 = 0.9
_ADAM_BETA2 = 0.999
_ADAM_EPS = 1e-8


@dataclass(frozen=True)
class HeadSpec:
    indiv_kind: str = "identity"
    pred_kind: str = "linear"
    indiv_out_dim: int = 32
    hidden_dim: int = 64
    out_dim: int = 2

    def __post_init__(self):
        for name, kind in (("indiv_kind", self.indiv_kind), ("pred_kind", self.pred_kind)):
            if kind not in _KINDS:
                raise ValidationError(f"{name} must be one of {_KINDS}, got {kind!r}")
        for name, dim in (
            ("indiv_out_dim", self.indiv_out_dim),
            ("hidden_dim", self.hidden_dim),
            ("out_dim", self.out_dim),
        ):
            if dim < 1:
                raise ValidationError(f"{name} must be positive")


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-4
    weight_decay: float = 1e-5
    epochs: int = 20
    batch_size: int = 32
    seed: int = 0
    loss: str = "cross_entropy"  # "cross_entropy" | "cox"
    lr_schedule: str = "cosine"  # "cosine" | "constant"

    def __post_init__(self):
        if not (self.lr >= 0):
            raise ValidationError("lr must be >= 0")
        if self.weight_decay < 0:
            raise ValidationError("weight_decay must be >= 0")
        if self.epochs < 1:
            raise ValidationError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValidationError("batch_size must be >= 1")
        if self.loss not in ("cross_entropy", "cox"):
            raise ValidationError(f"unknown loss {self.loss!r}")
        if self.lr_schedule not in ("cosine", "constant"):
            raise ValidationError(f"unknown lr_schedule {self.lr_schedule!r}")


@dataclass(eq=False)
class PredictorHead:
    spec: HeadSpec
    input_variant: str
    block_dims: tuple[int, ...]
    params: dict[str, np.ndarray]
    final_train_loss: float | None = None
    history: list[dict] = field(default_factory=list)

    def __post_init__(self):
        for name, p in self.params.items():
            if not np.all(np.isfinite(p)):
                raise ValidationError(f"parameter {name!r} contains non-finite values")

    @property
    def in_dim(self) -> int:
        return int(sum(self.block_dims))

    def num_params(self) -> int:
        return int(sum(p.size for p in self.params.values()))


def _map_out_dim(kind: str, in_dim: int, spec: HeadSpec, final: bool) -> int:
    if kind == "identity":
        return in_dim
    return spec.out_dim if final else spec.indiv_out_dim


def _init_map(
    kind: str, in_dim: int, out_dim: int, hidden: int, prefix: str,
    rng: np.random.Generator, params: dict[str, np.ndarray],
) -> None:
    if kind == "identity":
        return
    def uniform(shape, fan_in):
        bound = 1.0 / np.sqrt(fan_in)
        return rng.uniform(-bound, bound, size=shape)
    if kind == "linear":
        params[f"{prefix}.W1"] = uniform((out_dim, in_dim), in_dim)
        params[f"{prefix}.b1"] = uniform((out_dim,), in_dim)
    else:  # mlp
        params[f"{prefix}.W1"] = uniform((hidden, in_dim), in_dim)
        params[f"{prefix}.b1"] = uniform((hidden,), in_dim)
        params[f"{prefix}.W2"] = uniform((out_dim, hidden), hidden)
        params[f"{prefix}.b2"] = uniform((out_dim,), hidden)


def build_head(
    spec: HeadSpec, input_variant: str, block_dims: tuple[int, ...], seed: int = 0
) -> PredictorHead:
    """Initialize a head for embeddings with the given block structure.

    Weights and biases start uniform in +-1/sqrt(fan_in), drawn from the seed
    in a fixed order.
    """
    if not block_dims or any(b < 1 for b in block_dims):
        raise ValidationError("block_dims must be non-empty positive sizes")
    rng = np.random.default_rng(seed)
    params: dict[str, np.ndarray] = {}
    concat = 0
    for i, b in enumerate(block_dims):
        _init_map(spec.indiv_kind, b, spec.indiv_out_dim, spec.hidden_dim,
                  f"indiv{i}", rng, params)
        concat += _map_out_dim(spec.indiv_kind, b, spec, final=False)
    if spec.pred_kind == "identity" and concat != spec.out_dim:
        raise ValidationError(
            f"pred_kind=identity requires concatenated length {concat} == out_dim {spec.out_dim}"
        )
    _init_map(spec.pred_kind, concat, spec.out_dim, spec.hidden_dim, "pred", rng, params)
    return PredictorHead(spec=spec, input_variant=input_variant,
                         block_dims=tuple(block_dims), params=params)


def head_for_embedding(spec: HeadSpec, emb: SetEmbedding, seed: int = 0) -> PredictorHead:
    return build_head(spec, emb.variant, emb.block_dims, seed=seed)


# ---------------------------------------------------------------------------
# forward / backward


def _map_forward(kind, params, prefix, x):
    """Returns (output, cache) where cache holds what backward needs."""
    if kind == "identity":
        return x, None
    w1, b1 = params[f"{prefix}.W1"], params[f"{prefix}.b1"]
    pre = x @ w1.T + b1
    if kind == "linear":
        return pre, (x,)
    hidden = np.maximum(pre, 0.0)
    w2, b2 = params[f"{prefix}.W2"], params[f"{prefix}.b2"]
    return hidden @ w2.T + b2, (x, pre, hidden)


def _map_backward(kind, params, prefix, cache, dout, grads):
    """Accumulates parameter gradients; returns gradient w.r.t. the input."""
    if kind == "identity":
        return dout
    if kind == "linear":
        (x,) = cache
        grads[f"{prefix}.W1"] = dout.T @ x
        grads[f"{prefix}.b1"] = dout.sum(axis=0)
        return dout @ params[f"{prefix}.W1"]
    x, pre, hidden = cache
    w2 = params[f"{prefix}.W2"]
    grads[f"{prefix}.W2"] = dout.T @ hidden
    grads[f"{prefix}.b2"] = dout.sum(axis=0)
    dhidden = dout @ w2
    dpre = dhidden * (pre > 0.0)
    grads[f"{prefix}.W1"] = dpre.T @ x
    grads[f"{prefix}.b1"] = dpre.sum(axis=0)
    return dpre @ params[f"{prefix}.W1"]


def _forward_batch(head: PredictorHead, x: np.ndarray):
    spec = head.spec
    caches = []
    outputs = []
    start = 0
    for i, b in enumerate(head.block_dims):
        block = x[:, start : start + b]
        start += b
        out, cache = _map_forward(spec.indiv_kind, head.params, f"indiv{i}", block)
        outputs.append(out)
        caches.append(cache)
    concat = np.concatenate(outputs, axis=1) if len(outputs) > 1 else outputs[0]
    y, pred_cache = _map_forward(spec.pred_kind, head.params, "pred", concat)
    return y, (caches, pred_cache, [o.shape[1] for o in outputs])


def _backward_batch(head: PredictorHead, cache, dy: np.ndarray) -> dict[str, np.ndarray]:
    spec = head.spec
    caches, pred_cache, widths = cache
    grads: dict[str, np.ndarray] = {}
    dconcat = _map_backward(spec.pred_kind, head.params, "pred", pred_cache, dy, grads)
    start = 0
    for i, w in enumerate(widths):
        dblock = dconcat[:, start : start + w]
        start += w
        _map_backward(spec.indiv_kind, head.params, f"indiv{i}", caches[i], dblock, grads)
    return grads


def forward(head: PredictorHead, emb: SetEmbedding) -> np.ndarray:
    """Apply the head to one embedding; returns logits or a length-1 risk."""
    if emb.variant != head.input_variant:
        raise ValidationError(
            f"head expects variant {head.input_variant!r}, embedding is {emb.variant!r}"
        )
    if emb.block_dims != head.block_dims:
        raise ValidationError(
            f"head expects blocks {head.block_dims}, embedding has {emb.block_dims}"
        )
    y, _ = _forward_batch(head, emb.values[None, :])
    return y[0]


def predict(head: PredictorHead, embeddings: list[SetEmbedding]) -> np.ndarray:
    """Stacked head outputs for a list of embeddings, shape (n, out)."""
    x = stack_embeddings(head, embeddings)
    y, _ = _forward_batch(head, x)
    return y


def stack_embeddings(head: PredictorHead, embeddings: list[SetEmbedding]) -> np.ndarray:
    if not embeddings:
        raise ValidationError("no embeddings given")
    for e in embeddings:
        if e.variant != head.input_variant or e.block_dims != head.block_dims:
            raise ValidationError(f"embedding {e.set_id!r} does not match the head layout")
    return np.stack([e.values for e in embeddings])


# ---------------------------------------------------------------------------
# losses


def loss_cross_entropy(logits: np.ndarray, label: int) -> float:
    """Negative log softmax probability of the true class."""
    logits = np.asarray(logits, dtype=np.float64).reshape(-1)
    if not 0 <= label < logits.shape[0]:
        raise ValidationError(f"label {label} out of range for {logits.shape[0]} logits")
    m = logits.max()
    lse = m + np.log(np.sum(np.exp(logits - m)))
    return float(lse - logits[label])


def _ce_batch(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    b = logits.shape[0]
    m = logits.max(axis=1, keepdims=True)
    shifted = logits - m
    lse = m[:, 0] + np.log(np.exp(shifted).sum(axis=1))
    loss = float(np.mean(lse - logits[np.arange(b), labels]))
    soft = np.exp(shifted)
    soft /= soft.sum(axis=1, keepdims=True)
    soft[np.arange(b), labels] -= 1.0
    return loss, soft / b


def loss_cox(risks: np.ndarray, times: np.ndarray, events: np.ndarray) -> float:
    """Negative Cox partial log-likelihood, averaged over events.

    The risk set of an event contains every subject with time >= the event
    time, which handles ties in the Breslow manner.
    """
    loss, _ = _cox_batch(
        np.asarray(risks, dtype=np.float64).reshape(-1),
        np.asarray(times, dtype=np.float64).reshape(-1),
        np.asarray(events, dtype=bool).reshape(-1),
    )
    return loss


def _cox_batch(risks, times, events) -> tuple[float, np.ndarray]:
    n = risks.shape[0]
    if n < 2:
        raise ValidationError("cox loss requires at least 2 subjects")
    if times.shape[0] != n or events.shape[0] != n:
        raise ValidationError("risks, times, and events must be aligned")
    event_idx = np.flatnonzero(events)
    if event_idx.size == 0:
        raise ValidationError("cox loss requires at least one observed event")
    total = 0.0
    dr = np.zeros(n)
    for i in event_idx:
        at_risk = times >= times[i]
        r = risks[at_risk]
        m = r.max()
        lse = m + np.log(np.sum(np.exp(r - m)))
        total += risks[i] - lse
        dr[at_risk] += np.exp(risks[at_risk] - lse)
        dr[i] -= 1.0
    e = float(event_idx.size)
    return float(-total / e), dr / e


def _loss_and_grad(loss_kind: str, y: np.ndarray, target_arrays) -> tuple[float, np.ndarray]:
    if loss_kind == "cross_entropy":
        labels = target_arrays
        return _ce_batch(y, labels)
    times, events = target_arrays
    loss, dr = _cox_batch(y[:, 0], times, events)
    return loss, dr[:, None]


# ---------------------------------------------------------------------------
# training


def _extract_targets(loss_kind: str, targets: list[Target], out_dim: int):
    if loss_kind == "cross_entropy":
        labels = []
        for t in targets:
            if t is None or t.kind != "class_label":
                raise ValidationError("cross_entropy training requires class_label targets")
            if t.class_label >= out_dim:
                raise ValidationError(
                    f"label {t.class_label} out of range for out_dim {out_dim}"
                )
            labels.append(t.class_label)
        return np.asarray(labels, dtype=np.int64)
    if out_dim != 1:
        raise ValidationError("cox training requires out_dim == 1 (scalar risk)")
    times, events = [], []
    for t in targets:
        if t is None or t.kind != "survival":
            raise ValidationError("cox training requires survival targets")
        times.append(t.time)
        events.append(t.event)
    return np.asarray(times, dtype=np.float64), np.asarray(events, dtype=bool)


def _epoch_lr(cfg: TrainConfig, epoch: int) -> float:
    if cfg.lr_schedule == "constant":
        return cfg.lr
    return cfg.lr * 0.5 * (1.0 + np.cos(np.pi * epoch / cfg.epochs))


def train(
    embeddings: list[SetEmbedding],
    targets: list[Target],
    cfg: TrainConfig,
    spec: HeadSpec,
    *,
    init_seed: int | None = None,
    epoch_callback=None,
) -> PredictorHead:
    """Mini-batch AdamW training; deterministic for fixed seeds.

    Parameter init uses ``init_seed`` (default: ``cfg.seed``); batch shuffles
    use ``cfg.seed``. Cox batches with fewer than 2 subjects or no events are
    skipped. ``epoch_callback(epoch, head, history)`` may return True to stop
    early (the core loop itself never stops before ``cfg.epochs``).
    """
    if len(embeddings) != len(targets) or not embeddings:
        raise ValidationError("embeddings and targets must be non-empty and aligned")
    head = build_head(
        spec,
        embeddings[0].variant,
        embeddings[0].block_dims,
        seed=cfg.seed if init_seed is None else init_seed,
    )
    x = stack_embeddings(head, embeddings)
    target_arrays = _extract_targets(cfg.loss, targets, spec.out_dim)

    adam_m = {k: np.zeros_like(v) for k, v in head.params.items()}
    adam_v = {k: np.zeros_like(v) for k, v in head.params.items()}
    rng = np.random.default_rng(cfg.seed)
    n = x.shape[0]
    step = 0
    last_loss = float("nan")
    for epoch in range(cfg.epochs):
        lr = _epoch_lr(cfg, epoch)
        perm = rng.permutation(n)
        epoch_loss = 0.0
        seen = 0
        for start in range(0, n, cfg.batch_size):
            idx = perm[start : start + cfg.batch_size]
            xb = x[idx]
            if cfg.loss == "cross_entropy":
                batch_targets = target_arrays[idx]
            else:
                times, events = target_arrays
                if idx.size < 2 or not events[idx].any():
                    continue
                batch_targets = (times[idx], events[idx])
            y, cache = _forward_batch(head, xb)
            loss, dy = _loss_and_grad(cfg.loss, y, batch_targets)
            if not np.isfinite(loss):
                raise NumericalError(
                    f"non-finite loss at epoch {epoch}, batch starting {start}"
                )
            grads = _backward_batch(head, cache, dy)
            step += 1
            for name, p in head.params.items():
                g = grads[name]
                adam_m[name] = _ADAM_BETA1 * adam_m[name] + (1 - _ADAM_BETA1) * g
                adam_v[name] = _ADAM_BETA2 * adam_v[name] + (1 - _ADAM_BETA2) * g * g
                m_hat = adam_m[name] / (1 - _ADAM_BETA1**step)
                v_hat = adam_v[name] / (1 - _ADAM_BETA2**step)
                head.params[name] = p - lr * (
                    m_hat / (np.sqrt(v_hat) + _ADAM_EPS) + cfg.weight_decay * p
                )
            epoch_loss += loss * idx.size
            seen += idx.size
        last_loss = epoch_loss / seen if seen else float("nan")
        record = {"epoch": epoch, "lr": lr, "loss": last_loss}
        if cfg.loss == "cross_entropy":
            y_all, _ = _forward_batch(head, x)
            record["train_balanced_accuracy"] = balanced_accuracy(
                y_all.argmax(axis=1), target_arrays, spec.out_dim
            )
        head.history.append(record)
        if epoch_callback is not None and epoch_callback(epoch, head, head.history):
            break
    head.final_train_loss = last_loss
    return head


# ---------------------------------------------------------------------------
# gradient checking


def grad_check(head: PredictorHead, batch, loss_kind: str, h: float = 1e-5) -> float:
    """Max discrepancy between analytic and central finite-difference
    gradients over all parameters, on the float64 path.

    ``batch`` is ``(X, labels)`` for cross-entropy or ``(X, times, events)``
    for cox, with X of shape (B, in_dim). The per-scalar discrepancy is
    |analytic - numeric| / max(1, |analytic|, |numeric|); heads above 2k
    parameters are rejected. Returns 0.0 for parameter-free heads.
    """
    if head.num_params() > 2048:
        raise ValidationError("grad_check is limited to heads with <= 2048 parameters")
    if loss_kind == "cross_entropy":
        x, labels = batch
        target_arrays = np.asarray(labels, dtype=np.int64)
    elif loss_kind == "cox":
        x, times, events = batch
        target_arrays = (np.asarray(times, dtype=np.float64), np.asarray(events, dtype=bool))
    else:
        raise ValidationError(f"unknown loss {loss_kind!r}")
    x = np.asarray(x, dtype=np.float64)

    def eval_loss() -> float:
        y, _ = _forward_batch(head, x)
        loss, _ = _loss_and_grad(loss_kind, y, target_arrays)
        return loss

    y, cache = _forward_batch(head, x)
    _, dy = _loss_and_grad(loss_kind, y, target_arrays)
    analytic = _backward_batch(head, cache, dy)

    worst = 0.0
    for name, p in head.params.items():
        flat = p.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = eval_loss()
            flat[i] = orig - h
            down = eval_loss()
            flat[i] = orig
            numeric = (up - down) / (2 * h)
            a = float(analytic[name].reshape(-1)[i])
            worst = max(worst, abs(a - numeric) / max(1.0, abs(a), abs(numeric)))
    return worst


# ---------------------------------------------------------------------------
# serialization


def save_head(head: PredictorHead, path: str | Path) -> None:
    names = sorted(head.params)
    meta = {
        "spec": {
            "indiv_kind": head.spec.indiv_kind,
            "pred_kind": head.spec.pred_kind,
            "indiv_out_dim": head.spec.indiv_out_dim,
            "hidden_dim": head.spec.hidden_dim,
            "out_dim": head.spec.out_dim,
        },
        "input_variant": head.input_variant,
        "block_dims": list(head.block_dims),
        "param_names": names,
        "final_train_loss": head.final_train_loss,
    }
    blob = json.dumps(meta, sort_keys=True).encode("utf-8")
    with open(path, "wb") as out:
        out.write(_MAGIC)
        out.write(struct.pack("<HI", _VERSION, len(blob)))
        out.write(blob)
        for name in names:
            p = np.ascontiguousarray(head.params[name], dtype="<f8")
            out.write(struct.pack("<B", p.ndim))
            out.write(struct.pack(f"<{p.ndim}I", *p.shape))
            out.write(p.tobytes())


def load_head(path: str | Path) -> PredictorHead:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != _MAGIC:
            raise ParseError(f"bad magic {magic!r} in {path}, expected {_MAGIC!r}")
        version, blob_len = struct.unpack("<HI", fh.read(6))
        if version != _VERSION:
            raise ParseError(f"unsupported head format version {version}")
        meta = json.loads(fh.read(blob_len).decode("utf-8"))
        params = {}
        for name in meta["param_names"]:
            (ndim,) = struct.unpack("<B", fh.read(1))
            shape = struct.unpack(f"<{ndim}I", fh.read(4 * ndim))
            count = int(np.prod(shape)) if shape else 1
            raw = fh.read(count * 8)
            if len(raw) != count * 8:
                raise ParseError(f"truncated parameter tensor {name!r} in {path}")
            params[name] = np.frombuffer(raw, dtype="<f8").reshape(shape).copy()
    head = PredictorHead(
        spec=HeadSpec(**meta["spec"]),
        input_variant=meta["input_variant"],
        block_dims=tuple(meta["block_dims"]),
        params=params,
        final_train_loss=meta["final_train_loss"],
    )
    return head
