"""Static dense path + GRU sequence path risk model, trained with weighted BCE and Adam.

Everything is float64 numpy with hand-written backpropagation through time.
"""
from __future__ import annotations

import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .evalkit import IsotonicCalibrator, auprc
from .features import EncounterTensor

log = logging.getLogger(__name__)

CLAMP = 1e-12
PARAM_ORDER = ("W_s", "b_s", "W_z", "W_r", "W_h", "U_z", "U_r", "U_h", "b_z", "b_r", "b_h",
               "W_1", "b_1", "w_out", "b_out")
LOGISTIC_ORDER = ("w", "b")
BASELINE_HISTORY = 4  # windows of dynamic history (48 h) for the logistic baseline


class SchemaMismatchError(ValueError):
    pass


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 64
    learning_rate: float = 1e-3
    dropout: float = 0.20
    patience: int = 3
    max_epochs: int = 100
    seed: int = 0
    class_weighting: str = "inverse"  # or "none"
    static_hidden: int = 64
    hidden: int = 64
    head_hidden: int = 64
    val_eval_mask: bool = False  # early stopping on all validation windows by default
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    def overrides(self) -> dict:
        base = TrainConfig()
        return {f.name: getattr(self, f.name) for f in fields(self)
                if f.name != "seed" and getattr(self, f.name) != getattr(base, f.name)}

    @classmethod
    def from_mapping(cls, values) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(values) - known
        if unknown:
            raise ValueError(f"unknown training options: {sorted(unknown)}")
        return cls(**values)


# -- parameters --------------------------------------------------------------------------------

def _glorot(rng, fan_in, fan_out):
    a = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=(fan_in, fan_out))


def init_params(d_static: int, d_dyn: int, rng: np.random.Generator, static_hidden: int = 64,
                hidden: int = 64, head_hidden: int = 64) -> dict[str, np.ndarray]:
    p = {
        "W_s": _glorot(rng, d_static, static_hidden), "b_s": np.zeros(static_hidden),
        "W_z": _glorot(rng, d_dyn, hidden), "W_r": _glorot(rng, d_dyn, hidden), "W_h": _glorot(rng, d_dyn, hidden),
        "U_z": _glorot(rng, hidden, hidden), "U_r": _glorot(rng, hidden, hidden), "U_h": _glorot(rng, hidden, hidden),
        "b_z": np.zeros(hidden), "b_r": np.zeros(hidden), "b_h": np.zeros(hidden),
        "W_1": _glorot(rng, static_hidden + hidden, head_hidden), "b_1": np.zeros(head_hidden),
        "w_out": _glorot(rng, head_hidden, 1)[:, 0], "b_out": np.zeros(1),
    }
    return p


def zero_params(d_static, d_dyn, static_hidden=64, hidden=64, head_hidden=64):
    return {k: np.zeros_like(v) for k, v in
            init_params(d_static, d_dyn, np.random.default_rng(0), static_hidden, hidden, head_hidden).items()}


# -- GRU ---------------------------------------------------------------------------------------

def gru_cell(x, h_prev, params):
    """One GRU step (reset gate applied to h_prev before the recurrent candidate product).

    Works on single vectors or on row batches.
    """
    z = sigmoid(x @ params["W_z"] + h_prev @ params["U_z"] + params["b_z"])
    r = sigmoid(x @ params["W_r"] + h_prev @ params["U_r"] + params["b_r"])
    hc = np.tanh(x @ params["W_h"] + (r * h_prev) @ params["U_h"] + params["b_h"])
    return (1.0 - z) * h_prev + z * hc


@dataclass
class Batch:
    static: np.ndarray  # (B, d_static)
    steps: np.ndarray   # (B, T, d_dyn), zero padded
    labels: np.ndarray  # (B, T)
    mask: np.ndarray    # (B, T) 1 for real windows

    @classmethod
    def from_tensors(cls, tensors: Sequence[EncounterTensor], eval_mask: bool = False) -> "Batch":
        B = len(tensors)
        T = max((t.n_steps for t in tensors), default=0)
        d_dyn = tensors[0].steps.shape[1] if tensors and tensors[0].steps.ndim == 2 else 0
        steps = np.zeros((B, T, d_dyn))
        labels = np.zeros((B, T))
        mask = np.zeros((B, T))
        for i, t in enumerate(tensors):
            n = t.n_steps
            steps[i, :n] = t.steps
            labels[i, :n] = t.labels
            mask[i, :n] = t.eval_mask if eval_mask else 1.0
        return cls(np.vstack([t.static_vec for t in tensors]), steps, labels, mask)


def _dropout_mask(rng, shape, p):
    if rng is None or p <= 0:
        return None
    return (rng.random(shape) >= p) / (1.0 - p)


def forward(params, static, steps, train: bool = False, rng: np.random.Generator | None = None,
            dropout: float = 0.2):
    """Per-step risks (B, T) and the cache needed by :func:`backward`.

    Dropout (inverted scaling) is applied only when ``train`` is set.
    """
    static = np.atleast_2d(static)
    steps = steps[None] if steps.ndim == 2 else steps
    B, T, _ = steps.shape
    if not train:
        rng = None
    s_pre = static @ params["W_s"] + params["b_s"]
    s_act = np.maximum(s_pre, 0.0)
    s_mask = _dropout_mask(rng, s_act.shape, dropout)
    s = s_act * s_mask if s_mask is not None else s_act

    H = params["U_z"].shape[0]
    h = np.zeros((B, H))
    hs, zs, rs, hcs, hprevs = [], [], [], [], []
    for t in range(T):
        x = steps[:, t]
        z = sigmoid(x @ params["W_z"] + h @ params["U_z"] + params["b_z"])
        r = sigmoid(x @ params["W_r"] + h @ params["U_r"] + params["b_r"])
        hc = np.tanh(x @ params["W_h"] + (r * h) @ params["U_h"] + params["b_h"])
        hprevs.append(h)
        h = (1.0 - z) * h + z * hc
        zs.append(z)
        rs.append(r)
        hcs.append(hc)
        hs.append(h)
    Hseq = np.stack(hs, axis=1) if T else np.zeros((B, 0, H))
    cat = np.concatenate([np.broadcast_to(s[:, None, :], (B, T, s.shape[1])), Hseq], axis=2)
    a1 = cat @ params["W_1"] + params["b_1"]
    u_act = np.maximum(a1, 0.0)
    u_mask = _dropout_mask(rng, u_act.shape, dropout)
    u = u_act * u_mask if u_mask is not None else u_act
    logits = u @ params["w_out"] + params["b_out"][0]
    p = sigmoid(logits)
    cache = dict(static=static, steps=steps, s_pre=s_pre, s_mask=s_mask, s=s, hprevs=hprevs, zs=zs, rs=rs,
                 hcs=hcs, cat=cat, a1=a1, u_mask=u_mask, u=u, p=p)
    return p, cache


def backward(params, cache, dlogits):
    """Gradients of ``sum(dlogits * logits)`` w.r.t. every parameter and both inputs."""
    g = {k: np.zeros_like(v) for k, v in params.items()}
    steps = cache["steps"]
    B, T, _ = steps.shape
    Hs = cache["s"].shape[1]

    g["b_out"][0] = dlogits.sum()
    g["w_out"] = np.einsum("bt,btk->k", dlogits, cache["u"])
    du = dlogits[..., None] * params["w_out"]
    if cache["u_mask"] is not None:
        du = du * cache["u_mask"]
    da1 = du * (cache["a1"] > 0)
    g["W_1"] = np.einsum("btc,btk->ck", cache["cat"], da1)
    g["b_1"] = da1.sum(axis=(0, 1))
    dcat = da1 @ params["W_1"].T
    ds = dcat[:, :, :Hs].sum(axis=1)
    dH = dcat[:, :, Hs:]

    if cache["s_mask"] is not None:
        ds = ds * cache["s_mask"]
    ds_pre = ds * (cache["s_pre"] > 0)
    g["W_s"] = cache["static"].T @ ds_pre
    g["b_s"] = ds_pre.sum(axis=0)
    dstatic = ds_pre @ params["W_s"].T

    dsteps = np.zeros_like(steps)
    dh_next = np.zeros((B, params["U_z"].shape[0]))
    for t in range(T - 1, -1, -1):
        x, hp = steps[:, t], cache["hprevs"][t]
        z, r, hc = cache["zs"][t], cache["rs"][t], cache["hcs"][t]
        dh = dH[:, t] + dh_next
        da_h = dh * z * (1.0 - hc * hc)
        da_z = dh * (hc - hp) * z * (1.0 - z)
        drh = da_h @ params["U_h"].T
        da_r = drh * hp * r * (1.0 - r)
        g["W_h"] += x.T @ da_h
        g["U_h"] += (r * hp).T @ da_h
        g["b_h"] += da_h.sum(axis=0)
        g["W_z"] += x.T @ da_z
        g["U_z"] += hp.T @ da_z
        g["b_z"] += da_z.sum(axis=0)
        g["W_r"] += x.T @ da_r
        g["U_r"] += hp.T @ da_r
        g["b_r"] += da_r.sum(axis=0)
        dsteps[:, t] = da_h @ params["W_h"].T + da_z @ params["W_z"].T + da_r @ params["W_r"].T
        dh_next = dh * (1.0 - z) + drh * r + da_z @ params["U_z"].T + da_r @ params["U_r"].T
    return g, dstatic, dsteps


# -- loss --------------------------------------------------------------------------------------

def class_weights(labels: np.ndarray) -> tuple[float, float]:
    """(w0, w1) = (N / 2N_neg, N / 2N_pos); a missing class gets weight 1."""
    labels = np.asarray(labels)
    n = labels.size
    n_pos = int((labels == 1).sum())
    n_neg = n - n_pos
    w1 = n / (2.0 * n_pos) if n_pos else 1.0
    w0 = n / (2.0 * n_neg) if n_neg else 1.0
    return w0, w1


def weighted_bce(p, y, weights=(1.0, 1.0), mask=None):
    """Mean over (masked) windows of the class-weighted binary cross-entropy."""
    p = np.asarray(p, dtype=float)
    y = np.asarray(y, dtype=float)
    mask = np.ones_like(p) if mask is None else np.asarray(mask, dtype=float)
    n = mask.sum()
    if n == 0:
        return 0.0
    pc = np.clip(p, CLAMP, 1.0 - CLAMP)
    w = np.where(y == 1, weights[1], weights[0])
    ll = y * np.log(pc) + (1.0 - y) * np.log(1.0 - pc)
    return float(-(w * ll * mask).sum() / n)


def weighted_bce_dlogits(p, y, weights=(1.0, 1.0), mask=None):
    mask = np.ones_like(p) if mask is None else mask
    n = mask.sum()
    if n == 0:
        return np.zeros_like(p)
    w = np.where(y == 1, weights[1], weights[0])
    inside = (p > CLAMP) & (p < 1.0 - CLAMP)
    return w * (p - y) * mask * inside / n


def loss_and_grads(params, batch: Batch, weights=(1.0, 1.0), train=False, rng=None, dropout=0.2):
    p, cache = forward(params, batch.static, batch.steps, train, rng, dropout)
    loss = weighted_bce(p, batch.labels, weights, batch.mask)
    g, _, _ = backward(params, cache, weighted_bce_dlogits(p, batch.labels, weights, batch.mask))
    return loss, g


def input_gradients(params, static, steps, t: int):
    """d risk_t / d inputs for a batch of encounters (infer mode)."""
    p, cache = forward(params, static, steps)
    dl = np.zeros_like(p)
    dl[:, t] = p[:, t] * (1.0 - p[:, t])
    _, ds, dx = backward(params, cache, dl)
    return p[:, t], ds, dx


# -- optimiser ---------------------------------------------------------------------------------

@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def adam_step(params, grads, state: AdamState, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
    """In-place bias-corrected Adam update; increments ``state.t``."""
    state.t += 1
    bc1 = 1.0 - beta1 ** state.t
    bc2 = 1.0 - beta2 ** state.t
    for k in params:
        g = grads[k]
        if k not in state.m:
            state.m[k] = np.zeros_like(params[k])
            state.v[k] = np.zeros_like(params[k])
        state.m[k] = beta1 * state.m[k] + (1.0 - beta1) * g
        state.v[k] = beta2 * state.v[k] + (1.0 - beta2) * g * g
        params[k] -= lr * (state.m[k] / bc1) / (np.sqrt(state.v[k] / bc2) + eps)
    return params


# -- checkpoints -------------------------------------------------------------------------------

@dataclass
class Checkpoint:
    params: dict[str, np.ndarray]
    config: TrainConfig
    schema_hash: str
    kind: str = "gru"
    metadata: dict = field(default_factory=dict)
    calibrator: IsotonicCalibrator | None = None


MAGIC = b"AKICKPT\0"
FORMAT_VERSION = 1


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> None:
    """Magic, version, JSON header (tensor table, schema hash, config, calibrator), float64 LE data."""
    order = PARAM_ORDER if ckpt.kind == "gru" else LOGISTIC_ORDER
    table, blobs, offset = [], [], 0
    for name in order:
        arr = np.ascontiguousarray(ckpt.params[name], dtype="<f8")
        table.append({"name": name, "shape": list(arr.shape), "offset": offset, "count": int(arr.size)})
        blobs.append(arr.tobytes())
        offset += arr.size
    header = {
        "kind": ckpt.kind, "schema_hash": ckpt.schema_hash, "config": asdict(ckpt.config),
        "metadata": ckpt.metadata, "tensors": table,
        "calibrator": None if ckpt.calibrator is None else ckpt.calibrator.to_dict(),
    }
    hb = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IQ", FORMAT_VERSION, len(hb)))
        fh.write(hb)
        for b in blobs:
            fh.write(b)


def load_checkpoint(path: str | Path) -> Checkpoint:
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise ValueError(f"{path} is not a checkpoint file")
    version, hlen = struct.unpack_from("<IQ", raw, 8)
    if version != FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    start = 8 + struct.calcsize("<IQ")
    header = json.loads(raw[start:start + hlen])
    data = np.frombuffer(raw, dtype="<f8", offset=start + hlen)
    params = {t["name"]: data[t["offset"]:t["offset"] + t["count"]].reshape(t["shape"]).astype(float)
              for t in header["tensors"]}
    cal = header.get("calibrator")
    return Checkpoint(params, TrainConfig(**header["config"]), header["schema_hash"], header["kind"],
                      header["metadata"], IsotonicCalibrator.from_dict(cal) if cal else None)


# -- training harness --------------------------------------------------------------------------

class EarlyStopping:
    """Tracks the best validation score; signals a stop after ``patience`` non-improving epochs."""

    def __init__(self, patience: int = 3):
        self.patience = patience
        self.best = -math.inf
        self.best_epoch = 0
        self.bad = 0

    def update(self, epoch: int, score: float) -> bool:
        """Record ``score``; return True when training should stop."""
        if score is not None and not math.isnan(score) and score > self.best:
            self.best, self.best_epoch, self.bad = score, epoch, 0
            return False
        self.bad += 1
        return self.bad >= self.patience


def _fit(params, n_items, batch_grads: Callable, val_score: Callable, config: TrainConfig,
         rng: np.random.Generator, tag: str):
    state = AdamState()
    init_score = val_score(params)
    stopper = EarlyStopping(config.patience)
    best = {k: v.copy() for k, v in params.items()}
    history = []
    epoch = 0
    for epoch in range(1, config.max_epochs + 1):
        order = rng.permutation(n_items)
        losses = []
        for i in range(0, n_items, config.batch_size):
            loss, grads = batch_grads(params, order[i:i + config.batch_size], rng)
            adam_step(params, grads, state, config.learning_rate, config.beta1, config.beta2, config.epsilon)
            losses.append(loss)
        score = val_score(params)
        history.append({"epoch": epoch, "train_loss": float(np.mean(losses)), "val_auprc": score})
        log.info("event=epoch model=%s epoch=%d train_loss=%.6f val_auprc=%s", tag, epoch,
                 float(np.mean(losses)), "nan" if score is None else f"{score:.6f}")
        improved_before = stopper.best_epoch
        stop = stopper.update(epoch, score)
        if stopper.best_epoch != improved_before:
            best = {k: v.copy() for k, v in params.items()}
        if stop:
            break
    meta = {"epochs_run": epoch, "best_epoch": stopper.best_epoch,
            "best_val_auprc": None if stopper.best == -math.inf else stopper.best,
            "init_val_auprc": init_score, "seed": config.seed, "history": history}
    return best, meta


def _auprc_or_nan(scores, labels):
    v = auprc(scores, labels)
    return math.nan if v is None else v


def train(dev: Sequence[EncounterTensor], val: Sequence[EncounterTensor], config: TrainConfig = TrainConfig(),
          schema_hash: str = "") -> Checkpoint:
    if not dev or not val:
        raise ValueError("training needs non-empty development and validation sets")
    if config.overrides():
        log.info("event=train_config_override %s", " ".join(f"{k}={v}" for k, v in config.overrides().items()))
    rng = np.random.default_rng(config.seed)
    d_static, d_dyn = dev[0].static_vec.shape[0], dev[0].steps.shape[1]
    params = init_params(d_static, d_dyn, rng, config.static_hidden, config.hidden, config.head_hidden)
    all_labels = np.concatenate([t.labels for t in dev])
    weights = class_weights(all_labels) if config.class_weighting == "inverse" else (1.0, 1.0)
    val_batch = Batch.from_tensors(val, eval_mask=config.val_eval_mask)
    val_sel = val_batch.mask > 0

    def batch_grads(p, idx, rng_):
        batch = Batch.from_tensors([dev[i] for i in idx])
        return loss_and_grads(p, batch, weights, True, rng_, config.dropout)

    def val_score(p):
        probs, _ = forward(p, val_batch.static, val_batch.steps)
        return _auprc_or_nan(probs[val_sel], val_batch.labels[val_sel])

    best, meta = _fit(params, len(dev), batch_grads, val_score, config, rng, "gru")
    meta["class_weights"] = list(weights)
    return Checkpoint(best, config, schema_hash, "gru", meta)


def _check_hash(ckpt: Checkpoint, tensors: Sequence[EncounterTensor]):
    for t in tensors:
        h = getattr(t, "schema_hash", "")
        if ckpt.schema_hash and h != ckpt.schema_hash:
            raise SchemaMismatchError(
                f"tensor {t.encounter_id} built with schema {h!r}, checkpoint expects {ckpt.schema_hash!r}")


def predict(ckpt: Checkpoint, tensors: Sequence[EncounterTensor], calibrated: bool = True,
            batch_size: int = 256) -> list[np.ndarray]:
    """Per-window risks for each encounter (isotonic-calibrated when a calibrator is attached).

    Logistic checkpoints yield NaN for windows with less than 48 h of history.
    """
    _check_hash(ckpt, tensors)
    out = []
    for i in range(0, len(tensors), batch_size):
        chunk = tensors[i:i + batch_size]
        if ckpt.kind == "logistic":
            for t in chunk:
                r = np.full(t.n_steps, np.nan)
                X, ks = baseline_features(t)
                if len(ks):
                    r[ks] = sigmoid(X @ ckpt.params["w"] + ckpt.params["b"][0])
                out.append(r)
            continue
        b = Batch.from_tensors(chunk)
        p, _ = forward(ckpt.params, b.static, b.steps)
        out.extend(p[j, :t.n_steps].copy() for j, t in enumerate(chunk))
    if calibrated and ckpt.calibrator is not None:
        out = [np.where(np.isnan(r), np.nan, ckpt.calibrator.apply(np.nan_to_num(r))) for r in out]
    return out


# -- logistic baseline -------------------------------------------------------------------------

def baseline_features(t: EncounterTensor, history: int = BASELINE_HISTORY):
    """Rows ``[static | steps k-3..k]`` for windows k with a full 48 h of history."""
    ks = np.arange(history - 1, t.n_steps)
    if not len(ks):
        return np.empty((0, t.static_vec.size + history * t.steps.shape[1])), ks
    rows = [np.concatenate([t.static_vec, t.steps[k - history + 1:k + 1].ravel()]) for k in ks]
    return np.vstack(rows), ks


def logistic_loss_and_grads(params, X, y, weights=(1.0, 1.0), mask=None):
    p = sigmoid(X @ params["w"] + params["b"][0])
    dl = weighted_bce_dlogits(p, y, weights, mask)
    return weighted_bce(p, y, weights, mask), {"w": X.T @ dl, "b": np.array([dl.sum()])}


def train_logistic_baseline(dev: Sequence[EncounterTensor], val: Sequence[EncounterTensor],
                            config: TrainConfig = TrainConfig(), schema_hash: str = "") -> Checkpoint:
    feats = [baseline_features(t) for t in dev]
    keep = [i for i, (X, _) in enumerate(feats) if len(X)]
    if not keep:
        raise ValueError("no development windows with 48 h of history")
    Xs = [feats[i][0] for i in keep]
    ys = [dev[i].labels[feats[i][1]] for i in keep]
    vX, vy, vm = [], [], []
    for t in val:
        X, ks = baseline_features(t)
        if len(ks):
            vX.append(X)
            vy.append(t.labels[ks])
            vm.append(t.eval_mask[ks] if config.val_eval_mask else np.ones(len(ks)))
    if not vX:
        raise ValueError("no validation windows with 48 h of history")
    vX, vy, vm = np.vstack(vX), np.concatenate(vy), np.concatenate(vm) > 0
    rng = np.random.default_rng(config.seed)
    weights = class_weights(np.concatenate(ys)) if config.class_weighting == "inverse" else (1.0, 1.0)
    params = {"w": np.zeros(Xs[0].shape[1]), "b": np.zeros(1)}

    def batch_grads(p, idx, rng_):
        return logistic_loss_and_grads(p, np.vstack([Xs[i] for i in idx]),
                                       np.concatenate([ys[i] for i in idx]), weights)

    def val_score(p):
        return _auprc_or_nan(sigmoid(vX[vm] @ p["w"] + p["b"][0]), vy[vm])

    best, meta = _fit(params, len(Xs), batch_grads, val_score, config, rng, "logistic")
    meta["class_weights"] = list(weights)
    return Checkpoint(best, config, schema_hash, "logistic", meta)
