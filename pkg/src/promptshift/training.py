"""End-to-end joint training of the detector and redirector.

Batches are homogeneous in prompt length (items are bucketed by length and
shuffled within buckets), the pseudo-mask is rebuilt from each batch's paired
embeddings, and the optimizer is decoupled-weight-decay Adam. A checkpoint is
written whenever validation accuracy is at least the best seen so far.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from dataclasses import dataclass, field

import numpy as np

from .config import AblationFlags, ModelConfig, TrainConfig, _dataclass_from_dict
from .errors import FormatError
from .heads import decide
from .layers import Param
from .losses import total_loss
from .model import RedirectorModel
from .redirection import build_pseudo_mask
from .world import SynthDataset

CKPT_MAGIC = b"SRC1"
CKPT_VERSION = 1


class AdamW:
    """Adam with decoupled weight decay."""

    def __init__(self, params: list[Param], lr: float, weight_decay: float,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.weight_decay = weight_decay
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.m = [np.zeros_like(p.value) for p in params]
        self.v = [np.zeros_like(p.value) for p in params]

    def step(self) -> None:
        self.step_count += 1
        b1, b2 = self.beta1, self.beta2
        bc1 = 1.0 - b1 ** self.step_count
        bc2 = 1.0 - b2 ** self.step_count
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            p.value -= self.lr * (update + self.weight_decay * p.value)


@dataclass
class Checkpoint:
    version: int
    model_config: ModelConfig
    train_config: TrainConfig
    param_names: list[str]
    param_values: list[np.ndarray]
    best_val_acc: float
    epoch: int
    rng_state: dict

    def build_model(self) -> RedirectorModel:
        model = RedirectorModel(self.model_config, np.random.default_rng(0),
                                ablations=self.train_config.ablations)
        named = dict(model.named_parameters())
        if list(named.keys()) != self.param_names:
            raise FormatError("checkpoint parameter manifest does not match model layout")
        for name, value in zip(self.param_names, self.param_values):
            p = named[name]
            if p.value.shape != value.shape:
                raise FormatError(f"checkpoint param {name}: shape {value.shape} != {p.value.shape}")
            p.value[...] = value
        return model


def _config_jsonable(cfg) -> dict:
    import dataclasses as dc
    out = {}
    for f in dc.fields(cfg):
        v = getattr(cfg, f.name)
        if dc.is_dataclass(v):
            out[f.name] = _config_jsonable(v)
        elif isinstance(v, tuple):
            out[f.name] = list(v)
        else:
            out[f.name] = v
    return out


def save_checkpoint(ckpt: Checkpoint, path: str) -> None:
    train_cfg = _config_jsonable(ckpt.train_config)
    train_cfg.pop("loss", None)
    loss_cfg = _config_jsonable(ckpt.train_config.loss)
    header = {
        "version": ckpt.version,
        "model_config": _config_jsonable(ckpt.model_config),
        "train_config": train_cfg,
        "loss_config": loss_cfg,
        "best_val_acc": ckpt.best_val_acc,
        "epoch": ckpt.epoch,
        "rng_state": ckpt.rng_state,
        "params": [{"name": n, "shape": list(v.shape), "dtype": str(v.dtype)}
                   for n, v in zip(ckpt.param_names, ckpt.param_values)],
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for v in ckpt.param_values:
            fh.write(np.ascontiguousarray(v).tobytes())
    os.replace(tmp, path)


def load_checkpoint(path: str) -> Checkpoint:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 8 or blob[:4] != CKPT_MAGIC:
        raise FormatError(f"{path}: not a checkpoint file (bad magic)")
    (header_len,) = struct.unpack("<I", blob[4:8])
    if len(blob) < 8 + header_len:
        raise FormatError(f"{path}: truncated header")
    try:
        header = json.loads(blob[8 : 8 + header_len].decode("utf-8"))
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise FormatError(f"{path}: corrupt header: {exc}") from exc
    if header.get("version") != CKPT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {header.get('version')}")

    model_config = _dataclass_from_dict(ModelConfig, header["model_config"], "model_config")
    train_config = _dataclass_from_dict(TrainConfig, header["train_config"], "train_config")
    from .config import LossWeights
    train_config.loss = _dataclass_from_dict(LossWeights, header["loss_config"], "loss_config")

    offset = 8 + header_len
    names, values = [], []
    for spec in header["params"]:
        dtype = np.dtype(spec["dtype"])
        shape = tuple(spec["shape"])
        nbytes = dtype.itemsize * int(np.prod(shape)) if shape else dtype.itemsize
        chunk = blob[offset : offset + nbytes]
        if len(chunk) != nbytes:
            raise FormatError(f"{path}: truncated param {spec['name']}")
        names.append(spec["name"])
        values.append(np.frombuffer(chunk, dtype=dtype).reshape(shape).copy())
        offset += nbytes
    if offset != len(blob):
        raise FormatError(f"{path}: {len(blob) - offset} trailing bytes")
    return Checkpoint(version=header["version"], model_config=model_config,
                      train_config=train_config, param_names=names, param_values=values,
                      best_val_acc=header["best_val_acc"], epoch=header["epoch"],
                      rng_state=header["rng_state"])


@dataclass
class EpochLog:
    epoch: int
    terms: dict
    val_acc: float
    saved: bool


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    log: list[EpochLog] = field(default_factory=list)
    loss_curve_hash: str = ""
    stopped_early: bool = False


def length_bucketed_batches(dataset: SynthDataset, indices: np.ndarray, batch_size: int,
                            rng: np.random.Generator) -> list[np.ndarray]:
    lengths = dataset.arrays["length"][np.asarray(indices) // dataset.config.total_steps]
    batches = []
    for length in np.unique(lengths):
        bucket = np.asarray(indices)[lengths == length]
        rng.shuffle(bucket)
        for start in range(0, len(bucket), batch_size):
            batches.append(bucket[start : start + batch_size])
    order = rng.permutation(len(batches))
    return [batches[i] for i in order]


def make_checkpoint(model: RedirectorModel, train_config: TrainConfig, best_acc: float,
                    epoch: int, rng: np.random.Generator) -> Checkpoint:
    named = model.named_parameters()
    return Checkpoint(
        version=CKPT_VERSION,
        model_config=model.cfg,
        train_config=train_config,
        param_names=[n for n, _ in named],
        param_values=[p.value.copy() for _, p in named],
        best_val_acc=best_acc,
        epoch=epoch,
        rng_state=json.loads(json.dumps(rng.bit_generator.state)),
    )


class NonFiniteLoss(RuntimeError):
    def __init__(self, epoch: int, batch_index: int, breakdown: dict):
        self.epoch = epoch
        self.batch_index = batch_index
        self.breakdown = breakdown
        super().__init__(
            f"non-finite loss at epoch {epoch}, batch {batch_index}: {breakdown}")


def train(config: TrainConfig, dataset: SynthDataset, train_idx: np.ndarray,
          val_idx: np.ndarray, model_config: ModelConfig | None = None,
          out_dir: str | None = None, log_fn=None) -> TrainResult:
    model_config = model_config or ModelConfig()
    init_rng = np.random.default_rng([config.seed, 1])
    batch_rng = np.random.default_rng([config.seed, 2])
    drop_rng = np.random.default_rng([config.seed, 3])

    model = RedirectorModel(model_config, init_rng, ablations=config.ablations)
    opt = AdamW(model.parameters(), config.learning_rate, config.weight_decay,
                config.beta1, config.beta2, config.adam_eps)
    weights = config.effective_loss()
    tau = dataset.config.tau

    best_acc = -1.0
    best_ckpt = None
    log: list[EpochLog] = []
    curve = hashlib.sha256()
    since_improve = 0
    stopped = False

    for epoch in range(1, config.epochs + 1):
        batches = length_bucketed_batches(dataset, train_idx, config.batch_size, batch_rng)
        sums = {}
        count = 0
        for bi, batch_idx in enumerate(batches):
            batch = dataset.batch(batch_idx)
            m_star = build_pseudo_mask(batch["emb_safe"], batch["emb_unsafe"], tau)
            m_star = m_star * (batch["label"][:, None] == 1)
            state = model.forward(batch["z"], batch["t"], batch["p_emb"],
                                  training=True, rng=drop_rng)
            total, breakdown, grads = total_loss(
                batch["label"], batch["p_emb"], batch["emb_safe"], batch["emb_unsafe"],
                m_star, state.output, weights)
            if not np.isfinite(total):
                raise NonFiniteLoss(epoch, bi, breakdown)
            curve.update(struct.pack("<d", float(total)))
            model.zero_grad()
            model.backward(grads["d_logits"].astype(model.dtype),
                           grads["d_delta"].astype(model.dtype),
                           grads["d_mask"].astype(model.dtype),
                           grads["d_alpha"].astype(model.dtype))
            opt.step()
            for k, v in breakdown.items():
                sums[k] = sums.get(k, 0.0) + float(v)
            count += 1

        terms = {k: v / max(count, 1) for k, v in sums.items()}
        val_acc = evaluate(model, dataset, val_idx)["cls_accuracy"]
        saved = val_acc >= best_acc
        if saved:
            best_acc = val_acc
            best_ckpt = make_checkpoint(model, config, best_acc, epoch, batch_rng)
            if out_dir is not None:
                save_checkpoint(best_ckpt, os.path.join(out_dir, "model.ckpt"))
            since_improve = 0
        else:
            since_improve += 1
        entry = EpochLog(epoch=epoch, terms=terms, val_acc=val_acc, saved=saved)
        log.append(entry)
        if log_fn is not None:
            log_fn(entry)
        if config.stop_at_val_acc is not None and val_acc >= config.stop_at_val_acc:
            stopped = True
            break
        if since_improve >= config.patience:
            stopped = True
            break

    return TrainResult(checkpoint=best_ckpt, log=log,
                       loss_curve_hash=curve.hexdigest(), stopped_early=stopped)


def evaluate(model_or_ckpt, dataset: SynthDataset, indices: np.ndarray,
             batch_size: int = 1024) -> dict:
    """Classifier accuracy plus redirection quality metrics on one split.

    mask_f1 scores predicted masks (threshold 0.5) against planted positions
    on unsafe items; delta_cosine is the mean per-token cosine between the
    predicted shift and the paired embedding shift at planted positions.
    """
    model = model_or_ckpt.build_model() if isinstance(model_or_ckpt, Checkpoint) else model_or_ckpt
    rng = np.random.default_rng(0)
    correct = 0
    tp = fp = fn = 0
    cos_sum = 0.0
    cos_n = 0
    alpha_sum = 0.0
    alpha_n = 0

    for batch_idx in length_bucketed_batches(dataset, indices, batch_size, rng):
        batch = dataset.batch(batch_idx)
        state = model.forward(batch["z"], batch["t"], batch["p_emb"], training=False)
        out = state.output
        pred = decide(out.logits, tie_unsafe=model.cfg.tie_unsafe)
        correct += int(np.sum(pred == batch["label"]))

        unsafe = batch["label"] == 1
        if np.any(unsafe):
            m_true = batch["m_star"][unsafe] > 0.5
            m_pred = out.mask[unsafe] >= 0.5
            tp += int(np.sum(m_pred & m_true))
            fp += int(np.sum(m_pred & ~m_true))
            fn += int(np.sum(~m_pred & m_true))

            shift = batch["emb_safe"][unsafe] - batch["emb_unsafe"][unsafe]
            delta = out.delta[unsafe]
            dot = np.sum(delta * shift, axis=-1)
            nd = np.maximum(np.linalg.norm(delta, axis=-1), 1e-8)
            ns = np.maximum(np.linalg.norm(shift, axis=-1), 1e-8)
            cos = dot / (nd * ns)
            sel = batch["m_star"][unsafe] > 0.5
            cos_sum += float(np.sum(cos[sel]))
            cos_n += int(np.sum(sel))

        alpha_sum += float(np.sum(out.alpha))
        alpha_n += out.alpha.size

    denom_f1 = 2 * tp + fp + fn
    return {
        "cls_accuracy": correct / max(len(indices), 1),
        "mask_f1": (2 * tp / denom_f1) if denom_f1 > 0 else 1.0,
        "delta_cosine": cos_sum / max(cos_n, 1),
        "alpha_mean": alpha_sum / max(alpha_n, 1),
    }
