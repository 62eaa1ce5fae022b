"""Task2Vec embeddings from a frozen probe network.

A batch is embedded by fitting a fresh linear head on top of the frozen
probe features and then taking the diagonal of the Fisher information of
the feature-extractor parameters.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import nn
from .errors import ContractError, NumericError, TrainingError
from .params import ParamVector, grad

LABEL_MODES = ("sampled", "empirical")


@dataclass(frozen=True)
class ProbeTrainConfig:
    hidden: tuple = (64, 64)
    lr: float = 0.1
    batch_size: int = 64
    min_epochs: int = 10
    max_epochs: int = 200
    target_accuracy: float = 0.9
    seed: int = 0


@dataclass(frozen=True)
class ProbeNetwork:
    feature_params: ParamVector = field(repr=False)
    arch_spec: tuple
    probe_id: str
    meta: dict = field(default_factory=dict, compare=False)

    @classmethod
    def from_params(cls, feature_params, meta=None):
        arch = _arch_from_params(feature_params)
        return cls(feature_params, arch, feature_params.content_hash(), dict(meta or {}))

    @property
    def feature_width(self):
        return self.arch_spec[-1]

    def features(self, x):
        with ad.no_grad():
            return nn.backbone_forward(self.feature_params, x).data

    def fresh_head(self, n_way):
        """Head initialisation shared by every batch with the same width."""
        digest = hashlib.sha256(f"{self.probe_id}:{n_way}".encode()).digest()
        rng = np.random.default_rng(int.from_bytes(digest[:8], "little"))
        return nn.init_head(self.feature_width, n_way, rng)

    def save(self, stem):
        """Write ``<stem>.dvpv`` (weights) and ``<stem>.json`` (metadata)."""
        self.feature_params.save(f"{stem}.dvpv")
        meta = {"arch_spec": list(self.arch_spec), "probe_id": self.probe_id, **self.meta}
        with open(f"{stem}.json", "w") as fh:
            json.dump(meta, fh, indent=2, sort_keys=True)

    @classmethod
    def load(cls, stem):
        params = ParamVector.load(f"{stem}.dvpv")
        meta = {}
        if os.path.exists(f"{stem}.json"):
            with open(f"{stem}.json") as fh:
                meta = json.load(fh)
        meta = {k: v for k, v in meta.items() if k not in ("arch_spec", "probe_id")}
        return cls.from_params(params, meta)


def _arch_from_params(backbone):
    widths = [backbone.slot("w0").shape[0]]
    for i in range(nn.n_layers(backbone)):
        widths.append(backbone.slot(f"w{i}").shape[1])
    return tuple(widths)


@dataclass(frozen=True)
class Task2VecEmbedding:
    fim_diag: np.ndarray = field(repr=False)
    probe_id: str
    batch_id: str
    label_mode: str

    def __len__(self):
        return self.fim_diag.size


def _accuracy(backbone, head, x, y):
    return float(np.mean(nn.predict(backbone, head, x) == y))


def pretrain_probe(meta_dataset, config=ProbeTrainConfig()):
    """Train the probe on a held-out dataset, then freeze its feature layers.

    ``meta_dataset`` is a DatasetHandle or an ``(x, y)`` pair.
    """
    if isinstance(meta_dataset, tuple):
        x, y = (np.asarray(a) for a in meta_dataset)
        name = "arrays"
    else:
        x, y = meta_dataset.flat()
        name = meta_dataset.dataset_id
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    n_classes = int(y.max()) + 1 if y.size else 0
    if len(np.unique(y)) < 2:
        raise ContractError("degenerate label space: probe pretraining needs at least 2 classes")
    rng = np.random.default_rng(config.seed)
    backbone = nn.init_backbone((x.shape[1], *config.hidden), rng)
    head = nn.init_head(config.hidden[-1], n_classes, rng)
    acc = 0.0
    for epoch in range(config.max_epochs):
        order = rng.permutation(len(y))
        for start in range(0, len(y), config.batch_size):
            idx = order[start : start + config.batch_size]
            bb, hd = backbone.tracked(), head.tracked()
            loss = ad.cross_entropy(nn.logits(bb, hd, x[idx]), y[idx])
            if not np.isfinite(loss.data):
                raise NumericError(f"probe loss became {loss.item()} in epoch {epoch}", step=epoch)
            g_bb, g_hd = ad.backward(loss, [bb.node, hd.node])
            backbone = backbone.replace(backbone.values - config.lr * g_bb.data)
            head = head.replace(head.values - config.lr * g_hd.data)
        acc = _accuracy(backbone, head, x, y)
        if epoch + 1 >= config.min_epochs and acc >= config.target_accuracy:
            break
    if acc < config.target_accuracy:
        raise TrainingError(
            f"probe reached {acc:.3f} train accuracy after {config.max_epochs} epochs; "
            f"target {config.target_accuracy}",
            achieved=acc,
        )
    meta = {"meta_dataset": name, "train_accuracy": acc, "epochs": epoch + 1, "seed": config.seed}
    return ProbeNetwork.from_params(backbone, meta)


def finetune_head(probe, batch, steps=100, lr=0.01, rows="all"):
    """Fit a fresh ``n_way`` head on frozen probe features by full-batch GD."""
    x, y = _batch_rows(batch, rows)
    feats = ad.Tensor(probe.features(x))
    head = probe.fresh_head(batch.n_way)
    for step in range(steps):
        tracked = head.tracked()
        loss = ad.cross_entropy(nn.head_forward(tracked, feats), y)
        if not np.isfinite(loss.data):
            raise NumericError(f"head fine-tune loss {loss.item()} at step {step}", step=step,
                               value=loss.item())
        head = head.replace(head.values - lr * grad(loss, tracked).values)
    return head


def head_loss(probe, head, batch, rows="all"):
    x, y = _batch_rows(batch, rows)
    with ad.no_grad():
        return ad.cross_entropy(nn.head_forward(head, ad.Tensor(probe.features(x))), y).item()


def _batch_rows(batch, rows):
    if rows == "all":
        x, y = batch.x, batch.y
    elif rows == "support":
        x, y = batch.support_x, batch.support_y
    else:
        raise ContractError(f"rows must be 'all' or 'support', got {rows!r}")
    if len(y) == 0:
        raise ContractError(f"batch {batch.batch_id} is empty")
    return np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.int64)


def fim_diagonal(probe, head, batch, label_mode="sampled", mc_draws=8, seed=0, rows="all"):
    """Diagonal Fisher information over the probe's feature parameters.

    Entry j is the mean over samples (and label draws) of the squared score
    ``d log p(y|x) / d theta_j``. Per-sample scores come from one backward
    pass to the pre-activations: for a dense layer the per-sample weight
    score is the outer product of the layer input and the pre-activation
    gradient, so its square is ``input**2 (x) delta**2``.
    """
    if label_mode not in LABEL_MODES:
        raise ContractError(f"label_mode must be one of {LABEL_MODES}, got {label_mode!r}")
    x, y = _batch_rows(batch, rows)
    if label_mode == "sampled":
        if mc_draws < 1:
            raise ContractError("mc_draws must be >= 1 when label_mode='sampled'")
        with ad.no_grad():
            logp = ad.log_softmax(nn.logits(probe.feature_params, head, x)).data
        probs = np.exp(logp)
        rng = np.random.default_rng(seed)
        u = rng.random((mc_draws, len(x), 1))
        draws = (u > np.cumsum(probs, axis=1)[None]).sum(axis=2)
        draws = np.minimum(draws, probs.shape[1] - 1)
        x = np.tile(x, (mc_draws, 1))
        y = draws.reshape(-1)
    return _fim_from_rows(probe, head, x, y, batch.batch_id, label_mode)


def _fim_from_rows(probe, head, x, y, batch_id, label_mode):
    feats, preacts = nn.backbone_forward(probe.feature_params.tracked(), ad.Tensor(x),
                                         return_preacts=True)
    logp = ad.log_softmax(nn.head_forward(head, feats))
    score = ad.sum_(ad.mul(logp, ad.Tensor(ad.one_hot(y, logp.shape[1]))))
    deltas = ad.backward(score, preacts)
    n = len(y)
    inputs = [x] + [np.maximum(z.data, 0.0) for z in preacts[:-1]]
    blocks = []
    for a, d in zip(inputs, deltas):
        d2 = d.data * d.data
        blocks.append(((a * a).T @ d2 / n).reshape(-1))
        blocks.append(d2.mean(axis=0))
    diag = np.concatenate(blocks)
    return Task2VecEmbedding(diag, probe.probe_id, batch_id, label_mode)


def embed(probe, batch, label_mode="sampled", mc_draws=8, seed=0, finetune_steps=100,
          finetune_lr=0.01, rows="all"):
    """Fine-tune a head on ``batch`` then return its Task2Vec embedding."""
    head = finetune_head(probe, batch, finetune_steps, finetune_lr, rows)
    return fim_diagonal(probe, head, batch, label_mode, mc_draws, seed, rows)
