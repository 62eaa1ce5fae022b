"""Pre-training and MAML (first- and higher-order) learners on MLP backbones."""

from __future__ import annotations

import json
import os
import struct
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import autodiff as ad
from . import nn
from .analysis import confidence_interval
from .errors import (
    ContractError,
    DivergenceError,
    FormatError,
    LabelError,
    SizeMismatchError,
    WrongAlgorithmError,
)
from .params import ParamVector
from .tasks import sample_batch

ALGORITHMS = ("PT", "FO-MAML", "HO-MAML")


@dataclass(frozen=True)
class LearnerConfig:
    algorithm: str = "HO-MAML"
    inner_steps: int = 5
    inner_lr: float = 1e-1
    outer_lr: float = 1e-3
    n_way: int = 5
    k_shot: int = 5
    q_size: int = 15
    meta_batch_size: int = 4
    total_outer_steps: int = 100
    pt_batch_size: int = 100
    hidden: tuple = (64, 64)
    head_init_std: float = 0.01
    outer_optimizer: str = "adam"
    seed: int = 0

    def __post_init__(self):
        if self.algorithm not in ALGORITHMS:
            raise ContractError(f"algorithm must be one of {ALGORITHMS}, got {self.algorithm!r}")
        if self.inner_steps < 0:
            raise ContractError("inner_steps must be >= 0")
        if not (self.inner_lr >= 0 and self.outer_lr > 0):
            raise ContractError("learning rates must be positive")
        if self.outer_optimizer not in ("adam", "sgd"):
            raise ContractError(f"outer_optimizer must be 'adam' or 'sgd', got {self.outer_optimizer!r}")
        object.__setattr__(self, "hidden", tuple(self.hidden))

    @property
    def label(self):
        if self.algorithm == "PT":
            return "PT"
        order = "FO" if self.algorithm == "FO-MAML" else "HO"
        return f"{order} MAML {self.inner_steps}"

    def to_dict(self):
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def default_grid(**overrides):
    """The five configurations compared in the study: PT, FO/HO MAML with 5 and 10 steps."""
    grid = [LearnerConfig(algorithm="PT", inner_steps=10)]
    for algo in ("FO-MAML", "HO-MAML"):
        for steps in (5, 10):
            grid.append(LearnerConfig(algorithm=algo, inner_steps=steps))
    return [replace(c, **overrides) for c in grid]


@dataclass(frozen=True)
class LearnerModel:
    backbone: ParamVector = field(repr=False)
    head: ParamVector = field(repr=False)

    @property
    def arch_spec(self):
        widths = [self.backbone.slot("w0").shape[0]]
        widths += [self.backbone.slot(f"w{i}").shape[1] for i in range(nn.n_layers(self.backbone))]
        return tuple(widths) + (self.head.slot("w").shape[1],)

    @property
    def params(self):
        return (self.backbone, self.head)

    def logits(self, x):
        return nn.logits(self.backbone, self.head, x)

    def detached(self):
        return LearnerModel(self.backbone.detached(), self.head.detached())

    def __eq__(self, other):
        return (isinstance(other, LearnerModel) and self.backbone == other.backbone
                and self.head == other.head)


def init_model(config, input_dim, n_out, seed=None):
    rng = np.random.default_rng(config.seed if seed is None else seed)
    backbone = nn.init_backbone((input_dim, *config.hidden), rng)
    head = nn.init_head(config.hidden[-1], n_out, rng, std=config.head_init_std)
    return LearnerModel(backbone, head)


# ---------------------------------------------------------------- generic adaptation


def _split_flat(flat, layouts):
    """ParamVector views over consecutive pieces of one flat tensor."""
    out, start = [], 0
    for layout in layouts:
        size = sum(slot.size for slot in layout)
        piece = flat if len(layouts) == 1 else ad.take(flat, slice(start, start + size))
        out.append(ParamVector.from_tensor(piece, layout))
        start += size
    return tuple(out)


def adapt(params, loss_fn, steps, lr, track_higher_order=False):
    """``steps`` gradient-descent updates of ``params`` (a tuple of ParamVectors).

    With ``track_higher_order`` the inputs must be tracked and every update
    stays in the autodiff graph, so the result is differentiable w.r.t. them.
    """
    params = tuple(params)
    if steps < 0:
        raise ContractError("steps must be >= 0")
    if track_higher_order and any(p.node is None for p in params):
        raise ContractError("track_higher_order needs tracked params")
    if steps == 0:
        return params
    layouts = [p.layout for p in params]
    if track_higher_order:
        flat = params[0].node if len(params) == 1 else ad.concat([p.node for p in params])
    else:
        flat = np.concatenate([p.values for p in params])
    for step in range(steps):
        node = flat if track_higher_order else ad.Tensor(flat, requires_grad=True)
        loss = loss_fn(*_split_flat(node, layouts))
        if not np.isfinite(loss.data):
            raise DivergenceError(f"inner loss {loss.item()} at step {step}", step=step,
                                  value=loss.item())
        (g,) = ad.backward(loss, [node], create_graph=track_higher_order)
        if track_higher_order:
            flat = ad.sub(flat, ad.scale(g, lr))
        else:
            flat = flat - lr * g.data
    if track_higher_order:
        return _split_flat(flat, layouts)
    out, start = [], 0
    for p in params:
        out.append(p.replace(flat[start : start + len(p)]))
        start += len(p)
    return tuple(out)


def meta_gradient(params, support_fn, query_fn, steps, lr, first_order):
    """Gradient of the post-adaptation query loss w.r.t. the initial ``params``.

    First order evaluates the query gradient at the adapted point and uses it
    as is; higher order differentiates through every inner update.
    Returns ``(grads, query_loss)`` with grads as flat arrays per ParamVector.
    """
    params = tuple(params)
    if first_order:
        adapted = tuple(p.tracked() for p in adapt(params, support_fn, steps, lr, False))
        loss = query_fn(*adapted)
        grads = ad.backward(loss, [p.node for p in adapted])
    else:
        tracked = tuple(p.tracked() for p in params)
        adapted = adapt(tracked, support_fn, steps, lr, True)
        loss = query_fn(*adapted)
        grads = ad.backward(loss, [p.node for p in tracked])
    if not np.isfinite(loss.data):
        raise DivergenceError(f"query loss {loss.item()} after adaptation", value=loss.item())
    return [g.data for g in grads], loss.item()


def _ce_fn(x, y):
    x = ad.Tensor(np.asarray(x, dtype=np.float64))
    y = np.asarray(y, dtype=np.int64)
    return lambda backbone, head: ad.cross_entropy(nn.logits(backbone, head, x), y)


# ---------------------------------------------------------------- learner ops


def inner_adapt(model, support_x, support_y, steps, inner_lr, track_higher_order=False):
    """Adapt every parameter of ``model`` to a support set by full-batch GD."""
    params = model.params
    if track_higher_order:
        params = tuple(p if p.node is not None else p.tracked() for p in params)
    bb, hd = adapt(params, _ce_fn(support_x, support_y), steps, inner_lr, track_higher_order)
    return LearnerModel(bb, hd)


def _episode_meta_grad(model, batch, config):
    return meta_gradient(
        model.params,
        _ce_fn(batch.support_x, batch.support_y),
        _ce_fn(batch.query_x, batch.query_y),
        config.inner_steps,
        config.inner_lr,
        first_order=config.algorithm == "FO-MAML",
    )


@dataclass
class AdamState:
    """Outer-loop Adam moments, laid out like a LearnerModel."""

    t: int
    m: LearnerModel
    v: LearnerModel
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, model):
        z = LearnerModel(model.backbone.replace(np.zeros(len(model.backbone))),
                         model.head.replace(np.zeros(len(model.head))))
        return cls(0, z, z)


def outer_update(model, grads, config, opt=None):
    """Apply one outer-loop update; ``opt`` (an AdamState) is advanced in place."""
    g_bb, g_hd = grads
    if config.outer_optimizer == "sgd":
        return LearnerModel(model.backbone.replace(model.backbone.values - config.outer_lr * g_bb),
                            model.head.replace(model.head.values - config.outer_lr * g_hd))
    if opt is None:
        opt = AdamState.zeros_like(model)
    opt.t += 1
    new_params, new_m, new_v = [], [], []
    for p, g, m, v in zip(model.params, (g_bb, g_hd), opt.m.params, opt.v.params):
        m1 = opt.beta1 * m.values + (1 - opt.beta1) * g
        v1 = opt.beta2 * v.values + (1 - opt.beta2) * g * g
        m_hat = m1 / (1 - opt.beta1**opt.t)
        v_hat = v1 / (1 - opt.beta2**opt.t)
        new_params.append(p.replace(p.values - config.outer_lr * m_hat / (np.sqrt(v_hat) + opt.eps)))
        new_m.append(m.replace(m1))
        new_v.append(v.replace(v1))
    opt.m, opt.v = LearnerModel(*new_m), LearnerModel(*new_v)
    return LearnerModel(*new_params)


def maml_meta_grads(model, episodes, config):
    """Mean meta-gradient over ``episodes`` and the mean post-adaptation query loss."""
    if config.algorithm not in ("FO-MAML", "HO-MAML"):
        raise WrongAlgorithmError(f"MAML step needs a MAML config, got {config.algorithm}")
    if not episodes:
        raise ContractError("episodes must be non-empty")
    total_bb = np.zeros(len(model.backbone))
    total_hd = np.zeros(len(model.head))
    losses = []
    for batch in episodes:
        (g_bb, g_hd), loss = _episode_meta_grad(model, batch, config)
        total_bb += g_bb
        total_hd += g_hd
        losses.append(loss)
    n = len(episodes)
    return (total_bb / n, total_hd / n), float(np.mean(losses))


def maml_meta_step(model, episodes, config, opt=None):
    """One outer update of the initialisation from ``episodes``."""
    grads, _ = maml_meta_grads(model, episodes, config)
    return outer_update(model, grads, config, opt)


def pretrain_grads(model, x, y):
    y = np.asarray(y, dtype=np.int64)
    width = model.head.slot("w").shape[1]
    if y.size and (y.min() < 0 or y.max() >= width):
        raise LabelError(f"labels must lie in [0, {width}), got range [{y.min()}, {y.max()}]")
    bb, hd = model.backbone.tracked(), model.head.tracked()
    loss = ad.cross_entropy(nn.logits(bb, hd, ad.Tensor(np.asarray(x, dtype=np.float64))), y)
    if not np.isfinite(loss.data):
        raise DivergenceError(f"pre-training loss {loss.item()}", value=loss.item())
    g_bb, g_hd = ad.backward(loss, [bb.node, hd.node])
    return (g_bb.data, g_hd.data), loss.item()


def pretrain_step(model, x, y, lr):
    """One plain cross-entropy gradient step on backbone and all-class head."""
    (g_bb, g_hd), _ = pretrain_grads(model, x, y)
    return LearnerModel(model.backbone.replace(model.backbone.values - lr * g_bb),
                        model.head.replace(model.head.values - lr * g_hd))


# ---------------------------------------------------------------- training loop


@dataclass
class Checkpoint:
    model: LearnerModel
    outer_step: int
    dataset_id: str
    config: LearnerConfig
    metrics: list = field(default_factory=list)  # (step, train loss)
    extra: dict = field(default_factory=dict)
    opt: AdamState = None

    MAGIC = b"DVCK"
    VERSION = 1

    def to_bytes(self):
        meta = {
            "config": self.config.to_dict(),
            "outer_step": self.outer_step,
            "dataset_id": self.dataset_id,
            "metrics": [[int(s), float(v)] for s, v in self.metrics],
            "rng": {"scheme": "per-step seeds [seed, step, episode]", "next_step": self.outer_step},
            "adam_t": None if self.opt is None else self.opt.t,
            **self.extra,
        }
        meta_b = json.dumps(meta, sort_keys=True).encode("utf-8")
        vecs = list(self.model.params)
        if self.opt is not None:
            vecs += list(self.opt.m.params) + list(self.opt.v.params)
        blocks = [v.to_bytes() for v in vecs]
        out = [self.MAGIC, struct.pack("<II", self.VERSION, len(meta_b)), meta_b,
               struct.pack("<I", len(blocks))]
        for b in blocks:
            out += [struct.pack("<Q", len(b)), b]
        return b"".join(out)

    @classmethod
    def from_bytes(cls, buf):
        buf = bytes(buf)
        if buf[:4] != cls.MAGIC:
            raise FormatError(f"bad checkpoint magic {buf[:4]!r}")
        if len(buf) < 12:
            raise SizeMismatchError(12, len(buf), "checkpoint header")
        version, mlen = struct.unpack_from("<II", buf, 4)
        if version != cls.VERSION:
            raise FormatError(f"unsupported checkpoint version {version}")
        pos = 12
        meta = json.loads(buf[pos : pos + mlen].decode("utf-8"))
        pos += mlen
        (count,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        blocks = []
        for _ in range(count):
            (n,) = struct.unpack_from("<Q", buf, pos)
            pos += 8
            if pos + n > len(buf):
                raise SizeMismatchError(pos + n, len(buf), "checkpoint block")
            blocks.append(ParamVector.from_bytes(buf[pos : pos + n]))
            pos += n
        if pos != len(buf):
            raise SizeMismatchError(pos, len(buf), "checkpoint")
        config = LearnerConfig.from_dict(meta.pop("config"))
        opt = None
        if meta.get("adam_t") is not None:
            opt = AdamState(meta["adam_t"], LearnerModel(*blocks[2:4]), LearnerModel(*blocks[4:6]))
        extra = {k: v for k, v in meta.items()
                 if k not in ("outer_step", "dataset_id", "metrics", "rng", "adam_t")}
        return cls(LearnerModel(*blocks[:2]), meta["outer_step"], meta["dataset_id"], config,
                   [tuple(m) for m in meta["metrics"]], extra, opt)

    def save(self, path):
        tmp = f"{path}.tmp"
        with open(tmp, "wb") as fh:
            fh.write(self.to_bytes())
        os.replace(tmp, path)

    @classmethod
    def load(cls, path):
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read())


def new_checkpoint(dataset, config, extra=None):
    n_out = dataset.class_count if config.algorithm == "PT" else config.n_way
    model = init_model(config, dataset.feature_dim, n_out)
    opt = AdamState.zeros_like(model) if config.outer_optimizer == "adam" else None
    return Checkpoint(model, 0, dataset.dataset_id, config, [], dict(extra or {}), opt)


def train(ckpt, dataset, until, on_step=None):
    """Advance ``ckpt`` on ``dataset`` up to outer step ``until``.

    Every step draws its data from seeds ``[config.seed, step, ...]`` only, so
    stopping and resuming from a checkpoint reproduces an uninterrupted run.
    """
    config = ckpt.config
    model, metrics = ckpt.model, list(ckpt.metrics)
    opt = None
    if ckpt.opt is not None:
        opt = AdamState(ckpt.opt.t, ckpt.opt.m, ckpt.opt.v)
    if config.algorithm == "PT":
        x_all, y_all = dataset.flat()
    for step in range(ckpt.outer_step, until):
        if config.algorithm == "PT":
            rng = np.random.default_rng([config.seed, step])
            idx = rng.choice(len(y_all), size=min(config.pt_batch_size, len(y_all)), replace=False)
            grads, loss = pretrain_grads(model, x_all[idx], y_all[idx])
        else:
            episodes = [sample_batch(dataset, config.n_way, config.k_shot, config.q_size,
                                     [config.seed, step, e])
                        for e in range(config.meta_batch_size)]
            grads, loss = maml_meta_grads(model, episodes, config)
        model = outer_update(model, grads, config, opt)
        metrics.append((step, loss))
        if on_step is not None:
            on_step(step, loss)
    return Checkpoint(model, max(ckpt.outer_step, until), ckpt.dataset_id, config, metrics,
                      dict(ckpt.extra), opt)


# ---------------------------------------------------------------- evaluation


@dataclass(frozen=True)
class EvalResult:
    accuracy: float
    ce_loss: float
    ci_acc: float
    num_episodes: int
    episode_acc: np.ndarray = field(default=None, repr=False, compare=False)
    episode_loss: np.ndarray = field(default=None, repr=False, compare=False)


def adapt_for_episode(model, batch, config):
    """Per-episode adaptation used at evaluation time.

    PT: fresh zero head, backbone frozen, head-only steps. MAML: every
    parameter adapted exactly as in the inner loop.
    """
    if config.algorithm == "PT":
        feats = ad.Tensor(nn.backbone_forward(model.backbone.detached(),
                                              ad.Tensor(batch.support_x)).data)
        y = np.asarray(batch.support_y)
        head = ParamVector.from_arrays({"w": np.zeros((feats.shape[1], batch.n_way)),
                                        "b": np.zeros(batch.n_way)})
        (head,) = adapt((head,), lambda h: ad.cross_entropy(nn.head_forward(h, feats), y),
                        config.inner_steps, config.inner_lr)
        return LearnerModel(model.backbone, head)
    return inner_adapt(model.detached(), batch.support_x, batch.support_y, config.inner_steps,
                       config.inner_lr)


def evaluate(model, dataset, config, num_episodes, seed):
    """Mean query accuracy, mean query cross-entropy (nats) and 95% CI of accuracy."""
    if num_episodes < 1:
        raise ContractError("num_episodes must be >= 1")
    accs, losses = [], []
    for i in range(num_episodes):
        batch = sample_batch(dataset, config.n_way, config.k_shot, config.q_size, [seed, i])
        adapted = adapt_for_episode(model, batch, config)
        with ad.no_grad():
            logits = adapted.logits(ad.Tensor(batch.query_x))
            losses.append(ad.cross_entropy(logits, batch.query_y).item())
        accs.append(float(np.mean(logits.data.argmax(axis=1) == batch.query_y)))
    accs, losses = np.array(accs), np.array(losses)
    ci = confidence_interval(accs)[1] if num_episodes >= 2 else float("inf")
    return EvalResult(float(accs.mean()), float(losses.mean()), ci, num_episodes, accs, losses)
