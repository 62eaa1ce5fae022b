"""Diversity coefficient: expected cosine distance between batch embeddings."""

from __future__ import annotations

import csv
import itertools
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import probe as probe_mod
from .analysis import confidence_interval
from .errors import ContractError, DegenerateEmbeddingError, ProbeMismatchError
from .tasks import sample_batch, sample_random_batch

BATCH_MODES = ("episode", "random")


@dataclass(frozen=True)
class DiversityConfig:
    num_batches: int = 25
    pairing: object = "exhaustive"  # or an int: number of sampled pairs
    label_mode: str = "sampled"
    mc_draws: int = 8
    batch_mode: str = "episode"
    n_way: int = 5
    k_shot: int = 5
    q_size: int = 15
    random_batch_size: int = 100
    finetune_steps: int = 100
    finetune_lr: float = 0.01


@dataclass(frozen=True)
class DiversityEstimate:
    mean: float
    ci_half_width: float
    num_batches: int
    num_pairs: int
    probe_id: str
    dataset_id: str
    label_mode: str = "sampled"
    seed: int = 0
    self_pairs: bool = False
    ci_method: str = "normal-approx (pairs share batches)"
    distances: np.ndarray = field(default=None, repr=False, compare=False)

    def overlaps(self, other):
        """True when the two 95% intervals intersect."""
        return abs(self.mean - other.mean) <= self.ci_half_width + other.ci_half_width

    def row(self):
        d = asdict(self)
        d.pop("distances")
        return d


def cosine_distance(e1, e2):
    if e1.probe_id != e2.probe_id:
        raise ProbeMismatchError(f"embeddings from probes {e1.probe_id} and {e2.probe_id}")
    a, b = np.asarray(e1.fim_diag), np.asarray(e2.fim_diag)
    if a.shape != b.shape:
        raise ContractError(f"embedding lengths differ: {a.size} vs {b.size}")
    for v, e in ((a, e1), (b, e2)):
        if not np.any(v):
            raise DegenerateEmbeddingError(
                f"zero-norm embedding for batch {e.batch_id} (dead probe or empty gradient)",
                batch_id=e.batch_id,
            )
    # rescale by the largest entry so tiny FIM values cannot underflow
    a, b = a / np.abs(a).max(), b / np.abs(b).max()
    aa, bb = float(a @ a), float(b @ b)
    # sqrt(aa * bb) rather than |a| * |b| so that d(f, f) is exactly zero
    return min(1.0, max(0.0, 1.0 - float(a @ b) / math.sqrt(aa * bb)))


def pairwise_distance_matrix(embeddings):
    if len(embeddings) < 2:
        raise ContractError("need at least 2 embeddings")
    ids = {e.probe_id for e in embeddings}
    if len(ids) > 1:
        raise ProbeMismatchError(f"embeddings mix probes {sorted(ids)}")
    e = np.stack([np.asarray(x.fim_diag, dtype=np.float64) for x in embeddings])
    peak = np.abs(e).max(axis=1)
    if np.any(peak == 0):
        bad = embeddings[int(np.argmin(peak))].batch_id
        raise DegenerateEmbeddingError(f"zero-norm embedding for batch {bad}", batch_id=bad)
    e = e / peak[:, None]
    sq = np.einsum("ij,ij->i", e, e)
    m = np.clip(1.0 - (e @ e.T) / np.sqrt(np.outer(sq, sq)), 0.0, 1.0)
    m = 0.5 * (m + m.T)
    np.fill_diagonal(m, 0.0)
    return m


def _pairs(n, pairing, seed):
    all_pairs = list(itertools.combinations(range(n), 2))
    if pairing == "exhaustive":
        return all_pairs
    count = int(pairing)
    if not 1 <= count <= len(all_pairs):
        raise ContractError(f"sampled pair count {count} not in [1, {len(all_pairs)}]")
    rng = np.random.default_rng([seed, 2])
    pick = np.sort(rng.choice(len(all_pairs), size=count, replace=False))
    return [all_pairs[i] for i in pick]


def estimate_from_embeddings(embeddings, pairing="exhaustive", seed=0, dataset_id="",
                             label_mode=None):
    """Average distance over distinct unordered pairs (self-pairs excluded)."""
    if len(embeddings) < 2:
        raise ContractError(f"need at least 2 batches, got {len(embeddings)}")
    pairs = _pairs(len(embeddings), pairing, seed)
    dists = np.array([cosine_distance(embeddings[i], embeddings[j]) for i, j in pairs])
    if len(dists) >= 2:
        mean, half = confidence_interval(dists)
    else:
        mean, half = float(dists[0]), math.inf
    return DiversityEstimate(
        mean=mean,
        ci_half_width=half,
        num_batches=len(embeddings),
        num_pairs=len(pairs),
        probe_id=embeddings[0].probe_id,
        dataset_id=dataset_id,
        label_mode=label_mode or embeddings[0].label_mode,
        seed=seed,
        distances=dists,
    )


def draw_batches(dataset, config, seed):
    if config.batch_mode == "episode":
        return [sample_batch(dataset, config.n_way, config.k_shot, config.q_size, [seed, i])
                for i in range(config.num_batches)]
    if config.batch_mode == "random":
        return [sample_random_batch(dataset, config.random_batch_size, [seed, i])
                for i in range(config.num_batches)]
    raise ContractError(f"batch_mode must be one of {BATCH_MODES}")


def embed_batches(probe, batches, config, seed):
    out = []
    for i, b in enumerate(batches):
        try:
            out.append(probe_mod.embed(
                probe, b, config.label_mode, config.mc_draws, [seed, i, 1],
                config.finetune_steps, config.finetune_lr,
            ))
        except DegenerateEmbeddingError as exc:
            raise DegenerateEmbeddingError(str(exc), batch_id=b.batch_id) from exc
    return out


def diversity_coefficient(dataset, probe, config=DiversityConfig(), seed=0):
    """Monte-Carlo diversity of ``dataset`` under ``probe``.

    Each of ``config.num_batches`` batches is embedded once, then pairwise
    cosine distances are averaged. The 95% half-width is a normal
    approximation over pairs; pairs that share a batch are correlated, so it
    is approximate.
    """
    if config.num_batches < 2:
        raise ContractError(f"num_batches must be >= 2, got {config.num_batches}")
    batches = draw_batches(dataset, config, seed)
    embeddings = embed_batches(probe, batches, config, seed)
    return estimate_from_embeddings(embeddings, config.pairing, seed, dataset.dataset_id,
                                    config.label_mode)


CSV_FIELDS = ("dataset_id", "probe_id", "mean", "ci_half_width", "num_batches", "num_pairs",
              "label_mode", "seed")


def write_csv(estimates, path, extra=None):
    """Diversity report; ``extra`` columns (e.g. config hash) are appended."""
    extra = dict(extra or {})
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_FIELDS + tuple(extra))
        for e in estimates:
            row = e.row()
            w.writerow([_fmt(row[k]) for k in CSV_FIELDS] + list(extra.values()))


def read_csv(path):
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    out = []
    for r in rows:
        out.append(DiversityEstimate(
            mean=float(r["mean"]), ci_half_width=float(r["ci_half_width"]),
            num_batches=int(r["num_batches"]), num_pairs=int(r["num_pairs"]),
            probe_id=r["probe_id"], dataset_id=r["dataset_id"], label_mode=r["label_mode"],
            seed=int(r["seed"]),
        ))
    return out


def _fmt(v):
    return repr(v) if isinstance(v, float) else str(v)
