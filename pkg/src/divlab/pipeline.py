"""Stages of the end-to-end experiment, driven by a config tree.

Every stage records a key (hash of the config pieces it depends on) in
``<out>/manifest.json``. A stage whose key matches and whose outputs exist
is skipped, which makes ``run_all`` idempotent.
"""

from __future__ import annotations

import csv
import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

from . import config as cfgmod
from .analysis import GridResult, build_report, write_reports
from .diversity import DiversityConfig, diversity_coefficient, read_csv, write_csv
from .errors import ConfigError, MissingDependencyError
from .learners import Checkpoint, LearnerConfig, evaluate, new_checkpoint, train
from .probe import ProbeNetwork, ProbeTrainConfig, pretrain_probe
from .tasks import SyntheticSpec, generate_synthetic, load_dataset, save_dataset

log = logging.getLogger("divlab")

STAGES = ("gen-data", "pretrain-probe", "diversity", "train", "evaluate", "correlate")


@dataclass(frozen=True)
class Layout:
    out: Path
    data: Path

    @classmethod
    def of(cls, cfg):
        out = Path(cfg["output_dir"])
        return cls(out, Path(cfg["data_dir"]) if cfg.get("data_dir") else out / "data")

    @property
    def manifest(self):
        return self.out / "manifest.json"

    @property
    def data_manifest(self):
        return self.data / "manifest.json"

    @property
    def probe_stem(self):
        return self.out / "probe" / "probe"

    @property
    def diversity_csv(self):
        return self.out / "diversity.csv"

    @property
    def checkpoints(self):
        return self.out / "checkpoints"

    @property
    def eval_csv(self):
        return self.out / "evaluation.csv"

    @property
    def report_files(self):
        return (self.out / "report_points.csv", self.out / "report_summary.csv",
                self.out / "report.json")

    def checkpoint(self, label, dataset_id):
        return self.checkpoints / f"{label.replace(' ', '-')}__{dataset_id}.dvck"


# ---------------------------------------------------------------- manifest


def _read_manifest(layout):
    if layout.manifest.exists():
        with open(layout.manifest) as fh:
            return json.load(fh)
    return {"stages": {}}


def _record(layout, cfg, stage, key, outputs):
    m = _read_manifest(layout)
    m["config_hash"] = cfgmod.config_hash(cfg)
    m["seed"] = cfg["seed"]
    m["stages"][stage] = {"key": key, "outputs": sorted(str(p) for p in outputs)}
    layout.out.mkdir(parents=True, exist_ok=True)
    _write_json(layout.manifest, m)


def _is_current(layout, stage, key):
    entry = _read_manifest(layout)["stages"].get(stage)
    return bool(entry and entry["key"] == key and all(Path(p).exists() for p in entry["outputs"]))


def _write_json(path, doc):
    tmp = f"{path}.tmp"
    with open(tmp, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")
    os.replace(tmp, path)


def _stamp(cfg):
    return {"config_hash": cfgmod.config_hash(cfg), "seed": cfg["seed"]}


# ---------------------------------------------------------------- stage keys


def data_key(cfg):
    return cfgmod.subtree_hash("data", cfg["data"], cfg["seed"])


def probe_key(cfg):
    d = cfg["data"]
    return cfgmod.subtree_hash("probe", cfg["probe"], d["feature_dim"], d["within_class_noise"],
                               cfg["seed"])


def diversity_key(cfg):
    return cfgmod.subtree_hash("diversity", cfg["diversity"], data_key(cfg), probe_key(cfg))


def train_key(cfg):
    return cfgmod.subtree_hash("train", cfg["learners"], data_key(cfg))


def eval_key(cfg):
    return cfgmod.subtree_hash("evaluate", cfg["evaluation"], train_key(cfg))


def correlate_key(cfg):
    return cfgmod.subtree_hash("correlate", diversity_key(cfg), eval_key(cfg))


# ---------------------------------------------------------------- datasets


def synthetic_specs(cfg):
    """SyntheticSpec per generated dataset id, training sets first, then controls."""
    d, master = cfg["data"], cfg["seed"]

    def single(dataset_id, spread, label):
        return SyntheticSpec(dataset_id, class_count=d["class_count"], feature_dim=d["feature_dim"],
                             proto_spread=float(spread), within_class_noise=d["within_class_noise"],
                             samples_per_class=d["samples_per_class"],
                             seed=cfgmod.stage_seed(master, label))

    specs = [single(cfgmod.spread_id(s), s, f"data:{cfgmod.spread_id(s)}") for s in d["spreads"]]
    for spreads in d["unions"]:
        uid = cfgmod.union_id(spreads)
        parts = [single(f"{uid}/{k}", s, f"data:{uid}:{k}") for k, s in enumerate(spreads)]
        specs.append(SyntheticSpec.union(uid, parts))
    specs += [single(cfgmod.control_id(s), s, f"data:{cfgmod.control_id(s)}")
              for s in d["controls"]]
    return specs


def dataset_paths(cfg, layout, dataset_id, split):
    for f in cfg["data"]["files"]:
        if f["dataset_id"] == dataset_id:
            return Path(f[split])
    return layout.data / f"{dataset_id}.{split}.dvds"


def open_dataset(cfg, layout, dataset_id, split):
    path = dataset_paths(cfg, layout, dataset_id, split)
    if not path.exists():
        raise MissingDependencyError(f"dataset file {path} not found; run `divlab gen-data` first")
    return load_dataset(path, dataset_id=dataset_id, split=split)


def gen_data(cfg, force=False):
    layout = Layout.of(cfg)
    key = data_key(cfg)
    outputs = []
    specs = synthetic_specs(cfg)
    for spec in specs:
        outputs += [dataset_paths(cfg, layout, spec.dataset_id, s) for s in ("train", "test")]
    outputs.append(layout.data_manifest)
    current = _data_manifest_key(layout) == key and all(p.exists() for p in outputs)
    if current and not force:
        log.info("gen-data: up to date")
        _record(layout, cfg, "gen-data", key, outputs)
        return outputs
    clash = [p for p in outputs if p.exists()]
    if clash and not force:
        raise ConfigError(f"{len(clash)} dataset files already exist in {layout.data} from a "
                          "different config; pass --force to overwrite")
    layout.data.mkdir(parents=True, exist_ok=True)
    entries = []
    for spec in specs:
        for split in ("train", "test"):
            save_dataset(generate_synthetic(spec, split),
                         dataset_paths(cfg, layout, spec.dataset_id, split))
        entries.append({"dataset_id": spec.dataset_id, "spec": spec.to_dict(),
                        "role": "control" if spec.dataset_id.startswith("control-") else "grid"})
    for f in cfg["data"]["files"]:
        for split in ("train", "test"):
            open_dataset(cfg, layout, f["dataset_id"], split)
        entries.append({"dataset_id": f["dataset_id"], "files": f, "role": "grid"})
    _write_json(layout.data_manifest, {"key": key, **_stamp(cfg), "datasets": entries})
    log.info("gen-data: wrote %d datasets to %s", len(specs), layout.data)
    _record(layout, cfg, "gen-data", key, outputs)
    return outputs


def _data_manifest_key(layout):
    if not layout.data_manifest.exists():
        return None
    with open(layout.data_manifest) as fh:
        return json.load(fh).get("key")


# ---------------------------------------------------------------- probe


def pretrain(cfg, force=False):
    layout = Layout.of(cfg)
    key = probe_key(cfg)
    outputs = [Path(f"{layout.probe_stem}.dvpv"), Path(f"{layout.probe_stem}.json")]
    if _is_current(layout, "pretrain-probe", key) and not force:
        log.info("pretrain-probe: up to date")
        return ProbeNetwork.load(layout.probe_stem)
    p, d = cfg["probe"], cfg["data"]
    meta_spec = SyntheticSpec("probe-meta", class_count=p["meta_class_count"],
                              feature_dim=d["feature_dim"], proto_spread=p["meta_proto_spread"],
                              within_class_noise=d["within_class_noise"],
                              samples_per_class=p["meta_samples_per_class"],
                              seed=cfgmod.stage_seed(cfg["seed"], "probe-meta"))
    train_cfg = ProbeTrainConfig(hidden=tuple(p["hidden"]), lr=p["lr"], batch_size=p["batch_size"],
                                 min_epochs=p["min_epochs"], max_epochs=p["max_epochs"],
                                 target_accuracy=p["target_accuracy"],
                                 seed=cfgmod.stage_seed(cfg["seed"], "probe"))
    probe = pretrain_probe(generate_synthetic(meta_spec), train_cfg)
    probe = ProbeNetwork.from_params(probe.feature_params, {
        **probe.meta, **_stamp(cfg), "key": key, "meta_spec": meta_spec.to_dict()})
    layout.probe_stem.parent.mkdir(parents=True, exist_ok=True)
    probe.save(layout.probe_stem)
    log.info("pretrain-probe: accuracy %.3f after %d epochs", probe.meta["train_accuracy"],
             probe.meta["epochs"])
    _record(layout, cfg, "pretrain-probe", key, outputs)
    return probe


def load_probe(layout):
    if not Path(f"{layout.probe_stem}.dvpv").exists():
        raise MissingDependencyError(
            f"no probe at {layout.probe_stem}.dvpv; run `divlab pretrain-probe` first "
            "(or pass --pretrain-probe)")
    return ProbeNetwork.load(layout.probe_stem)


# ---------------------------------------------------------------- diversity


def diversity_config(cfg):
    d, lc = cfg["diversity"], cfg["learners"]
    return DiversityConfig(num_batches=d["num_batches"], pairing=d["pairing"],
                           label_mode=d["label_mode"], mc_draws=d["mc_draws"],
                           batch_mode=d["batch_mode"], n_way=lc["n_way"], k_shot=lc["k_shot"],
                           q_size=lc["q_size"], random_batch_size=d["random_batch_size"],
                           finetune_steps=d["finetune_steps"], finetune_lr=d["finetune_lr"])


def _diversity_cell(args):
    cfg, dataset_id = args
    layout = Layout.of(cfg)
    probe = load_probe(layout)
    data = open_dataset(cfg, layout, dataset_id, "train")
    return diversity_coefficient(data, probe, diversity_config(cfg),
                                 cfgmod.stage_seed(cfg["seed"], f"div:{dataset_id}"))


def measure_diversity(cfg, force=False, pretrain_missing=False):
    layout = Layout.of(cfg)
    key = diversity_key(cfg)
    if _is_current(layout, "diversity", key) and not force:
        log.info("diversity: up to date")
        return read_csv(layout.diversity_csv)
    if pretrain_missing and not Path(f"{layout.probe_stem}.dvpv").exists():
        pretrain(cfg)
    probe = load_probe(layout)
    if probe.meta.get("key") != probe_key(cfg):
        raise ConfigError("probe on disk was trained under a different config; "
                          "rerun `divlab pretrain-probe --force`")
    ids = cfgmod.dataset_ids(cfg)
    estimates = _map(cfg, _diversity_cell, [(cfg, i) for i in ids])
    for e in estimates:
        log.info("diversity %-16s %.4f ± %.4f", e.dataset_id, e.mean, e.ci_half_width)
    write_csv(estimates, layout.diversity_csv, extra=_stamp(cfg))
    _record(layout, cfg, "diversity", key, [layout.diversity_csv])
    return estimates


# ---------------------------------------------------------------- training


def learner_config(cfg, label, dataset_id):
    lc = cfg["learners"]
    if label == "PT":
        algorithm, steps = "PT", lc["pt_inner_steps"]
    else:
        order, _, k = label.split()
        algorithm, steps = f"{order}-MAML", int(k)
    return LearnerConfig(
        algorithm=algorithm, inner_steps=steps, inner_lr=lc["inner_lr"], outer_lr=lc["outer_lr"],
        n_way=lc["n_way"], k_shot=lc["k_shot"], q_size=lc["q_size"],
        meta_batch_size=lc["meta_batch_size"], total_outer_steps=lc["total_outer_steps"],
        pt_batch_size=lc["pt_batch_size"], hidden=tuple(lc["hidden"]),
        head_init_std=lc["head_init_std"], outer_optimizer=lc["outer_optimizer"],
        seed=cfgmod.stage_seed(cfg["seed"], f"train:{label}:{dataset_id}"),
    )


def step_budget(cfg, dataset):
    """Outer steps for one cell.

    Controlled (default): identical for every dataset. Uncontrolled: scales
    with the dataset's class count, so bigger datasets see more updates.
    """
    total = cfg["learners"]["total_outer_steps"]
    if not cfg["learners"]["uncontrolled"]:
        return total
    return int(round(total * dataset.class_count / cfg["data"]["class_count"]))


def cells(cfg):
    return [(label, i) for i in cfgmod.training_ids(cfg) for label in cfg["learners"]["grid"]]


def _config_diff(old, new):
    a, b = old.to_dict(), new.to_dict()
    return ", ".join(f"{k}: {a.get(k)!r} -> {b.get(k)!r}" for k in sorted(b) if a.get(k) != b.get(k))


def _train_cell(args):
    cfg, label, dataset_id, force = args
    layout = Layout.of(cfg)
    data = open_dataset(cfg, layout, dataset_id, "train")
    lcfg = learner_config(cfg, label, dataset_id)
    until = step_budget(cfg, data)
    path = layout.checkpoint(label, dataset_id)
    extra = {**_stamp(cfg), "data_key": data_key(cfg), "uncontrolled": cfg["learners"]["uncontrolled"],
             "target_steps": until}
    ckpt = None
    if path.exists() and not force:
        ckpt = Checkpoint.load(path)
        if ckpt.config != lcfg or ckpt.extra.get("data_key") != extra["data_key"]:
            diff = _config_diff(ckpt.config, lcfg) or "dataset contents changed"
            raise ConfigError(f"checkpoint {path.name} was written under another config "
                              f"({diff}); pass --force to retrain")
        if ckpt.outer_step > until:
            raise ConfigError(f"checkpoint {path.name} is past the step budget "
                              f"({ckpt.outer_step} > {until}); pass --force to retrain")
        if ckpt.outer_step == until:
            return label, dataset_id, until, False
    if ckpt is None:
        ckpt = new_checkpoint(data, lcfg, extra)
    ckpt.extra.update(extra)
    every = cfg["learners"]["checkpoint_every"]
    while ckpt.outer_step < until:
        ckpt = train(ckpt, data, min(until, ckpt.outer_step + every))
        ckpt.save(path)
    if until == 0:
        ckpt.save(path)
    return label, dataset_id, until, True


def train_grid(cfg, force=False):
    layout = Layout.of(cfg)
    key = train_key(cfg)
    if _is_current(layout, "train", key) and not force:
        log.info("train: up to date")
        return []
    layout.checkpoints.mkdir(parents=True, exist_ok=True)
    done = _map(cfg, _train_cell, [(cfg, label, i, force) for label, i in cells(cfg)])
    trained = [d for d in done if d[3]]
    log.info("train: %d cells trained, %d already complete", len(trained), len(done) - len(trained))
    _record(layout, cfg, "train", key, [layout.checkpoint(l, i) for l, i in cells(cfg)])
    return done


# ---------------------------------------------------------------- evaluation


EVAL_FIELDS = ("learner_label", "dataset_id", "accuracy", "acc_ci", "ce_loss", "num_episodes",
               "outer_steps")


def _eval_cell(args):
    cfg, label, dataset_id = args
    layout = Layout.of(cfg)
    path = layout.checkpoint(label, dataset_id)
    if not path.exists():
        raise MissingDependencyError(f"checkpoint {path} missing; run `divlab train` first")
    ckpt = Checkpoint.load(path)
    target = ckpt.extra.get("target_steps", ckpt.config.total_outer_steps)
    if ckpt.outer_step < target:
        raise MissingDependencyError(f"checkpoint {path.name} stopped at step {ckpt.outer_step} of "
                                     f"{target}; rerun `divlab train` to finish it")
    data = open_dataset(cfg, layout, dataset_id, "test")
    res = evaluate(ckpt.model, data, ckpt.config, cfg["evaluation"]["num_episodes"],
                   cfgmod.stage_seed(cfg["seed"], f"eval:{dataset_id}"))
    return {"learner_label": label, "dataset_id": dataset_id, "accuracy": res.accuracy,
            "acc_ci": res.ci_acc, "ce_loss": res.ce_loss, "num_episodes": res.num_episodes,
            "outer_steps": ckpt.outer_step}


def evaluate_grid(cfg, force=False):
    layout = Layout.of(cfg)
    key = eval_key(cfg)
    if _is_current(layout, "evaluate", key) and not force:
        log.info("evaluate: up to date")
        return read_eval_csv(layout.eval_csv)
    rows = _map(cfg, _eval_cell, [(cfg, label, i) for label, i in cells(cfg)])
    stamp = _stamp(cfg)
    with open(layout.eval_csv, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(EVAL_FIELDS + tuple(stamp))
        for r in rows:
            w.writerow([r[k] if not isinstance(r[k], float) else repr(r[k]) for k in EVAL_FIELDS]
                       + list(stamp.values()))
    _record(layout, cfg, "evaluate", key, [layout.eval_csv])
    return rows


def read_eval_csv(path):
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    for r in rows:
        for k in ("accuracy", "acc_ci", "ce_loss"):
            r[k] = float(r[k])
        r["num_episodes"], r["outer_steps"] = int(r["num_episodes"]), int(r["outer_steps"])
    return rows


# ---------------------------------------------------------------- correlation


def correlate(cfg, force=False):
    layout = Layout.of(cfg)
    key = correlate_key(cfg)
    if _is_current(layout, "correlate", key) and not force:
        log.info("correlate: up to date")
        return None
    missing = [str(p) for p in (layout.diversity_csv, layout.eval_csv) if not p.exists()]
    if missing:
        raise MissingDependencyError("correlate needs: " + ", ".join(missing))
    div = {e.dataset_id: e for e in read_csv(layout.diversity_csv)}
    evals = read_eval_csv(layout.eval_csv)
    absent = sorted({r["dataset_id"] for r in evals} - set(div))
    if absent:
        raise MissingDependencyError(f"no diversity rows for {absent}; rerun `divlab diversity`")
    grid = [GridResult(r["learner_label"], r["dataset_id"], div[r["dataset_id"]].mean,
                       div[r["dataset_id"]].ci_half_width, r["accuracy"], r["ce_loss"],
                       r["acc_ci"]) for r in evals]
    reports = build_report(grid)
    lc = cfg["learners"]
    extra = {**_stamp(cfg)}
    meta = {
        **extra,
        "uncontrolled": lc["uncontrolled"],
        "meta_batch_size": lc["meta_batch_size"],
        "total_outer_steps": lc["total_outer_steps"],
        "outer_optimizer": lc["outer_optimizer"],
        "diversity_ci": "normal approximation over pairwise distances; pairs share batches",
        "diversity_self_pairs": "excluded",
        "label_mode": cfg["diversity"]["label_mode"],
    }
    # write to temporaries first so a failure leaves no partial report
    final = layout.report_files
    tmp = [Path(f"{p}.tmp") for p in final]
    write_reports(grid, reports, tmp[0], tmp[1], None, extra)
    _write_report_json(grid, reports, tmp[2], meta)
    for t, p in zip(tmp, final):
        os.replace(t, p)
    for r in reports:
        log.info("%-11s slope_acc %+.3f r2_acc %.3f r2_loss %.3f", r.learner_label, r.slope_acc,
                 r.r2_acc, r.r2_loss)
    _record(layout, cfg, "correlate", key, final)
    return reports


def _write_report_json(grid, reports, path, meta):
    write_reports(grid, reports, os.devnull, os.devnull, path, meta)


# ---------------------------------------------------------------- all stages


def run_all(cfg, force=False):
    gen_data(cfg, force)
    pretrain(cfg, force)
    measure_diversity(cfg, force)
    train_grid(cfg, force)
    evaluate_grid(cfg, force)
    return correlate(cfg, force)


def _map(cfg, fn, items):
    """Ordered map; a process pool when ``workers > 1``. Cells are seed-isolated."""
    workers = int(cfg.get("workers", 1))
    if workers <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))
