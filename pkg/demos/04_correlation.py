"""Regress few-shot accuracy on diversity across a small dataset grid.

This is the whole pipeline on a reduced budget (fewer batches and steps,
three learners) so it finishes in about a minute. `divlab run-all` runs
the full-size version.
"""

import tempfile

from divlab import config, pipeline
from divlab.analysis import PUBLISHED_R2
from divlab.diversity import read_csv

overrides = [
    ("diversity.num_batches", 10),
    ("learners.grid", ["PT", "FO MAML 5", "HO MAML 5"]),
    ("learners.total_outer_steps", 40),
    ("evaluation.num_episodes", 40),
]
with tempfile.TemporaryDirectory() as out:
    cfg = config.load_config(None, overrides + [("output_dir", out)])
    reports = pipeline.run_all(cfg)
    for e in read_csv(pipeline.Layout.of(cfg).diversity_csv):
        print(f"{e.dataset_id:11s} diversity {e.mean:.3f}")
    print()
    print("learner      slope   r2_acc  r2_loss   (reference r2 at full scale)")
    for r in reports:
        ref = PUBLISHED_R2.get(r.learner_label, ("-", "-"))
        print(f"{r.learner_label:11s} {r.slope_acc:+.3f}  {r.r2_acc:.3f}   {r.r2_loss:.3f}     {ref}")
