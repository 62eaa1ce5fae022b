import pytest

TINY = {
    "seed": 0,
    "data": {"class_count": 6, "feature_dim": 4, "samples_per_class": 25,
             "spreads": [0.5, 2.0], "unions": [[1.0, 1.0]], "controls": [0.0]},
    "probe": {"hidden": [8], "meta_class_count": 6, "meta_samples_per_class": 40},
    "diversity": {"num_batches": 4, "finetune_steps": 5, "mc_draws": 2},
    "learners": {"grid": ["PT", "FO MAML 1", "HO MAML 1"], "hidden": [8], "n_way": 3,
                 "k_shot": 2, "q_size": 3, "meta_batch_size": 2, "total_outer_steps": 6,
                 "checkpoint_every": 4, "pt_inner_steps": 2, "pt_batch_size": 20},
    "evaluation": {"num_episodes": 5},
}


@pytest.fixture
def tiny_config(tmp_path):
    import yaml

    path = tmp_path / "tiny.yaml"
    path.write_text(yaml.safe_dump(TINY))
    return path


ACCEPTANCE_LINES = []


def report(criterion, passed, detail):
    line = f"{criterion} {'PASS' if passed else 'FAIL'}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return passed


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
