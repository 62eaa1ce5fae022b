import numpy as np
import pytest

from divlab import autodiff as ad
from divlab import nn
from divlab.errors import ContractError, TrainingError
from divlab.params import ParamVector, grad
from divlab.probe import (
    ProbeNetwork,
    ProbeTrainConfig,
    embed,
    fim_diagonal,
    finetune_head,
    head_loss,
    pretrain_probe,
)
from divlab.tasks import SyntheticSpec, TaskBatch, generate_synthetic, sample_batch


def make_batch(x, y, n_way, batch_id="b"):
    x, y = np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.int64)
    return TaskBatch(x, y, x[:0], y[:0], n_way, 1, 0, batch_id)


def per_sample_fim(probe, head, x, y):
    """Reference: one autograd pass per sample, squared and averaged."""
    total = np.zeros(len(probe.feature_params))
    for xi, yi in zip(x, y):
        p = probe.feature_params.tracked()
        logp = ad.log_softmax(nn.logits(p, head, xi[None, :]))
        total += grad(logp[0, int(yi)], p).values ** 2
    return total / len(y)


def exact_fisher(probe, head, x):
    """Sum over labels of p(y|x) * score(y)^2, averaged over samples."""
    with ad.no_grad():
        probs = np.exp(ad.log_softmax(nn.logits(probe.feature_params, head, x)).data)
    total = np.zeros(len(probe.feature_params))
    for i, xi in enumerate(x):
        for c in range(probs.shape[1]):
            total += probs[i, c] * per_sample_fim(probe, head, xi[None], [c])
    return total / len(x)


@pytest.fixture(scope="module")
def probe():
    meta = generate_synthetic(SyntheticSpec("meta", class_count=10, feature_dim=6,
                                            proto_spread=2.0, seed=42))
    return pretrain_probe(meta, ProbeTrainConfig(hidden=(8, 8)))


@pytest.fixture(scope="module")
def data():
    return generate_synthetic(SyntheticSpec("eval", feature_dim=6, proto_spread=1.0, seed=7))


def test_logistic_oracle_quarter():
    # h = relu(w * x + 1) with w = 0, so p = 0.5 and d log p / d w = +-0.5 * x
    bb = ParamVector.from_arrays({"w0": np.zeros((1, 1)), "b0": np.ones(1)})
    probe = ProbeNetwork.from_params(bb)
    head = ParamVector.from_arrays({"w": np.array([[0.5, -0.5]]), "b": np.array([-0.5, 0.5])})
    for label in (0, 1):
        e = fim_diagonal(probe, head, make_batch([[1.0]], [label], 2), "empirical")
        assert e.fim_diag[0] == pytest.approx(0.25, abs=1e-15)
        # (y - p)^2 x^2 with x = 1
        assert e.fim_diag[0] == (label - 0.5) ** 2
    e = fim_diagonal(probe, head, make_batch([[1.0]], [0], 2), "sampled", mc_draws=3)
    assert e.fim_diag[0] == pytest.approx(0.25, abs=1e-15)


def test_zero_inputs_give_zero_first_layer_entries(probe):
    head = probe.fresh_head(3)
    e = fim_diagonal(probe, head, make_batch(np.zeros((4, 6)), [0, 1, 2, 0], 3), "empirical")
    w0 = probe.feature_params.slot("w0")
    assert np.all(e.fim_diag[w0.offset : w0.stop] == 0.0)


def test_matches_per_sample_loop(probe, data):
    for seed in range(5):
        b = sample_batch(data, 5, 2, 2, seed)
        head = finetune_head(probe, b, steps=20)
        e = fim_diagonal(probe, head, b, "empirical")
        ref = per_sample_fim(probe, head, b.x, b.y)
        np.testing.assert_allclose(e.fim_diag, ref, rtol=1e-10, atol=1e-14)
        assert len(e) == len(probe.feature_params)
        assert np.all(e.fim_diag >= 0)


def test_sampled_labels_converge_to_exact_fisher(probe, data):
    b = sample_batch(data, 4, 2, 0, seed=3)
    head = finetune_head(probe, b, steps=50)
    exact = exact_fisher(probe, head, b.x)
    errors = []
    for draws in (8, 64, 512):
        errs = []
        for seed in range(10):
            e = fim_diagonal(probe, head, b, "sampled", mc_draws=draws, seed=seed).fim_diag
            errs.append(np.linalg.norm(e - exact) / np.linalg.norm(exact))
        errors.append(np.mean(errs))
    assert errors[0] > errors[1] > errors[2]
    assert errors[2] <= 0.05


def test_embedding_is_deterministic(probe, data):
    b = sample_batch(data, 5, 5, 15, seed=1)
    e1 = embed(probe, b, "sampled", 8, seed=4)
    e2 = embed(probe, b, "sampled", 8, seed=4)
    assert e1.fim_diag.tobytes() == e2.fim_diag.tobytes()


def test_feature_params_frozen_over_1000_embeddings(probe, data):
    before = probe.feature_params.content_hash()
    values = probe.feature_params.values.copy()
    for i in range(1000):
        embed(probe, sample_batch(data, 5, 1, 1, i), mc_draws=1, seed=i, finetune_steps=2)
    assert probe.feature_params.content_hash() == before == probe.probe_id
    assert np.array_equal(probe.feature_params.values, values)


def test_empty_batch_is_a_contract_error(probe):
    with pytest.raises(ContractError):
        fim_diagonal(probe, probe.fresh_head(2), make_batch(np.zeros((0, 6)), [], 2))


def test_sampled_needs_a_draw(probe, data):
    with pytest.raises(ContractError):
        fim_diagonal(probe, probe.fresh_head(5), sample_batch(data, 5, 1, 1, 0), mc_draws=0)


def test_finetune_zero_steps_is_fresh_head(probe, data):
    b = sample_batch(data, 5, 5, 15, 0)
    assert finetune_head(probe, b, steps=0) == probe.fresh_head(5)


def test_finetune_never_increases_loss(probe, data):
    for seed in range(50):
        b = sample_batch(data, 5, 5, 15, seed)
        start = head_loss(probe, probe.fresh_head(5), b)
        assert head_loss(probe, finetune_head(probe, b), b) <= start


def test_finetune_separable_two_way(probe):
    rng = np.random.default_rng(0)
    x = np.concatenate([rng.normal(-3, 0.3, (10, 6)), rng.normal(3, 0.3, (10, 6))])
    y = np.repeat([0, 1], 10)
    b = make_batch(x, y, 2)
    head = finetune_head(probe, b, steps=100, lr=0.01)
    assert np.mean(nn.predict(probe.feature_params, head, x) == y) == 1.0


def test_pretrain_separable_blobs():
    rng = np.random.default_rng(1)
    x = np.concatenate([rng.normal(-2, 0.5, (50, 4)), rng.normal(2, 0.5, (50, 4))])
    y = np.repeat([0, 1], 50)
    p = pretrain_probe((x, y), ProbeTrainConfig(hidden=(8,)))
    assert p.meta["train_accuracy"] == 1.0


def test_pretrain_single_class():
    with pytest.raises(ContractError, match="degenerate label space"):
        pretrain_probe((np.ones((10, 3)), np.zeros(10, dtype=int)))


def test_pretrain_failure_names_accuracy():
    rng = np.random.default_rng(2)
    x, y = rng.normal(size=(200, 3)), rng.integers(0, 10, size=200)
    with pytest.raises(TrainingError, match="accuracy") as exc:
        pretrain_probe((x, y), ProbeTrainConfig(hidden=(4,), min_epochs=1, max_epochs=2))
    assert 0.0 <= exc.value.achieved < 0.9


def test_default_meta_dataset_probe_gate():
    meta = generate_synthetic(SyntheticSpec("probe-meta", class_count=20, proto_spread=2.0,
                                            samples_per_class=100, seed=999))
    p = pretrain_probe(meta)
    assert p.meta["train_accuracy"] >= 0.9 and p.meta["epochs"] <= 200
    assert p.arch_spec == (16, 64, 64)


def test_probe_id_tracks_weights(probe, tmp_path):
    probe.save(tmp_path / "probe")
    back = ProbeNetwork.load(tmp_path / "probe")
    assert back.probe_id == probe.probe_id and back.arch_spec == probe.arch_spec
    nudged = probe.feature_params.replace(probe.feature_params.values + 1e-12)
    assert ProbeNetwork.from_params(nudged).probe_id != probe.probe_id
