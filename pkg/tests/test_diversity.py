import math

import numpy as np
import pytest
from hypothesis import example, given, settings
from hypothesis import strategies as st

from divlab.diversity import (
    DiversityConfig,
    cosine_distance,
    diversity_coefficient,
    draw_batches,
    embed_batches,
    estimate_from_embeddings,
    pairwise_distance_matrix,
    read_csv,
    write_csv,
)
from divlab.errors import (
    ContractError,
    DegenerateEmbeddingError,
    ProbeMismatchError,
)
from divlab.params import ParamVector
from divlab.probe import ProbeNetwork, ProbeTrainConfig, Task2VecEmbedding, pretrain_probe
from divlab.tasks import SyntheticSpec, generate_synthetic


def emb(values, probe_id="p", batch_id="b"):
    return Task2VecEmbedding(np.asarray(values, dtype=np.float64), probe_id, batch_id, "sampled")


@pytest.fixture(scope="module")
def probe():
    meta = generate_synthetic(SyntheticSpec("meta", class_count=10, feature_dim=6,
                                            proto_spread=2.0, seed=42))
    return pretrain_probe(meta, ProbeTrainConfig(hidden=(8, 8)))


@pytest.fixture(scope="module")
def data():
    return generate_synthetic(SyntheticSpec("eval", feature_dim=6, proto_spread=1.0, seed=7))


FAST = DiversityConfig(num_batches=6, finetune_steps=10)


def test_cosine_examples():
    f = emb([0.3, 1.7, 2.2])
    assert cosine_distance(f, f) == pytest.approx(0.0, abs=1e-12)
    assert cosine_distance(emb([1, 0]), emb([0, 1])) == 1.0
    assert cosine_distance(emb([1, 1]), emb([1, 0])) == pytest.approx(1 - 1 / math.sqrt(2),
                                                                      abs=1e-15)


def test_cosine_errors():
    with pytest.raises(DegenerateEmbeddingError) as exc:
        cosine_distance(emb([1, 2]), emb([0, 0], batch_id="dead"))
    assert exc.value.batch_id == "dead"
    with pytest.raises(ProbeMismatchError):
        cosine_distance(emb([1, 2], "p"), emb([1, 2], "q"))


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(0, 1e6), min_size=4, max_size=4),
       st.lists(st.floats(0, 1e6), min_size=4, max_size=4))
@example([0.0, 0.0, 0.0, 1.0], [0.0, 0.0, 0.0, 1.2e-169])  # squared norm underflows
def test_cosine_range_and_symmetry(a, b):
    if not any(a) or not any(b):
        return
    d = cosine_distance(emb(a), emb(b))
    assert 0.0 <= d <= 1.0
    assert d == cosine_distance(emb(b), emb(a))


def test_identical_embeddings_have_zero_diversity():
    est = estimate_from_embeddings([emb([1.0, 2.0, 3.0], batch_id=str(i)) for i in range(4)])
    assert (est.mean, est.ci_half_width, est.num_pairs) == (0.0, 0.0, 6)


def test_three_hand_set_distances():
    gram = np.array([[1.0, 0.9, 0.8], [0.9, 1.0, 0.7], [0.8, 0.7, 1.0]])
    rows = np.linalg.cholesky(gram)  # unit rows with the requested cosines
    embs = [emb(r) for r in rows]
    m = pairwise_distance_matrix(embs)
    np.testing.assert_allclose([m[0, 1], m[0, 2], m[1, 2]], [0.1, 0.2, 0.3], atol=1e-12)
    assert estimate_from_embeddings(embs).mean == pytest.approx(0.2, abs=1e-12)


def test_ci_formula():
    rng = np.random.default_rng(0)
    embs = [emb(rng.random(5)) for _ in range(7)]
    est = estimate_from_embeddings(embs)
    d = est.distances
    assert est.num_pairs == 21 == len(d)
    assert est.ci_half_width == pytest.approx(1.96 * d.std(ddof=1) / math.sqrt(21), rel=1e-14)


def test_matrix_examples():
    assert pairwise_distance_matrix([emb([1, 2]), emb([1, 2])]).tolist() == [[0, 0], [0, 0]]
    m = pairwise_distance_matrix([emb([1, 0]), emb([0, 3])])
    assert m[0, 1] == m[1, 0] == 1.0
    with pytest.raises(ProbeMismatchError):
        pairwise_distance_matrix([emb([1, 2], "a"), emb([1, 2], "b")])


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(2, 12))
def test_estimator_matches_matrix_oracle(seed, n):
    rng = np.random.default_rng(seed)
    embs = [emb(rng.random(9) * rng.integers(0, 2, 9) + 1e-3) for _ in range(n)]
    m = pairwise_distance_matrix(embs)
    iu = np.triu_indices(n, 1)
    est = estimate_from_embeddings(embs)
    assert abs(est.mean - m[iu].mean()) <= 1e-12
    assert np.all((m >= 0) & (m <= 1)) and np.array_equal(m, m.T) and not np.diag(m).any()
    assert 0.0 <= est.mean <= 1.0


def test_permutation_invariance():
    rng = np.random.default_rng(3)
    embs = [emb(rng.random(6)) for _ in range(10)]
    base = estimate_from_embeddings(embs)
    for seed in range(20):
        order = np.random.default_rng(seed).permutation(10)
        est = estimate_from_embeddings([embs[i] for i in order])
        assert est.mean == pytest.approx(base.mean, abs=1e-14)
        assert est.ci_half_width == pytest.approx(base.ci_half_width, abs=1e-14)


def test_sampled_pairing_converges_to_exhaustive():
    rng = np.random.default_rng(5)
    embs = [emb(rng.random(6)) for _ in range(25)]
    full = estimate_from_embeddings(embs)
    assert full.num_pairs == 300
    for count in (50, 150, 299):
        est = estimate_from_embeddings(embs, pairing=count, seed=1)
        assert est.num_pairs == count
        assert abs(est.mean - full.mean) <= 2 * est.ci_half_width
    assert estimate_from_embeddings(embs, pairing=300).mean == pytest.approx(full.mean, abs=1e-15)
    with pytest.raises(ContractError):
        estimate_from_embeddings(embs, pairing=301)


def test_single_pair_has_unbounded_ci():
    est = estimate_from_embeddings([emb([1, 0]), emb([1, 1])])
    assert est.num_pairs == 1 and math.isinf(est.ci_half_width)


def test_coefficient_equals_matrix_mean(probe, data):
    est = diversity_coefficient(data, probe, FAST, seed=2)
    embs = embed_batches(probe, draw_batches(data, FAST, 2), FAST, 2)
    m = pairwise_distance_matrix(embs)
    assert abs(est.mean - m[np.triu_indices(6, 1)].mean()) <= 1e-12
    assert est.num_pairs == 15 and est.probe_id == probe.probe_id
    assert est.dataset_id == "eval" and 0 <= est.mean <= 1


def test_random_batch_mode(probe, data):
    cfg = DiversityConfig(num_batches=4, finetune_steps=5, batch_mode="random",
                          random_batch_size=40)
    assert 0 <= diversity_coefficient(data, probe, cfg).mean <= 1


def test_coefficient_needs_two_batches(probe, data):
    with pytest.raises(ContractError):
        diversity_coefficient(data, probe, DiversityConfig(num_batches=1))


def test_dead_probe_names_the_batch(data):
    dead = ParamVector.from_arrays({"w0": np.zeros((6, 4)), "b0": -np.ones(4)})
    with pytest.raises(DegenerateEmbeddingError) as exc:
        diversity_coefficient(data, ProbeNetwork.from_params(dead), FAST)
    assert exc.value.batch_id.startswith("eval/train/")


def test_csv_roundtrip_and_determinism(probe, data, tmp_path):
    runs = []
    for name in ("a.csv", "b.csv"):
        est = diversity_coefficient(data, probe, FAST, seed=1)
        write_csv([est], tmp_path / name, extra={"config_hash": "h"})
        runs.append((tmp_path / name).read_bytes())
    assert runs[0] == runs[1]
    (back,) = read_csv(tmp_path / "a.csv")
    assert back.mean == est.mean and back.ci_half_width == est.ci_half_width
    assert back.num_pairs == est.num_pairs and back.probe_id == est.probe_id
