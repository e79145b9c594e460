import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.stats import ortho_group

from mindshot.metrics import (cosine_matrix, evaluate, reconstruct_by_retrieval, retrieval_ranks,
                              rows_to_csv, topk_retrieval, two_way_identification)
from mindshot.synthgen import make_stimuli


def unit(a):
    return a / np.linalg.norm(a, axis=-1, keepdims=True)


def test_perfect_prediction():
    T = unit(np.random.default_rng(0).standard_normal((10, 6)))
    assert two_way_identification(T, T) == 1.0
    assert topk_retrieval(T, T, 1) == 1.0


def test_swapped_pair():
    T = np.eye(2)
    assert two_way_identification(T[::-1], T) == 0.0


def test_null_distribution():
    for seed in range(5):
        rng = np.random.default_rng(seed)
        acc = two_way_identification(unit(rng.standard_normal((100, 64))),
                                     unit(rng.standard_normal((100, 64))))
        assert 0.42 <= acc <= 0.58


def test_ties_count_half():
    P = np.array([[1.0, 0.0], [1.0, 0.0]])
    T = np.array([[0.0, 1.0], [0.0, 1.0]])
    assert two_way_identification(P, T) == 0.5


def test_two_way_needs_two():
    with pytest.raises(ValueError):
        two_way_identification(np.ones((1, 3)), np.ones((1, 3)))


def test_topk_full_gallery():
    rng = np.random.default_rng(1)
    P, T = rng.standard_normal((7, 4)), rng.standard_normal((7, 4))
    assert topk_retrieval(P, T, 7) == 1.0
    with pytest.raises(ValueError):
        topk_retrieval(P, T, 0)


def test_topk_hand_case():
    T = np.array([[1.0, 0], [0, 1.0], [-1.0, 0]])
    P = np.array([[0.9, 0.1], [0.9, 0.2], [0.0, -1.0]])
    # cosines: item1 sees [0.976, 0.217, -0.976] -> own rank 1; item2 all tied with T0/T2 at 0
    assert retrieval_ranks(P, T).tolist() == [0, 1, 1]
    assert topk_retrieval(P, T, 1) == pytest.approx(1 / 3)
    assert topk_retrieval(P, T, 2) == 1.0


@given(st.integers(0, 10_000))
def test_topk_monotone(seed):
    rng = np.random.default_rng(seed)
    P, T = rng.standard_normal((9, 5)), rng.standard_normal((9, 5))
    vals = [topk_retrieval(P, T, k) for k in range(1, 10)]
    assert all(a <= b for a, b in zip(vals, vals[1:]))


@given(st.integers(0, 10_000))
def test_rotation_invariance(seed):
    rng = np.random.default_rng(seed)
    P, T = rng.standard_normal((12, 6)), rng.standard_normal((12, 6))
    Q = ortho_group.rvs(6, random_state=seed)
    assert np.allclose(cosine_matrix(P @ Q, T @ Q), cosine_matrix(P, T), atol=1e-9)
    a = evaluate(P, T, np.zeros(12, int))
    b = evaluate(P @ Q, T @ Q, np.zeros(12, int))
    assert abs(a.two_way_accuracy - b.two_way_accuracy) <= 1e-9
    assert abs(a.mean_cosine - b.mean_cosine) <= 1e-9


def test_reconstruct_exact_and_prototype():
    ss = make_stimuli(0, 5, 6, 16, 0.15)
    assert reconstruct_by_retrieval(ss.stimuli[13].embedding, ss) == ss.stimuli[13].stimulus_id
    for seed in range(20):
        ss = make_stimuli(seed, 5, 6, 16, 0.15)
        for c in range(5):
            sid = reconstruct_by_retrieval(ss.prototypes[c], ss)
            assert ss[sid].class_id == c


def test_reconstruct_orthogonal_gives_first():
    ss = make_stimuli(0, 2, 2, 4, 0.0)
    for s in ss.stimuli:
        s.embedding = np.array([1.0, 0, 0, 0])
    assert reconstruct_by_retrieval(np.array([0, 1.0, 0, 0]), ss) == ss.stimuli[0].stimulus_id


def test_report_perfect_and_fields():
    ss = make_stimuli(1, 3, 4, 8, 0.15)
    T = ss.embeddings
    cls = [s.class_id for s in ss.stimuli]
    r = evaluate(T, T, cls, ss, (1, 5))
    assert r.two_way_accuracy == 1.0 and r.topk == {1: 1.0, 5: 1.0}
    assert r.mean_cosine == pytest.approx(1.0) and r.retrieval_class_accuracy == 1.0
    assert r.n_test == 12 and set(r.per_class) == {0, 1, 2}
    assert all(0 <= v <= 1 for v in r.per_class.values())


def test_rows_to_csv_deterministic():
    rows = [{"a": 1, "b": 0.1}, {"a": 2, "b": 1 / 3}]
    text = rows_to_csv(rows)
    assert text == "a,b\n1,0.1\n2,0.3333333333333333\n"
    assert rows_to_csv([]) == ""
