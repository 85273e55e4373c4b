import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from hsdiff import oracle, purify
from hsdiff.purify import PurifyConfig


def _close(a, b, rel=1e-12):
    a, b = np.asarray(a), np.asarray(b)
    scale = max(np.abs(b).max(initial=0.0), 1e-300)
    return np.abs(a - b).max(initial=0.0) <= rel * scale


# --------------------------------------------------------------------------- representative matrix


def test_rep_matrix_single_sample_per_class(rng):
    center = rng.standard_normal((3, 2, 5)).astype(np.float32)
    rep = purify.rep_matrix(center, [2, 1, 3], 3)
    np.testing.assert_array_equal(rep.M[:, 0], center[1])
    np.testing.assert_array_equal(rep.M[:, 1], center[0])
    assert rep.class_counts == (1, 1, 1)


def test_rep_matrix_identical_samples(rng):
    row = rng.standard_normal((2, 4)).astype(np.float32)
    center = np.stack([row, row, row + 1])
    rep = purify.rep_matrix(center, [1, 1, 2], 2)
    np.testing.assert_array_equal(rep.M[:, 0], row.astype(np.float64))


def test_rep_matrix_matches_loop_oracle(rng):
    center = rng.standard_normal((5, 3, 7)).astype(np.float32)
    labels = [1, 2, 1, 2, 2]
    rep = purify.rep_matrix(center, labels, 2)
    assert rep.M.dtype == np.float64
    assert _close(rep.M, oracle.naive_rep_matrix(center, labels, 2))


def test_rep_matrix_empty_class(rng):
    with pytest.raises(ValueError, match="class 3"):
        purify.rep_matrix(rng.standard_normal((2, 2, 2)), [1, 2], 3)


# --------------------------------------------------------------------------- scores


def test_identical_classes_hand_value():
    M = np.ones((3, 2, 1))
    assert purify.class_score(M, 0.5)[0] == pytest.approx(-0.25, abs=1e-15)


def test_single_channel_hand_computation():
    # M[0] = (1, 3), M[1] = (2, 4) over two classes, alpha = beta = 0.5
    # U_class = (1*3 + 3*1 + 2*4 + 4*2) / (2 * 2^2) = 22/8;  V_class = (1 + 1 + 1 + 1) / (2 * 2) = 1
    # U_t = (1*2 + 2*1 + 3*4 + 4*3) / (2 * 2^2) = 28/8;      V_t = (4 * 0.25) / (2 * 2) = 0.25
    M = np.array([[[1.0], [3.0]], [[2.0], [4.0]]])
    tc, tt = purify.class_score(M, 0.5), purify.timestep_score(M, 0.5)
    assert tc[0] == -0.5 * 22 / 8 + 0.5 * 1
    assert tt[0] == -0.5 * 28 / 8 + 0.5 * 0.25
    otc, ott = oracle.naive_scores(M, 0.5, 0.5)
    assert (otc[0], ott[0]) == (tc[0], tt[0])


def test_zero_matrix_zero_scores():
    M = np.zeros((3, 4, 5))
    assert np.all(purify.class_score(M, 0.3) == 0)
    assert np.all(purify.timestep_score(M, 0.7) == 0)


def test_constant_across_timesteps_has_no_timestep_spread(rng):
    dyadic = np.repeat(rng.integers(-8, 8, (1, 3, 4)) / 4.0, 4, axis=0)
    _, Vt = purify._pair_and_spread(dyadic.transpose(1, 0, 2))
    assert np.all(Vt == 0)
    M = np.repeat(rng.standard_normal((1, 3, 4)), 5, axis=0)
    _, Vt = purify._pair_and_spread(M.transpose(1, 0, 2))
    assert np.all(Vt < 1e-30)


def test_score_preconditions():
    with pytest.raises(ValueError):
        purify.class_score(np.ones((3, 1, 2)), 0.5)
    with pytest.raises(ValueError):
        purify.timestep_score(np.ones((1, 3, 2)), 0.5)
    with pytest.raises(ValueError):
        PurifyConfig(alpha=1.0).validate()
    with pytest.raises(ValueError):
        PurifyConfig(beta=0.0).validate()


@pytest.mark.parametrize("shape,alpha", [((3, 4, 6), 0.3), ((4, 2, 5), 0.7)])
def test_scores_match_oracle(rng, shape, alpha):
    M = rng.standard_normal(shape)
    tc, tt = oracle.naive_scores(M, alpha, alpha)
    assert _close(purify.class_score(M, alpha), tc)
    assert _close(purify.timestep_score(M, alpha), tt)


small = st.tuples(st.integers(2, 5), st.integers(2, 5), st.integers(1, 6))


@settings(max_examples=50, deadline=None)
@given(dims=small, seed=st.integers(0, 10**6), alpha=st.sampled_from([0.1, 0.5, 0.9]),
       beta=st.sampled_from([0.1, 0.5, 0.9]))
def test_oracle_equivalence_property(dims, seed, alpha, beta):
    M = np.random.default_rng(seed).standard_normal(dims) * 3
    tc, tt = oracle.naive_scores(M, alpha, beta)
    assert _close(purify.class_score(M, alpha), tc)
    assert _close(purify.timestep_score(M, beta), tt)
    K = 1 + seed % dims[2]
    assert list(purify.select_topk(tc, tt, K).kept) == oracle.naive_topk(tc + tt, K)


@settings(max_examples=40, deadline=None)
@given(dims=small, seed=st.integers(0, 10**6))
def test_permutation_invariance(dims, seed):
    g = np.random.default_rng(seed)
    M = g.standard_normal(dims)
    base = purify.class_score(M, 0.4), purify.timestep_score(M, 0.6)
    for Mp in (M[:, g.permutation(dims[1])], M[g.permutation(dims[0])]):
        assert np.allclose(purify.class_score(Mp, 0.4), base[0], rtol=1e-12, atol=1e-12)
        assert np.allclose(purify.timestep_score(Mp, 0.6), base[1], rtol=1e-12, atol=1e-12)


@settings(max_examples=40, deadline=None)
@given(dims=small, seed=st.integers(0, 10**6), stretch=st.floats(1.0, 5.0))
def test_class_spread_monotone(dims, seed, stretch):
    M = np.random.default_rng(seed).standard_normal(dims)
    mean = M.mean(axis=1, keepdims=True)
    wider = mean + stretch * (M - mean)
    _, V = purify._pair_and_spread(M)
    _, V2 = purify._pair_and_spread(wider)
    assert np.all(V2 >= V * (1 - 1e-12))


def test_scores_independent_of_chunking(rng, monkeypatch):
    M = rng.standard_normal((4, 5, 37))
    full = purify.class_score(M, 0.5), purify.timestep_score(M, 0.5)
    monkeypatch.setattr(purify, "_CHUNK_ELEMS", 7)
    np.testing.assert_array_equal(purify.class_score(M, 0.5), full[0])
    np.testing.assert_array_equal(purify.timestep_score(M, 0.5), full[1])


def test_normalize_features_flag_changes_only_scale(rng):
    M = rng.standard_normal((3, 3, 4))
    M2 = M * 10
    a = purify.class_score(M, 0.5, normalize_features=True)
    b = purify.class_score(M2, 0.5, normalize_features=True)
    np.testing.assert_allclose(a, b, rtol=1e-12, atol=1e-15)


# --------------------------------------------------------------------------- selection


def test_select_all_channels():
    idx = purify.select_topk(np.arange(5.0), np.zeros(5), 5)
    assert idx.kept == (0, 1, 2, 3, 4)
    np.testing.assert_array_equal(idx.tau, idx.tau_class + idx.tau_t)


def test_tie_break_lower_id():
    assert purify.select_topk(np.array([0.0, 1.0, 1.0]), np.zeros(3), 1).kept == (1,)


def test_k_out_of_range():
    with pytest.raises(ValueError):
        purify.select_topk(np.zeros(3), np.zeros(3), 0)
    with pytest.raises(ValueError):
        purify.select_topk(np.zeros(3), np.zeros(3), 4)


def test_discriminative_channel_ranks_first():
    m, C, d = 2, 2, 4
    M = np.ones((m, C, d))
    M[:, 0, 2], M[:, 1, 2] = 20.0, 0.0  # class spread 100, zero cross-products
    tc, tt = purify.class_score(M, 0.5), purify.timestep_score(M, 0.5)
    ranking = np.argsort(-(tc + tt), kind="stable")
    assert ranking[0] == 2
    assert purify.select_topk(tc, tt, 1).kept == (2,)
    otc, ott = oracle.naive_scores(M, 0.5, 0.5)
    assert oracle.naive_topk(otc + ott, 1) == [2]


# --------------------------------------------------------------------------- gather


def test_gather_contract(rng):
    center = rng.standard_normal((4, 3, 6)).astype(np.float32)
    full = purify.select_topk(np.zeros(6), np.zeros(6), 6)
    np.testing.assert_array_equal(purify.apply_purification(center, full), center)
    idx = purify.PurificationIndex((2, 5), np.zeros(6), np.zeros(6), np.zeros(6))
    out = purify.apply_purification(center, idx)
    np.testing.assert_array_equal(out[..., 0], center[..., 2])
    np.testing.assert_array_equal(out[..., 1], center[..., 5])
    np.testing.assert_array_equal(out, oracle.naive_gather(center, idx.kept))
    assert out.sum(dtype=np.float64) == center[..., [2, 5]].sum(dtype=np.float64)
    with pytest.raises(ValueError):
        purify.apply_purification(center[..., :5], idx)


def test_index_persistence_is_deterministic(tmp_path, rng):
    center = rng.standard_normal((12, 3, 8)).astype(np.float32)
    labels = np.repeat([1, 2, 3], 4)
    cfg = PurifyConfig(K=3)
    _, a = purify.purify(center, labels, 3, cfg)
    _, b = purify.purify(center, labels, 3, cfg)
    purify.save_index(a, tmp_path / "a.json", cfg)
    purify.save_index(b, tmp_path / "b.json", cfg)
    assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()
    back = purify.load_index(tmp_path / "a.json")
    assert back.kept == a.kept and back.digest() == a.digest()
    np.testing.assert_array_equal(back.tau, a.tau)


def test_default_k():
    assert PurifyConfig().resolve_K(48) == 48
    assert PurifyConfig().resolve_K(1000) == 256
    assert PurifyConfig(K=5).resolve_K(1000) == 5
