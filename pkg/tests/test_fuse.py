import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from torch.nn.utils import parameters_to_vector, vector_to_parameters

from hsdiff import fuse, oracle
from hsdiff.fuse import FusionClassifier, SelectiveFusion, TrainConfig

logit_arrays = st.tuples(st.integers(1, 6), st.integers(1, 6), st.integers(0, 10**6), st.floats(0.1, 30))


def _logits(dims):
    m, K, seed, scale = dims
    return torch.from_numpy(np.random.default_rng(seed).standard_normal((3, m, K)) * scale)


# --------------------------------------------------------------------------- softmax laws


@settings(max_examples=60, deadline=None)
@given(dims=logit_arrays, shift=st.floats(-50, 50))
def test_softmax_sums_to_one_and_is_shift_invariant(dims, shift):
    a = _logits(dims).float()
    w = fuse.timestep_softmax(a)
    assert torch.all((w.sum(dim=1) - 1).abs() <= 1e-5)
    assert torch.all(w >= 0)
    torch.testing.assert_close(fuse.timestep_softmax(a + shift), w, atol=1e-6, rtol=1e-5)


@settings(max_examples=30, deadline=None)
@given(m=st.integers(1, 8), value=st.floats(-100, 100))
def test_equal_logits_give_uniform_weights(m, value):
    w = fuse.timestep_softmax(torch.full((2, m, 5), value))
    assert torch.all(w == 1.0 / m) if m in (1, 2, 4, 8) else torch.allclose(w, torch.full_like(w, 1.0 / m))


def test_single_timestep_weight_is_one():
    assert torch.all(fuse.timestep_softmax(torch.randn(4, 1, 7)) == 1)


def test_one_hot_weights_select_the_timestep(rng):
    c = torch.from_numpy(rng.standard_normal((5, 4, 6)).astype(np.float32))
    for i in range(4):
        w = torch.zeros_like(c)
        w[:, i] = 1
        assert torch.equal(fuse.fuse(c, w), c[:, i])
        # a saturated softmax reaches the same limit
        logits = torch.zeros_like(c)
        logits[:, i] = 500
        assert torch.equal(fuse.fuse(c, fuse.timestep_softmax(logits)), c[:, i])


def test_average_mode_is_uniform_fusion(rng):
    c = torch.from_numpy(rng.standard_normal((6, 5, 3)).astype(np.float32))
    model = FusionClassifier("average", 5, 3, 0, 2, hidden=(4, 4))
    assert torch.equal(model.represent(c, None), fuse.fuse(c, fuse.uniform_weights(c)))
    torch.testing.assert_close(model.represent(c, None), c.mean(dim=1))
    manual = FusionClassifier("manual", 5, 3, 0, 2, hidden=(4, 4), timestep=2)
    assert torch.equal(manual.represent(c, None), c[:, 2])


def test_fuse_shape_mismatch():
    with pytest.raises(ValueError):
        fuse.fuse(torch.zeros(2, 3, 4), torch.zeros(2, 3, 5))


# --------------------------------------------------------------------------- fusion module


def test_compact_zero_and_identity_cases():
    f = SelectiveFusion(3, 4, 2).double()
    f.eval()
    for lin in (f.W2, f.W1):
        torch.nn.init.zeros_(lin.weight)
        torch.nn.init.zeros_(lin.bias)
    z = f.compact(torch.randn(5, 4, dtype=torch.float64))
    assert torch.all(z == 0)
    # K_r = K/2: W2 picks the first two inputs, running stats are (0, 1), W1 is the identity
    with torch.no_grad():
        f.W2.weight.copy_(torch.eye(2, 4))
        f.W1.weight.copy_(torch.eye(2))
    x = torch.tensor([[1.0, -2.0, 3.0, 4.0], [-1.0, 0.5, 0.0, 0.0]], dtype=torch.float64)
    expected = torch.relu(x[:, :2]) / np.sqrt(1 + f.bn.eps)
    torch.testing.assert_close(f.compact(x), expected, rtol=1e-15, atol=0)


def test_logits_match_loop_oracle(rng):
    m, K, d_g = 3, 4, 2
    f = SelectiveFusion(m, K, d_g).double()
    z = torch.from_numpy(rng.standard_normal((2, f.K_r)))
    g = torch.from_numpy(rng.standard_normal((2, m, d_g)))
    out = f.logits(z, g).detach().numpy()
    Fw, Fb = f.F_weight.detach().numpy(), f.F_bias.detach().numpy()
    Ww, Wb = f.W_weight.detach().numpy(), f.W_bias.detach().numpy()
    for b in range(2):
        for i in range(m):
            h = [a + bias for a, bias in zip(oracle.naive_matmul(Fw[i], z[b].numpy()[:, None])[:, 0], Fb[i])]
            u = np.array(h + list(g[b, i].numpy()))
            expect = oracle.naive_matmul(Ww[i], u[:, None])[:, 0] + Wb[i]
            np.testing.assert_allclose(out[b, i], expect, rtol=1e-12, atol=1e-14)
    with pytest.raises(ValueError):
        f.logits(z, None)
    assert SelectiveFusion(m, K, d_g, guidance=False).W_weight.shape == (m, K, K)


def test_end_to_end_gradient_matches_finite_differences(rng):
    torch.manual_seed(3)
    model = FusionClassifier("selective", 2, 4, 3, 2, hidden=(6, 5)).double()
    n = sum(p.numel() for p in model.parameters())
    assert n <= 5000
    c = torch.from_numpy(rng.standard_normal((6, 2, 4)))
    g = torch.from_numpy(rng.standard_normal((6, 2, 3)))
    y = torch.tensor([0, 1, 1, 0, 1, 0])
    model.train()

    def loss_of():
        return torch.nn.functional.cross_entropy(model(c, g), y)

    loss_of().backward()
    analytic = np.concatenate([p.grad.reshape(-1).numpy() for p in model.parameters()])
    p0 = parameters_to_vector(model.parameters()).detach().numpy().copy()

    def f(p):
        with torch.no_grad():
            vector_to_parameters(torch.from_numpy(p), model.parameters())
            return float(loss_of())

    assert oracle.relative_error(analytic, oracle.fd_grad(f, p0, 1e-6)) < 1e-4


# --------------------------------------------------------------------------- voting


def test_majority_vote_ties_and_e1():
    votes = np.array([[1, 2, 3], [2, 2, 1], [3, 1, 2], [2, 3, 1]])
    assert fuse.majority_vote(votes, 3).tolist() == [2, 2, 1]
    assert fuse.majority_vote(np.array([[1, 3], [3, 1]]), 3).tolist() == [1, 1]
    single = np.array([[3, 1, 2]])
    assert fuse.majority_vote(single, 3).tolist() == [3, 1, 2]


@settings(max_examples=40, deadline=None)
@given(E=st.integers(1, 7), n=st.integers(1, 10), C=st.integers(1, 5), seed=st.integers(0, 10**6))
def test_majority_vote_matches_counting_and_is_order_free(E, n, C, seed):
    g = np.random.default_rng(seed)
    votes = g.integers(1, C + 1, (E, n))
    out = fuse.majority_vote(votes, C)
    for j in range(n):
        counts = [int(np.sum(votes[:, j] == k)) for k in range(1, C + 1)]
        assert out[j] == 1 + counts.index(max(counts))
    assert np.array_equal(fuse.majority_vote(votes[g.permutation(E)], C), out)


# --------------------------------------------------------------------------- training


def _separable(rng, n=60, m=3, K=6, d_g=4):
    y = np.repeat([1, 2, 3], n // 3)
    centers = rng.standard_normal((3, K)) * 4
    c = centers[y - 1][:, None, :] + 0.3 * rng.standard_normal((n, m, K))
    g = rng.standard_normal((n, m, d_g))
    return c.astype(np.float32), g.astype(np.float32), y


def test_separable_data_fits_perfectly(rng):
    c, g, y = _separable(rng)
    ens = fuse.train_ensemble(c, g, y, TrainConfig(E=3, epochs=40, lr=1e-2, lr_min=1e-4, batch_size=16, hidden=(16, 8)))
    assert ens.E == 3 and len(ens.loss_curves) == 3
    assert ens.loss_curves[0][-1] < ens.loss_curves[0][0]
    assert np.array_equal(fuse.predict(ens, c, g), y)


@pytest.mark.parametrize("mode", ["selective", "selective_noguide", "average"])
def test_training_is_deterministic(rng, mode):
    c, g, y = _separable(rng, n=30)
    cfg = TrainConfig(E=2, epochs=3, batch_size=8, hidden=(8, 4), mode=mode, seed=4)
    a, b = fuse.train_ensemble(c, g, y, cfg), fuse.train_ensemble(c, g, y, cfg)
    assert a.loss_curves == b.loss_curves
    for ma, mb in zip(a.members, b.members):
        for (k, v), (_, w) in zip(ma.state_dict().items(), mb.state_dict().items()):
            assert torch.equal(v, w), k
    other = fuse.train_ensemble(c, g, y, TrainConfig(**{**cfg.__dict__, "seed": 5}))
    assert other.loss_curves != a.loss_curves


def test_save_load_roundtrip(tmp_path, rng):
    c, g, y = _separable(rng, n=30)
    ens = fuse.train_ensemble(c, g, y, TrainConfig(E=2, epochs=2, batch_size=8, hidden=(8, 4)))
    fuse.save_ensemble(ens, tmp_path / "e", {"pin": "abc"})
    back = fuse.load_ensemble(tmp_path / "e")
    assert back.meta["pin"] == "abc"
    np.testing.assert_array_equal(fuse.member_votes(back, c, g), fuse.member_votes(ens, c, g))


def test_shared_fusion_and_manual(rng):
    c, g, y = _separable(rng, n=30)
    shared = fuse.train_ensemble(c, g, y, TrainConfig(E=3, epochs=2, batch_size=8, hidden=(8, 4), shared_fusion=True))
    assert shared.members[0].fusion is shared.members[2].fusion
    assert len(shared.loss_curves) == 1
    manual = fuse.manual_single_timestep(c, y, TrainConfig(E=2, epochs=2, batch_size=8, hidden=(8, 4)), timestep=1)
    assert manual.config.mode == "manual" and manual.members[0].timestep == 1
    assert fuse.predict(manual, c, None).shape == (30,)


def test_training_errors(rng):
    c, g, y = _separable(rng, n=30)
    with pytest.raises(ValueError, match="absent"):
        fuse.train_ensemble(c, g, y, TrainConfig(E=1, epochs=1), num_classes=4)
    with pytest.raises(ValueError):
        TrainConfig(E=0).validate()
    with pytest.raises(ValueError):
        FusionClassifier("manual", 3, 4, 0, 2, timestep=3)
    with pytest.raises(ValueError):
        FusionClassifier("bogus", 3, 4, 0, 2)
