import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dfcreg import weighting
from dfcreg.errors import ShapeMismatch
from dfcreg.selfcheck import rel_error


def toy_params():
    # 2 -> 2 -> 2 -> 1, every number picked by hand
    return {
        "fc1.weight": np.array([[1.0, -1.0], [2.0, 0.5]]),
        "fc1.bias": np.array([0.5, 0.25]),
        "fc2.weight": np.array([[1.0, 2.0], [-1.0, 1.0]]),
        "fc2.bias": np.array([0.0, -0.5]),
        "fc3.weight": np.array([[0.5], [-1.0]]),
        "fc3.bias": np.array([0.1]),
    }


def test_zero_params_give_one_half():
    p = weighting.init_params(6, np.random.default_rng(0), (4, 3))
    p = {k: np.zeros_like(v) for k, v in p.items()}
    c = weighting.confidence(p, np.random.default_rng(1).standard_normal((9, 6)))
    assert np.array_equal(c, np.full(9, 0.5))


def test_hand_computed_toy():
    # x = (1, 0): h1 = relu(1 + .5, -1 + .25) = (1.5, 0)
    # h2 = relu(1.5, 3 - .5) = (1.5, 2.5); z = .75 - 2.5 + .1 = -1.65
    c = weighting.confidence(toy_params(), np.array([[1.0, 0.0]]))
    assert abs(c[0] - 1.0 / (1.0 + np.exp(1.65))) < 1e-15


def test_rows_are_independent():
    rng = np.random.default_rng(2)
    p = weighting.init_params(8, rng, (16, 8))
    x = rng.standard_normal((30, 8))
    c = weighting.confidence(p, x)
    perm = rng.permutation(30)
    assert np.array_equal(weighting.confidence(p, x[perm]), c[perm])
    assert np.array_equal(weighting.confidence(p, x[:1]), c[:1])
    assert np.all((c > 0) & (c < 1))


def test_shape_mismatch():
    p = weighting.init_params(8, np.random.default_rng(0))
    with pytest.raises(ShapeMismatch):
        weighting.confidence(p, np.zeros((3, 7)))
    del p["fc2.bias"]
    with pytest.raises(ShapeMismatch):
        weighting.confidence(p, np.zeros((3, 8)))


def test_mlp_gradient_finite_differences():
    rng = np.random.default_rng(3)
    p = weighting.init_params(5, rng, (7, 4))
    for k in p:
        if k.endswith("bias"):
            p[k] = 0.1 * rng.standard_normal(p[k].shape)
    x = rng.standard_normal((12, 5))
    a = rng.standard_normal(12)

    def loss():
        return float(a @ weighting.confidence(p, x))

    z, cache = weighting.logits_forward(p, x)
    s = weighting.confidence(p, x)
    g, dx = weighting.logits_backward(a * s * (1 - s), cache)
    h = 1e-6
    for name in p:
        flat = p[name].reshape(-1)
        fd = np.empty(flat.size)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + h
            lp = loss()
            flat[i] = old - h
            lm = loss()
            flat[i] = old
            fd[i] = (lp - lm) / (2 * h)
        assert rel_error(g[name], fd) < 1e-4, name


def test_sample_candidates_examples():
    c = weighting.sample_candidates([0.9, 0.1, 0.8, 0.7, 0.2], 3)
    assert c.indices.tolist() == [0, 2, 3]
    assert c.confidences.tolist() == [0.9, 0.8, 0.7]
    assert weighting.sample_candidates([0.3] * 4, 2).indices.tolist() == [0, 1]
    full = weighting.sample_candidates([0.2, 0.5, 0.1], 3)
    assert full.indices.tolist() == [1, 0, 2]
    assert weighting.sample_candidates([0.2, 0.5], 10).indices.tolist() == [1, 0]
    with pytest.raises(ValueError):
        weighting.sample_candidates([0.5], 0)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**31), st.integers(1, 60), st.integers(1, 80), st.booleans())
def test_sample_candidates_properties(seed, n, n_s, coarse):
    rng = np.random.default_rng(seed)
    c = rng.integers(0, 4, n) / 4.0 if coarse else rng.random(n)
    cs = weighting.sample_candidates(c, n_s)
    idx = cs.indices
    assert len(idx) == min(n, n_s) and len(np.unique(idx)) == len(idx)
    assert np.all((idx >= 0) & (idx < n))
    assert np.all(np.diff(cs.confidences) <= 0)
    # nothing left out beats anything taken, and ties go to the lower index
    rest = np.setdiff1d(np.arange(n), idx)
    if len(rest):
        worst = cs.confidences[-1]
        assert c[rest].max() <= worst
        assert not np.any((c[rest] == worst) & (rest < idx[cs.confidences == worst].max()))
    # raising a selected entry never evicts it
    j = int(idx[rng.integers(len(idx))])
    c2 = c.copy()
    c2[j] += rng.random()
    assert j in weighting.sample_candidates(c2, n_s).indices
