import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from relforge import rg_agent as R
from relforge import srg
from relforge.scene import SceneConfig, generate_dataset
from relforge.srg import RelationGraph

SOFTPLUS_0 = math.log(2.0)


def square(rows):
    return np.array(rows, dtype=float)


# ---- norms ----

def test_l21_examples():
    assert R.l21_norm(np.zeros((4, 4))) == 0.0
    assert R.l21_norm(square([[0, 1], [1, 0]])) == pytest.approx(2.0, abs=1e-12)
    G = square([[0, 3, 4], [0, 0, 0], [0, 0, 0]])
    assert R.l21_norm(G) == pytest.approx(5.0, abs=1e-12)


def test_l21_ignores_diagonal():
    assert R.l21_norm(np.eye(3)) == 0.0
    assert R.l21_norm(np.ones((3, 3))) == pytest.approx(3 * math.sqrt(2), abs=1e-12)


@settings(max_examples=200, deadline=None)
@given(st.integers(2, 7), st.floats(0, 1), st.integers(0, 10**6))
def test_l21_bounded_by_l1(n, density, seed):
    rng = np.random.default_rng(seed)
    G = rng.uniform(size=(n, n)) * (rng.uniform(size=(n, n)) < density)
    l21, l1 = R.l21_norm(G), R.l1_norm(G)
    assert l21 <= l1 + 1e-12
    nnz = (srg.offdiag(G) != 0).sum(axis=1)
    if np.all(nnz <= 1):
        assert l21 == pytest.approx(l1, abs=1e-12)
    else:
        assert l21 < l1 - 1e-12


# ---- reward ----

def _G(l21_target):
    # one nonzero per row keeps l21 equal to the entry sum
    G = np.zeros((3, 3))
    G[0, 1] = l21_target
    return G


def test_reward_examples():
    assert R.l21_norm(_G(3.0)) == 3.0
    r = R.rg_reward(_G(2.0), _G(3.0), 0.6, 0.4, 1, 0, 1, 15.0)
    assert r == 17.0
    assert R.rg_reward(_G(2.0), _G(2.0), 0.5, 0.5, 1, 1, 1, 15.0) == 0.0
    assert R.rg_reward(_G(3.0), _G(2.0), 0.4, 0.6, 0, 1, 1, 15.0) == -17.0


@settings(max_examples=300, deadline=None)
@given(st.integers(0, 10**6), st.floats(0, 50))
def test_reward_bounds(seed, omega):
    rng = np.random.default_rng(seed)
    G1, G0 = rng.uniform(size=(2, 4, 4))
    p1, p0 = rng.uniform(size=2)
    pred1, pred0, label = rng.integers(3, size=3)
    r = R.rg_reward(G1, G0, p1, p0, pred1, pred0, label, omega)
    assert -2 - omega <= r <= 2 + omega


# ---- gate application ----

def _graph(rng, N=3, De=2):
    He = rng.normal(size=(N, N, De))
    He = He + He.transpose(1, 0, 2)
    return RelationGraph(H_v=rng.normal(size=(N, 4)), H_e=He, G=np.ones((N, N)))


def test_apply_gates_symmetrises():
    rng = np.random.default_rng(0)
    g = _graph(rng)
    G = np.ones((3, 3))
    G[0, 1], G[1, 0] = 0.4, 0.8
    before = g.H_e.copy()
    R.apply_gates(g, G)
    assert g.G[0, 1] == g.G[1, 0] == pytest.approx(0.6)
    np.testing.assert_array_equal(g.G, g.G.T)
    np.testing.assert_allclose(g.H_e[0, 1], 0.6 * before[0, 1])


def test_apply_gates_ones_and_zeros():
    rng = np.random.default_rng(1)
    g = _graph(rng)
    before = g.H_e.copy()
    R.apply_gates(g, np.ones((3, 3)))
    np.testing.assert_array_equal(g.H_e[~np.eye(3, dtype=bool)], before[~np.eye(3, dtype=bool)])
    G = np.ones((3, 3))
    G[1, 2] = G[2, 1] = 0.0
    R.apply_gates(g, G)
    np.testing.assert_array_equal(g.H_e[1, 2], 0.0)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 10**6))
def test_apply_gates_idempotent_and_monotone(seed):
    rng = np.random.default_rng(seed)
    N = 4
    B = (rng.uniform(size=(N, N)) < 0.5).astype(float)
    B = np.maximum(B, B.T)
    g = _graph(rng, N)
    once = R.apply_gates(g, B).H_e.copy()
    twice = R.apply_gates(g, B).H_e
    np.testing.assert_array_equal(once, twice)

    G = rng.uniform(size=(N, N))
    G = (G + G.T) / 2
    smaller = G * rng.uniform(size=(N, N))
    smaller = np.minimum(smaller, smaller.T)
    base = _graph(np.random.default_rng(seed + 1), N)
    a = R.apply_gates(RelationGraph(base.H_v, base.H_e.copy(), base.G), G).H_e
    b = R.apply_gates(RelationGraph(base.H_v, base.H_e.copy(), base.G), smaller).H_e
    assert np.all(np.abs(b) <= np.abs(a) + 1e-15)


# ---- state and network ----

def test_state_of_two_person_graph():
    Hv = np.array([[1.0, 2.0], [3.0, 4.0]])
    He = np.arange(8, dtype=float).reshape(2, 2, 2)
    s = R.build_rg_state(Hv, He, np.array([0.5, -0.5]))
    assert s.edges == [(0, 1)]
    np.testing.assert_array_equal(s.S_l, [[1, 2, 2, 3, 3, 4]])
    s1 = R.build_rg_state(Hv, He, np.zeros(2), edge=(1, 0))
    np.testing.assert_array_equal(s1.S_l, s.S_l)
    with pytest.raises(ValueError):
        R.build_rg_state(Hv, He, np.zeros(2), edge=(1, 1))


SMALL = R.RGAgentConfig(d_v=4, d_e=3, n_classes=3, fc1=6, fc2=5, fc3=6, fc4=5, fc5=4, fc6=5,
                        fc7=5, hidden=6)


def _state(rng, N=4):
    return R.build_rg_state(rng.normal(size=(N, 4)), rng.normal(size=(N, N, 3)),
                            rng.normal(size=3))


def test_zero_params_outputs():
    p = {k: np.zeros_like(v) for k, v in R.init_params(SMALL, np.random.default_rng(0)).items()}
    s = _state(np.random.default_rng(1))
    out = R.rg_forward(p, s, R.zero_memory(SMALL, len(s.edges)))
    np.testing.assert_array_equal(out["mu"], 0.5)
    np.testing.assert_allclose(out["sigma"], SOFTPLUS_0 + 1e-3, atol=1e-15)
    np.testing.assert_array_equal(out["V"], 0.0)


def test_forward_deterministic():
    p = R.init_params(SMALL, np.random.default_rng(0))
    s = _state(np.random.default_rng(1))
    m = R.zero_memory(SMALL, len(s.edges))
    a, b = R.rg_forward(p, s, m), R.rg_forward(p, s, m)
    np.testing.assert_array_equal(a["mu"], b["mu"])
    np.testing.assert_array_equal(a["sigma"], b["sigma"])


def test_sigma_is_capped():
    p = R.init_params(SMALL, np.random.default_rng(0))
    p["sigma.b"][:] = 50.0
    s = _state(np.random.default_rng(1))
    out = R.rg_forward(p, s, R.zero_memory(SMALL, len(s.edges)))
    np.testing.assert_array_equal(out["sigma"], 1.0)


def test_mu_bias_gradient_matches_closed_form():
    """d/d mu.b of sum log N(g; mu, sigma) is sum (g - mu) / sigma^2 * mu (1 - mu)."""
    p = R.init_params(SMALL, np.random.default_rng(0))
    s = _state(np.random.default_rng(1))
    pol = R.RGPolicy(SMALL)
    step, _ = pol.act(p, s, pol.initial_memory(s), "train", np.random.default_rng(2))
    mu, sigma = step.cache["mu"], step.cache["sigma"]
    want = np.sum((step.action - mu) / sigma ** 2 * mu * (1 - mu))
    mem = step.cache["memory"]
    g, _ = pol.backward(p, step, 1.0, 0.0, 0.0, (np.zeros_like(mem[0]), np.zeros_like(mem[1])))
    assert g["mu.b"][0] == pytest.approx(want, rel=1e-12)


# ---- sampling ----

def test_sample_test_mode_is_mean():
    mu = np.array([0.1, 0.5, 0.93])
    g, _ = R.sample_gate(mu, np.full(3, 0.3), "test")
    np.testing.assert_array_equal(g, mu)


def test_sample_small_sigma_concentrates():
    g, _ = R.sample_gate(np.full(1000, 0.3), np.full(1000, 1e-9), "train",
                         np.random.default_rng(0))
    assert np.max(np.abs(g - 0.3)) < 1e-7


def test_sample_mean():
    g, _ = R.sample_gate(np.full(10 ** 5, 0.5), np.full(10 ** 5, 0.1), "train",
                         np.random.default_rng(0))
    assert abs(g.mean() - 0.5) <= 0.01
    assert g.min() >= 0.0 and g.max() <= 1.0


def test_sample_log_prob_at_clamped_value():
    g, lp = R.sample_gate(np.array([0.99]), np.array([0.5]), "train", np.random.default_rng(3))
    np.testing.assert_allclose(lp, R.gaussian_log_prob(g, 0.99, 0.5))


def test_sample_rejects_nonpositive_sigma():
    with pytest.raises(ValueError):
        R.sample_gate(np.array([0.5]), np.array([0.0]))


def test_gaussian_entropy_unit_sigma():
    assert R.gaussian_entropy(1.0) == pytest.approx(0.5 * math.log(2 * math.pi * math.e))
    assert abs(R.gaussian_entropy(1.0) - 1.4189) < 1e-4


# ---- episodes ----

def _episode_setup(n_persons):
    scfg = SceneConfig(n_clips=3, n_classes=3, n_persons=n_persons, n_frames=3, d_feature=5,
                       t_distill=2)
    batch = srg.ClipBatch.from_clips(generate_dataset(scfg, 0)).subset([0])
    sp = srg.init_params(srg.SRGConfig(d_feature=5, n_classes=3, d_v=4, d_e=3),
                         np.random.default_rng(0))
    return batch, sp, R.init_params(SMALL, np.random.default_rng(1))


def test_episode_without_steps():
    batch, sp, ap = _episode_setup(4)
    buf, G, env = R.rg_episode(batch, sp, ap, SMALL, n_steps=0)
    assert len(buf) == 0
    np.testing.assert_array_equal(G, np.ones((4, 4)))


def test_episode_three_persons_emits_three_gates_per_step():
    batch, sp, ap = _episode_setup(3)
    buf, G, env = R.rg_episode(batch, sp, ap, SMALL, n_steps=4, mode="train",
                               rng=np.random.default_rng(0))
    assert len(buf) == 4
    assert all(len(s.action) == 3 for s in buf.steps)
    assert [t["step"] for t in env.trace] == [1, 2, 3, 4]
    assert set(env.trace[0]) == {"step", "l21", "p_correct", "reward", "gates"}
    np.testing.assert_array_equal(G, G.T)
    last = buf.steps[-1].action
    assert G[0, 1] == last[0] and G[0, 2] == last[1] and G[1, 2] == last[2]


def test_episode_rewards_match_trace():
    batch, sp, ap = _episode_setup(4)
    buf, _, env = R.rg_episode(batch, sp, ap, SMALL, n_steps=3, mode="train",
                               rng=np.random.default_rng(5))
    np.testing.assert_array_equal(buf.rewards, [t["reward"] for t in env.trace])
    assert np.all(np.abs(buf.rewards) <= 17)
