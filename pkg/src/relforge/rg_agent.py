"""Relation-gating agent: a Gaussian actor-critic emitting one gate per edge.

Each reinforcement step cycles through the undirected edges in
lexicographic order and emits a gate for every one of them.  The edges of
a cycle are evaluated in one vectorised pass; each edge keeps its own
LSTM memory across reinforcement steps.

Network (all FC layers ReLU)::

    S_g (E, 2Dv+De) -> FC1 -> mean over edges -> FC2 ----+
    S_l (E, 2Dv+De) -> FC3 -> FC4 ------------------------+-> LSTM -+-> FC6 -> (mu, sigma)
    S_u (K,)        -> FC5 ----------------------------------+      +-> FC7 -> V

``mu = sigmoid(.)`` and ``sigma = min(softplus(.) + sigma_min, sigma_max)``.
The state value of a step is the mean of the per-edge critic outputs.
"""

from dataclasses import dataclass

import numpy as np

from .buffer import Step, TrajectoryBuffer
from .numerics import (affine_backward, affine_forward, class_log_prob, glorot, lstm_backward,
                       lstm_forward, lstm_init, relu_backward, relu_forward, sigmoid, softplus)
from . import srg as srg_mod

SIGMA_MIN = 1e-3
SIGMA_MAX = 1.0
LOG_2PI = np.log(2 * np.pi)


def edges_of(n):
    return [(i, j) for i in range(n) for j in range(i + 1, n)]


def l21_norm(G):
    """Sum of row Euclidean norms over the off-diagonal entries of ``G``."""
    G = np.asarray(G, dtype=float)
    if G.size == 0:
        return 0.0
    G = srg_mod.offdiag(G) if G.ndim == 2 and G.shape[0] == G.shape[1] else G
    return float(np.sqrt((G * G).sum(axis=-1)).sum())


def l1_norm(G):
    G = np.asarray(G, dtype=float)
    if G.ndim == 2 and G.shape[0] == G.shape[1]:
        G = srg_mod.offdiag(G)
    return float(np.abs(G).sum())


def shift_reward(pred_now, pred_before, label, omega):
    was, now = pred_before == label, pred_now == label
    if now and not was:
        return omega
    if was and not now:
        return -omega
    return 0.0


def rg_reward(G_now, G_before, p_now, p_before, pred_now, pred_before, label, omega=15.0):
    """Sparsity + ascending + class-shift reward of one gating step.

    ``p_now``/``p_before`` are the ground-truth class probabilities; only
    their ordering matters, so log-probabilities may be passed instead.
    """
    r_sparse = -np.sign(l21_norm(G_now) - l21_norm(G_before))
    r_ascend = np.sign(p_now - p_before)
    return float(r_sparse + r_ascend + shift_reward(pred_now, pred_before, label, omega))


def symmetrize_gates(G):
    G = np.asarray(G, dtype=float)
    return 0.5 * (G + G.T)


def apply_gates(graph, G):
    """Symmetrise ``G`` and scale the edge attributes of ``graph`` by it."""
    G = srg_mod.offdiag(symmetrize_gates(G))
    graph.H_e = G[..., None] * graph.H_e
    graph.G = G
    return graph


def gates_to_matrix(values, n):
    G = np.ones((n, n))
    for (i, j), g in zip(edges_of(n), values):
        G[i, j] = G[j, i] = g
    return G


@dataclass
class RgState:
    S_g: np.ndarray      # (E, 2Dv+De), every undirected edge's triplet
    S_l: np.ndarray      # (E_sel, 2Dv+De), triplets of the edges being gated
    S_u: np.ndarray      # (K,)
    edges: list


def build_rg_state(H_v, H_e, u, edge=None):
    """Assemble the gating state from node/edge attributes and ``u``.

    With ``edge=None`` the local part holds every edge of the cycle.
    """
    n = H_v.shape[0]
    edges = edges_of(n)
    ii = np.array([e[0] for e in edges])
    jj = np.array([e[1] for e in edges])
    trip = np.concatenate([H_v[ii], H_e[ii, jj], H_v[jj]], axis=-1)
    if edge is None:
        return RgState(trip, trip, np.asarray(u, float), edges)
    i, j = edge
    if i == j:
        raise ValueError("a relation needs two distinct persons")
    i, j = min(i, j), max(i, j)
    local = np.concatenate([H_v[i], H_e[i, j], H_v[j]])[None]
    return RgState(trip, local, np.asarray(u, float), [(i, j)])


@dataclass
class RGAgentConfig:
    d_v: int = 32
    d_e: int = 16
    n_classes: int = 4
    fc1: int = 64
    fc2: int = 32
    fc3: int = 64
    fc4: int = 32
    fc5: int = 32
    fc6: int = 16
    fc7: int = 32
    hidden: int = 32
    init_mu: float = 1.5
    init_sigma: float = 0.15


def init_params(cfg, rng):
    trip = 2 * cfg.d_v + cfg.d_e
    p = {}
    for name, o, i in [("fc1", cfg.fc1, trip), ("fc2", cfg.fc2, cfg.fc1), ("fc3", cfg.fc3, trip),
                       ("fc4", cfg.fc4, cfg.fc3), ("fc5", cfg.fc5, cfg.n_classes),
                       ("fc6", cfg.fc6, cfg.hidden), ("fc7", cfg.fc7, cfg.hidden)]:
        p[name + ".W"] = glorot(rng, o, i)
        p[name + ".b"] = np.zeros(o)
    p["lstm.W"], p["lstm.b"] = lstm_init(rng, cfg.fc2 + cfg.fc4 + cfg.fc5, cfg.hidden)
    p["mu.W"] = glorot(rng, 1, cfg.fc6) * 0.1
    p["mu.b"] = np.array([cfg.init_mu])
    p["sigma.W"] = glorot(rng, 1, cfg.fc6) * 0.1
    p["sigma.b"] = np.array([np.log(np.expm1(cfg.init_sigma))])
    p["v.W"] = glorot(rng, 1, cfg.fc7)
    p["v.b"] = np.zeros(1)
    return p


def zero_memory(cfg, n_edges):
    return np.zeros((n_edges, cfg.hidden)), np.zeros((n_edges, cfg.hidden))


def _fc(params, name, x):
    y, c = affine_forward(x, params[name + ".W"], params[name + ".b"])
    return relu_forward(y), c


def rg_forward(params, state, memory):
    """Returns a dict with ``mu``, ``sigma``, ``V`` (per edge), ``memory``, ``cache``."""
    S_l = np.atleast_2d(state.S_l)
    E = S_l.shape[0]
    a1, c1 = _fc(params, "fc1", state.S_g)
    pooled = a1.mean(axis=0)
    a2, c2 = _fc(params, "fc2", pooled)
    a3, c3 = _fc(params, "fc3", S_l)
    a4, c4 = _fc(params, "fc4", a3)
    a5, c5 = _fc(params, "fc5", state.S_u)
    z = np.concatenate([np.broadcast_to(a2, (E, a2.size)), a4,
                        np.broadcast_to(a5, (E, a5.size))], axis=-1)
    h, c, cl = lstm_forward(z, memory[0], memory[1], params["lstm.W"], params["lstm.b"])
    a6, c6 = _fc(params, "fc6", h)
    a7, c7 = _fc(params, "fc7", h)
    zmu, cmu = affine_forward(a6, params["mu.W"], params["mu.b"])
    zs, cs = affine_forward(a6, params["sigma.W"], params["sigma.b"])
    v, cv = affine_forward(a7, params["v.W"], params["v.b"])
    mu = sigmoid(zmu[:, 0])
    sig_raw = softplus(zs[:, 0]) + SIGMA_MIN
    sigma = np.minimum(sig_raw, SIGMA_MAX)
    cache = dict(a1=a1, c1=c1, a2=a2, c2=c2, a3=a3, c3=c3, a4=a4, c4=c4, a5=a5, c5=c5,
                 cl=cl, a6=a6, c6=c6, a7=a7, c7=c7, cmu=cmu, cs=cs, cv=cv, zs=zs[:, 0],
                 mu=mu, capped=sig_raw > SIGMA_MAX, E=E, n_g=state.S_g.shape[0])
    return {"mu": mu, "sigma": sigma, "V": v[:, 0], "memory": (h, c), "cache": cache}


def rg_backward(params, cache, d_mu, d_sigma, d_V, d_mem):
    """Backward of :func:`rg_forward`; returns ``(grads, d_memory_prev)``."""
    g = {}
    E = cache["E"]
    dzmu = (d_mu * cache["mu"] * (1 - cache["mu"]))[:, None]
    dzs = (d_sigma * sigmoid(cache["zs"]) * ~cache["capped"])[:, None]
    da6a, g["mu.W"], g["mu.b"] = affine_backward(cache["cmu"], params["mu.W"], dzmu)
    da6b, g["sigma.W"], g["sigma.b"] = affine_backward(cache["cs"], params["sigma.W"], dzs)
    da7, g["v.W"], g["v.b"] = affine_backward(cache["cv"], params["v.W"], np.asarray(d_V)[:, None])
    dh6, g["fc6.W"], g["fc6.b"] = affine_backward(
        cache["c6"], params["fc6.W"], relu_backward(cache["a6"], da6a + da6b))
    dh7, g["fc7.W"], g["fc7.b"] = affine_backward(
        cache["c7"], params["fc7.W"], relu_backward(cache["a7"], da7))
    dh = dh6 + dh7 + d_mem[0]
    dz, dhp, dcp, g["lstm.W"], g["lstm.b"] = lstm_backward(cache["cl"], params["lstm.W"], dh, d_mem[1])
    n2, n4 = cache["a2"].size, cache["a4"].shape[1]
    da2 = dz[:, :n2].sum(axis=0)
    da4 = dz[:, n2:n2 + n4]
    da5 = dz[:, n2 + n4:].sum(axis=0)
    _, g["fc5.W"], g["fc5.b"] = affine_backward(cache["c5"], params["fc5.W"],
                                                relu_backward(cache["a5"], da5)[None])
    da3, g["fc4.W"], g["fc4.b"] = affine_backward(cache["c4"], params["fc4.W"],
                                                  relu_backward(cache["a4"], da4))
    _, g["fc3.W"], g["fc3.b"] = affine_backward(cache["c3"], params["fc3.W"],
                                                relu_backward(cache["a3"], da3))
    dpool, g["fc2.W"], g["fc2.b"] = affine_backward(cache["c2"], params["fc2.W"],
                                                    relu_backward(cache["a2"], da2)[None])
    da1 = np.broadcast_to(dpool / cache["n_g"], cache["a1"].shape)
    _, g["fc1.W"], g["fc1.b"] = affine_backward(cache["c1"], params["fc1.W"],
                                                relu_backward(cache["a1"], da1))
    for k in ("fc5.W", "fc2.W"):
        g[k] = g[k].reshape(params[k].shape)
    return g, (dhp, dcp)


def gaussian_log_prob(x, mu, sigma):
    return -0.5 * ((x - mu) / sigma) ** 2 - np.log(sigma) - 0.5 * LOG_2PI


def gaussian_entropy(sigma):
    return 0.5 * (LOG_2PI + 1.0) + np.log(sigma)


def sample_gate(mu, sigma, mode="train", rng=None):
    """Gate(s) in [0, 1] and the Gaussian log-probability at the emitted value.

    Training draws ``N(mu, sigma)`` and clamps to [0, 1]; testing returns
    ``mu``.
    """
    mu = np.asarray(mu, float)
    sigma = np.asarray(sigma, float)
    if np.any(sigma <= 0):
        raise ValueError("sigma must be positive")
    if mode == "test":
        g = mu.copy()
    else:
        g = np.clip(mu + sigma * rng.standard_normal(mu.shape), 0.0, 1.0)
    return g, gaussian_log_prob(g, mu, sigma)


class RGPolicy:
    """Adapter giving the RG network the interface the A3C learner uses."""

    kind = "rg"

    def __init__(self, cfg):
        self.cfg = cfg

    def init_params(self, rng):
        return init_params(self.cfg, rng)

    def initial_memory(self, state):
        return zero_memory(self.cfg, len(state.edges))

    def act(self, params, state, memory, mode, rng):
        out = rg_forward(params, state, memory)
        g, logp = sample_gate(out["mu"], out["sigma"], mode, rng)
        step = Step(state=state, action=g, log_prob=float(logp.sum()),
                    value=float(out["V"].mean()),
                    entropy=float(gaussian_entropy(out["sigma"]).sum()),
                    cache=out)
        return step, out["memory"]

    def value(self, params, state, memory):
        return float(rg_forward(params, state, memory)["V"].mean())

    def backward(self, params, step, c_logp, c_ent, c_val, d_mem):
        """Gradient of ``c_logp*log_prob + c_ent*entropy + c_val*value``."""
        out = step.cache
        mu, sigma, g = out["mu"], out["sigma"], step.action
        d_mu = c_logp * (g - mu) / sigma ** 2
        d_sigma = c_logp * ((g - mu) ** 2 / sigma ** 3 - 1.0 / sigma) + c_ent / sigma
        d_V = np.full(mu.shape, c_val / mu.size)
        return rg_backward(params, out["cache"], d_mu, d_sigma, d_V, d_mem)


def clip_probe(srg_params, batch, gates, frame_mask, m):
    """Frozen-SRG readout for a single-clip batch."""
    out = srg_mod.forward_classify(srg_params, batch, gates[None], frame_mask[None], m)
    logits = out["logits"][0]
    Hv, He = srg_mod.clip_graph_summary(out, 1)
    n_frames = max(int(frame_mask.sum()), 1)
    label = int(batch.labels[0])
    return {"logp_c": class_log_prob(logits, label), "pred": int(np.argmax(logits)),
            "H_v": Hv[0], "H_e": He[0], "u": logits / n_frames}


class RGEnv:
    """Gating MDP over one clip against a frozen SRG.

    ``G_0`` is all ones; every step replaces the gate matrix by the
    agent's cycle of gates, re-runs the SRG and scores the change.
    """

    def __init__(self, srg_params, batch, frame_mask=None, omega=15.0, n_steps=5, m=3):
        self.srg_params = srg_params
        self.batch = batch
        self.label = int(batch.labels[0])
        T, N = batch.xp.shape[1:3]
        self.n = N
        self.frame_mask = np.ones(T, bool) if frame_mask is None else np.asarray(frame_mask, bool)
        self.omega = omega
        self.n_steps = n_steps
        self.m = m

    def _probe(self):
        return clip_probe(self.srg_params, self.batch, self.G, self.frame_mask, self.m)

    def reset(self):
        self.t = 0
        self.G = np.ones((self.n, self.n))
        self.last = self._probe()
        self.trace = []
        return self.state()

    def state(self):
        return build_rg_state(self.last["H_v"], self.last["H_e"], self.last["u"])

    @property
    def done(self):
        return self.t >= self.n_steps

    def step(self, gates):
        G_new = srg_mod.offdiag(symmetrize_gates(gates_to_matrix(gates, self.n)))
        before = self.last
        G_old = self.G
        self.G = G_new
        self.last = self._probe()
        c = self.label
        r = rg_reward(self.G, G_old, self.last["logp_c"], before["logp_c"],
                      self.last["pred"], before["pred"], c, self.omega)
        self.t += 1
        self.trace.append({"step": self.t, "l21": l21_norm(self.G),
                           "p_correct": float(np.exp(self.last["logp_c"])), "reward": r,
                           "gates": [float(x) for x in gates]})
        return self.state(), r, self.done


def run_episode(policy, params, env, mode="test", rng=None):
    """Roll an environment to termination; returns the filled buffer."""
    buf = TrajectoryBuffer()
    state = env.reset()
    memory = policy.initial_memory(state)
    while not env.done:
        step, memory = policy.act(params, state, memory, mode, rng)
        state, r, done = env.step(step.action)
        step.reward = r
        buf.append(step)
    buf.terminal = True
    return buf


def rg_episode(clip_batch, srg_params, agent_params, agent_cfg, n_steps=5, mode="test",
               rng=None, frame_mask=None, omega=15.0, m=3):
    """Run the gating agent over one clip; returns ``(buffer, final G, env)``."""
    env = RGEnv(srg_params, clip_batch, frame_mask, omega, n_steps, m)
    buf = run_episode(RGPolicy(agent_cfg), agent_params, env, mode, rng)
    return buf, env.G, env
