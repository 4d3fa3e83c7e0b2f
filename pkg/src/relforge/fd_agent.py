"""Feature-distilling agent: keeps ``T_d`` of ``T`` frames via stay/shift actions.

Network wiring (ReLU after every layer except the heads)::

    S_F  (N, T, D_F)   -> conv1 1x1 -> conv2 3x3 -> mean over (N, T)  -> g
    S_Fd (N, T_d, D_F) -> conv3 1x1 -> conv4 3x3 -> mean over N       -> b_s per slot
    S_M  (T,)          -> fc_mask                                      -> m
    [g, b_1..b_Td, m]  -> LSTM -> h
    per slot s: [b_s, h] -> fc_slot -> 2 logits (stay, shift);  h -> V

The 1x1 convolutions squeeze the feature channels and the 3x3 ones
extract features over the (person, frame) grid.
"""

from collections import deque
from dataclasses import dataclass

import numpy as np

from .buffer import Step, TrajectoryBuffer
from .numerics import (affine_backward, affine_forward, conv3x3_backward, conv3x3_forward,
                       glorot, log_softmax, lstm_backward, lstm_forward, lstm_init,
                       relu_backward, relu_forward)
from .rg_agent import clip_probe, run_episode, shift_reward
from .scene import ConfigError

STAY, SHIFT = 0, 1


def init_selection(T=10, T_d=5):
    """Evenly spaced initial mask and the ascending queue of the rest."""
    if not 1 <= T_d <= T:
        raise ConfigError(f"T_d={T_d} must lie in [1, T={T}]")
    keep = sorted({(k * T) // T_d for k in range(T_d)})
    mask = np.zeros(T, bool)
    mask[keep] = True
    return mask, deque(int(t) for t in range(T) if not mask[t])


def retained(mask):
    return [int(t) for t in np.flatnonzero(mask)]


def fd_apply(mask, queue, actions):
    """Apply per-slot stay/shift actions; slots are the retained frames in order.

    Shifts are processed in slot order: the queue head replaces the slot's
    frame and the discarded frame joins the tail.  A shift with an empty
    queue is a no-op.  Returns ``(mask, queue, n_noop)``.
    """
    mask = np.array(mask, bool)
    queue = deque(queue)
    slots = retained(mask)
    if len(actions) != len(slots):
        raise ValueError(f"expected {len(slots)} actions, got {len(actions)}")
    noop = 0
    for frame, a in zip(slots, actions):
        if a != SHIFT:
            continue
        if not queue:
            noop += 1
            continue
        new = queue.popleft()
        mask[frame] = False
        mask[new] = True
        queue.append(frame)
    return mask, queue, noop


def fd_reward(p_now, p_before, pred_now, pred_before, label, omega=20.0):
    """Ascending + class-shift reward; log-probabilities may replace ``p``."""
    return float(np.sign(p_now - p_before) + shift_reward(pred_now, pred_before, label, omega))


@dataclass
class FdState:
    S_F: np.ndarray     # (N, T, D_F)
    S_Fd: np.ndarray    # (N, T_d, D_F)
    S_M: np.ndarray     # (T,) float mask


def build_fd_state(features, mask):
    """``features`` is (N, T, D_F); distilled frames follow temporal order."""
    mask = np.asarray(mask, bool)
    return FdState(features, features[:, mask], mask.astype(float))


@dataclass
class FDAgentConfig:
    d_feature: int = 12
    n_frames: int = 10
    t_distill: int = 5
    conv1: int = 32
    conv2: int = 32
    conv3: int = 16
    conv4: int = 16
    fc_mask: int = 16
    fc_slot: int = 32
    hidden: int = 16
    init_shift_prob: float = 0.2


def init_params(cfg, rng):
    p = {}
    p["conv1.W"], p["conv1.b"] = glorot(rng, cfg.conv1, cfg.d_feature), np.zeros(cfg.conv1)
    p["conv2.W"], p["conv2.b"] = glorot(rng, cfg.conv2, 9 * cfg.conv1), np.zeros(cfg.conv2)
    p["conv3.W"], p["conv3.b"] = glorot(rng, cfg.conv3, cfg.d_feature), np.zeros(cfg.conv3)
    p["conv4.W"], p["conv4.b"] = glorot(rng, cfg.conv4, 9 * cfg.conv3), np.zeros(cfg.conv4)
    p["fc_mask.W"], p["fc_mask.b"] = glorot(rng, cfg.fc_mask, cfg.n_frames), np.zeros(cfg.fc_mask)
    z = cfg.conv2 + cfg.t_distill * cfg.conv4 + cfg.fc_mask
    p["lstm.W"], p["lstm.b"] = lstm_init(rng, z, cfg.hidden)
    p["fc_slot.W"] = glorot(rng, cfg.fc_slot, cfg.conv4 + cfg.hidden)
    p["fc_slot.b"] = np.zeros(cfg.fc_slot)
    p["logit.W"] = glorot(rng, 2, cfg.fc_slot) * 0.1
    # few shifts per step at first, so a shared reward can be credited to them
    p["logit.b"] = np.array([0.0, np.log(cfg.init_shift_prob / (1 - cfg.init_shift_prob))])
    p["v.W"], p["v.b"] = glorot(rng, 1, cfg.hidden), np.zeros(1)
    return p


def zero_memory(cfg):
    return np.zeros(cfg.hidden), np.zeros(cfg.hidden)


def fd_forward(params, state, memory):
    """Returns a dict with ``logits`` (T_d, 2), ``V``, ``memory``, ``cache``."""
    y1, c1 = affine_forward(state.S_F, params["conv1.W"], params["conv1.b"])
    a1 = relu_forward(y1)
    y2, c2 = conv3x3_forward(a1, params["conv2.W"], params["conv2.b"])
    a2 = relu_forward(y2)
    g = a2.mean(axis=(0, 1))
    y3, c3 = affine_forward(state.S_Fd, params["conv3.W"], params["conv3.b"])
    a3 = relu_forward(y3)
    y4, c4 = conv3x3_forward(a3, params["conv4.W"], params["conv4.b"])
    a4 = relu_forward(y4)
    b = a4.mean(axis=0)                           # (T_d, conv4)
    ym, cm = affine_forward(state.S_M, params["fc_mask.W"], params["fc_mask.b"])
    am = relu_forward(ym)
    z = np.concatenate([g, b.reshape(-1), am])
    h, c, cl = lstm_forward(z, memory[0], memory[1], params["lstm.W"], params["lstm.b"])
    Td = b.shape[0]
    xs = np.concatenate([b, np.broadcast_to(h, (Td, h.size))], axis=-1)
    ys, cs = affine_forward(xs, params["fc_slot.W"], params["fc_slot.b"])
    as_ = relu_forward(ys)
    logits, clg = affine_forward(as_, params["logit.W"], params["logit.b"])
    v, cv = affine_forward(h, params["v.W"], params["v.b"])
    cache = dict(c1=c1, a1=a1, c2=c2, a2=a2, c3=c3, a3=a3, c4=c4, a4=a4, cm=cm, am=am,
                 cl=cl, cs=cs, as_=as_, clg=clg, cv=cv, dims=(g.size, b.shape))
    return {"logits": logits, "V": float(v[0]), "memory": (h, c), "cache": cache}


def fd_backward(params, cache, d_logits, d_V, d_mem):
    g = {}
    ng, (Td, c4) = cache["dims"]
    das, g["logit.W"], g["logit.b"] = affine_backward(cache["clg"], params["logit.W"], d_logits)
    dxs, g["fc_slot.W"], g["fc_slot.b"] = affine_backward(
        cache["cs"], params["fc_slot.W"], relu_backward(cache["as_"], das))
    db = dxs[:, :c4]
    dh = dxs[:, c4:].sum(axis=0)
    _, g["v.W"], g["v.b"] = affine_backward(cache["cv"], params["v.W"], np.array([d_V]))
    dh = dh + params["v.W"][0] * d_V + d_mem[0]
    dz, dhp, dcp, g["lstm.W"], g["lstm.b"] = lstm_backward(cache["cl"], params["lstm.W"], dh, d_mem[1])
    dg = dz[:ng]
    db = db + dz[ng:ng + Td * c4].reshape(Td, c4)
    dam = dz[ng + Td * c4:]
    _, g["fc_mask.W"], g["fc_mask.b"] = affine_backward(
        cache["cm"], params["fc_mask.W"], relu_backward(cache["am"], dam))
    a4 = cache["a4"]
    da4 = np.broadcast_to(db / a4.shape[0], a4.shape)
    da3, g["conv4.W"], g["conv4.b"] = conv3x3_backward(cache["c4"], params["conv4.W"],
                                                       relu_backward(a4, da4))
    _, g["conv3.W"], g["conv3.b"] = affine_backward(cache["c3"], params["conv3.W"],
                                                    relu_backward(cache["a3"], da3))
    a2 = cache["a2"]
    da2 = np.broadcast_to(dg / (a2.shape[0] * a2.shape[1]), a2.shape)
    da1, g["conv2.W"], g["conv2.b"] = conv3x3_backward(cache["c2"], params["conv2.W"],
                                                       relu_backward(a2, da2))
    _, g["conv1.W"], g["conv1.b"] = affine_backward(cache["c1"], params["conv1.W"],
                                                    relu_backward(cache["a1"], da1))
    g["v.W"] = g["v.W"].reshape(params["v.W"].shape)
    g["fc_mask.W"] = g["fc_mask.W"].reshape(params["fc_mask.W"].shape)
    return g, (dhp, dcp)


def slot_probs(logits):
    return np.exp(log_softmax(logits))


def choose_actions(logits, mode="train", rng=None):
    """Per-slot categorical sampling in training, argmax in testing."""
    p = slot_probs(logits)
    if mode == "test":
        return p.argmax(axis=1)
    return (rng.random(p.shape[0]) < p[:, SHIFT]).astype(int)


class FDPolicy:
    kind = "fd"

    def __init__(self, cfg):
        self.cfg = cfg

    def init_params(self, rng):
        return init_params(self.cfg, rng)

    def initial_memory(self, state):
        return zero_memory(self.cfg)

    def act(self, params, state, memory, mode, rng):
        out = fd_forward(params, state, memory)
        logp_all = log_softmax(out["logits"])
        a = choose_actions(out["logits"], mode, rng)
        p = np.exp(logp_all)
        step = Step(state=state, action=a,
                    log_prob=float(logp_all[np.arange(len(a)), a].sum()),
                    value=out["V"], entropy=float(-(p * logp_all).sum()), cache=out)
        return step, out["memory"]

    def value(self, params, state, memory):
        return fd_forward(params, state, memory)["V"]

    def backward(self, params, step, c_logp, c_ent, c_val, d_mem):
        out = step.cache
        logp = log_softmax(out["logits"])
        p = np.exp(logp)
        onehot = np.eye(2)[step.action]
        H = -(p * logp).sum(axis=1, keepdims=True)
        d_logits = c_logp * (onehot - p) + c_ent * (-p * (logp + H))
        return fd_backward(params, out["cache"], d_logits, c_val, d_mem)


class FDEnv:
    """Frame-distilling MDP over one clip against a frozen SRG."""

    def __init__(self, srg_params, batch, gates=None, omega=20.0, n_steps=5, t_distill=5, m=3):
        self.srg_params = srg_params
        self.batch = batch
        self.label = int(batch.labels[0])
        T, N = batch.xp.shape[1:3]
        self.T, self.n = T, N
        self.features = batch.xp[0].transpose(1, 0, 2)
        self.gates = np.ones((N, N)) if gates is None else gates
        self.omega = omega
        self.n_steps = n_steps
        self.t_distill = t_distill
        self.m = m

    def _probe(self):
        return clip_probe(self.srg_params, self.batch, self.gates, self.mask, self.m)

    def reset(self):
        self.t = 0
        self.mask, self.queue = init_selection(self.T, self.t_distill)
        self.last = self._probe()
        self.trace = []
        return self.state()

    def state(self):
        return build_fd_state(self.features, self.mask)

    @property
    def done(self):
        return self.t >= self.n_steps

    def step(self, actions):
        before = self.last
        self.mask, self.queue, noop = fd_apply(self.mask, self.queue, actions)
        self.last = self._probe()
        c = self.label
        r = fd_reward(self.last["logp_c"], before["logp_c"], self.last["pred"],
                      before["pred"], c, self.omega)
        self.t += 1
        self.trace.append({"step": self.t, "mask": retained(self.mask), "reward": r,
                           "p_correct": float(np.exp(self.last["logp_c"])), "noop_shifts": noop})
        return self.state(), r, self.done


def fd_episode(clip_batch, srg_params, agent_params, agent_cfg, n_steps=5, mode="test",
               rng=None, gates=None, omega=20.0, m=3):
    """Run the distilling agent over one clip; returns ``(buffer, final mask, env)``."""
    env = FDEnv(srg_params, clip_batch, gates, omega, n_steps, agent_cfg.t_distill, m)
    buf = run_episode(FDPolicy(agent_cfg), agent_params, env, mode, rng)
    return buf, env.mask, env


def mask_recall(mask, informative_frames):
    kept = set(retained(mask))
    inf = set(informative_frames)
    return len(kept & inf) / max(min(len(inf), int(np.sum(mask))), 1)
