"""Finite-difference checks of every hand-written backward pass.

Each check builds a small random problem, wraps it as ``f(params) ->
(value, grads)`` and hands it to :func:`numerics.grad_check`.
"""

import time

import numpy as np

from . import fd_agent, rg_agent, srg
from .buffer import TrajectoryBuffer
from .numerics import (affine_backward, affine_forward, grad_check, log_softmax,
                       lstm_backward, lstm_forward, softmax_xent)
from .trainer import a3c_accumulate

TOLERANCE = 1e-4


def check_affine(rng, eps=1e-5):
    w = rng.normal(size=(4, 3))
    params = {"x": rng.normal(size=(4, 5)), "W": rng.normal(size=(3, 5)), "b": rng.normal(size=3)}

    def f(p):
        y, cache = affine_forward(p["x"], p["W"], p["b"])
        dx, dW, db = affine_backward(cache, p["W"], w)
        return float((y * w).sum()), {"x": dx, "W": dW, "b": db}
    return grad_check(f, params, eps)


def check_lstm(rng, eps=1e-5):
    I, H = 3, 4
    wh, wc = rng.normal(size=(2, H)), rng.normal(size=(2, H))
    params = {"x": rng.normal(size=(2, I)), "h": rng.normal(size=(2, H)),
              "c": rng.normal(size=(2, H)), "W": rng.normal(scale=0.5, size=(4 * H, I + H)),
              "b": rng.normal(size=4 * H)}

    def f(p):
        h, c, cache = lstm_forward(p["x"], p["h"], p["c"], p["W"], p["b"])
        dx, dh, dc, dW, db = lstm_backward(cache, p["W"], wh, wc)
        return float((h * wh).sum() + (c * wc).sum()), {"x": dx, "h": dh, "c": dc,
                                                         "W": dW, "b": db}
    return grad_check(f, params, eps)


def check_softmax_xent(rng, eps=1e-5):
    params = {"z": rng.normal(size=5)}

    def f(p):
        loss, probs = softmax_xent(p["z"], 2)
        return loss, {"z": probs - np.eye(5)[2]}
    return grad_check(f, params, eps)


def check_srg_frame(rng, eps=1e-5):
    """One frame through embedding, gating and ``m`` propagation rounds."""
    N, D_F = 4, 5
    cfg = srg.SRGConfig(d_feature=D_F, n_classes=3, d_v=4, d_e=3, m=3)
    params = srg.init_params(cfg, rng)
    for k in params:
        params[k] = params[k] + rng.normal(scale=0.2, size=params[k].shape)
    xp = rng.normal(size=(1, N, D_F))
    xe = rng.normal(size=(1, N, N, 6))
    G = rng.uniform(size=(N, N))
    G = (G + G.T)[None] / 2
    w = rng.normal(size=(1, cfg.n_classes))

    def f(p):
        u, _, _, cache = srg.propagate(p, xp, xe, G, cfg.m)
        return float((u * w).sum()), srg.propagate_backward(p, cache, w)
    return grad_check(f, params, eps)


def _agent_objective(policy, states, adv, beta, rng):
    """``f`` for the summed A3C objective over a short fixed-action rollout."""
    kind = policy.kind

    def rollout(p, actions=None):
        buf = TrajectoryBuffer()
        mem = policy.initial_memory(states[0])
        for t, s in enumerate(states):
            step, mem = policy.act(p, s, mem, "train", rng)
            if actions is not None:
                step.action = actions[t]
            buf.append(step)
        return buf

    def objective(p, buf, returns):
        total = 0.0
        mem = policy.initial_memory(states[0])
        for s, st, a, R in zip(states, buf.steps, adv, returns):
            if kind == "rg":
                out = rg_agent.rg_forward(p, s, mem)
                lp = rg_agent.gaussian_log_prob(st.action, out["mu"], out["sigma"]).sum()
                H = rg_agent.gaussian_entropy(out["sigma"]).sum()
                V = out["V"].mean()
            else:
                out = fd_agent.fd_forward(p, s, mem)
                L = log_softmax(out["logits"])
                lp = L[np.arange(len(st.action)), st.action].sum()
                H = -(np.exp(L) * L).sum()
                V = out["V"]
            mem = out["memory"]
            total += a * lp + beta * H + 0.5 * (R - V) ** 2
        return total

    return rollout, objective


def check_agent(policy, params, states, rng, eps=1e-5, max_entries=20):
    """Gradient of ``sum(A log pi + beta H) + sum((R - V)^2 / 2)`` with A held fixed.

    ``a3c_accumulate`` returns the ascent direction of the first term and
    the gradient of the second, so their sum must match the objective.
    """
    beta = 0.05
    adv = rng.normal(size=len(states))
    rollout, objective = _agent_objective(policy, states, adv, beta, rng)
    base = rollout(params)
    actions = [s.action for s in base.steps]
    returns = base.values + adv

    def f(p):
        buf = rollout(p, actions)
        d_theta, d_theta_v = a3c_accumulate(policy, p, buf, returns, beta)
        return objective(p, buf, returns), {k: d_theta[k] + d_theta_v[k] for k in d_theta}
    return grad_check(f, params, eps, max_entries=max_entries, rng=rng)


def check_rg_agent(rng, eps=1e-5):
    cfg = rg_agent.RGAgentConfig(d_v=4, d_e=3, n_classes=3, fc1=5, fc2=4, fc3=5, fc4=4, fc5=3,
                                 fc6=4, fc7=4, hidden=5)
    params = rg_agent.init_params(cfg, rng)
    for k in params:
        params[k] = params[k] + rng.normal(scale=0.3, size=params[k].shape)
    states = [rg_agent.build_rg_state(rng.normal(size=(4, 4)), rng.normal(size=(4, 4, 3)),
                                      rng.normal(size=3)) for _ in range(3)]
    return check_agent(rg_agent.RGPolicy(cfg), params, states, rng, eps)


def check_fd_agent(rng, eps=1e-5):
    cfg = fd_agent.FDAgentConfig(d_feature=5, n_frames=6, t_distill=3, conv1=4, conv2=4,
                                 conv3=3, conv4=3, fc_mask=4, fc_slot=5, hidden=4)
    params = fd_agent.init_params(cfg, rng)
    for k in params:
        params[k] = params[k] + rng.normal(scale=0.3, size=params[k].shape)
    feats = rng.normal(size=(4, 6, 5))
    masks = [[1, 0, 1, 0, 1, 0], [1, 1, 0, 0, 1, 0], [0, 1, 1, 1, 0, 0]]
    states = [fd_agent.build_fd_state(feats, np.array(m, bool)) for m in masks]
    return check_agent(fd_agent.FDPolicy(cfg), params, states, rng, eps)


CHECKS = {
    "affine": check_affine,
    "lstm_cell": check_lstm,
    "softmax_xent": check_softmax_xent,
    "srg_frame": check_srg_frame,
    "rg_agent": check_rg_agent,
    "fd_agent": check_fd_agent,
}


def run_suite(seed=0, eps=1e-5, tol=TOLERANCE):
    """Run every check; returns ``[{name, max_rel_error, passed, seconds}]``."""
    results = []
    for k, (name, fn) in enumerate(CHECKS.items()):
        t0 = time.perf_counter()
        err = fn(np.random.default_rng([seed, k]), eps)
        results.append({"name": name, "max_rel_error": float(err), "passed": bool(err <= tol),
                        "seconds": time.perf_counter() - t0})
    return results
