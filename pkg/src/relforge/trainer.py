"""A3C for both agents, supervised SRG training and alternate training."""

import logging
import os
import threading
import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import fd_agent, rg_agent, srg
from .buffer import TrajectoryBuffer
from .numerics import ParamStore, load_checkpoint, save_checkpoint

log = logging.getLogger(__name__)

COMPONENTS = ("SRG", "FD", "RG")
DEFAULT_SCHEDULE = ("SRG", "FD", "RG") * 3


class TrainingAborted(RuntimeError):
    def __init__(self, msg, partial=None):
        super().__init__(msg)
        self.partial = partial


def n_step_returns(rewards, gamma, bootstrap=0.0):
    """Discounted k-step returns computed backwards from ``bootstrap``."""
    rewards = np.asarray(rewards, dtype=float)
    out = np.zeros_like(rewards)
    R = float(bootstrap)
    for t in range(len(rewards) - 1, -1, -1):
        R = rewards[t] + gamma * R
        out[t] = R
    return out


def _check_finite(grads, what):
    for k, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite {what} gradient for {k!r}")


def a3c_accumulate(policy, params, buffer, returns, beta=0.01):
    """Policy and value gradient deltas over one update window.

    ``d_theta`` is the ascent direction of ``sum(log pi * A + beta * H)``
    with the advantage held constant; ``d_theta_v`` is the gradient of
    ``sum((R - V)^2 / 2)``.  Both are full parameter dicts, since the actor
    and critic share their trunk.
    """
    zeros = {k: np.zeros_like(v) for k, v in params.items()}
    d_theta = {k: v.copy() for k, v in zeros.items()}
    d_theta_v = {k: v.copy() for k, v in zeros.items()}
    if len(buffer) == 0:
        return d_theta, d_theta_v
    adv = np.asarray(returns) - buffer.values
    for target, coefs in ((d_theta, lambda t: (adv[t], beta, 0.0)),
                          (d_theta_v, lambda t: (0.0, 0.0, -adv[t]))):
        d_mem = None
        for t in range(len(buffer) - 1, -1, -1):
            step = buffer.steps[t]
            if d_mem is None:
                h, c = step.cache["memory"]
                d_mem = (np.zeros_like(h), np.zeros_like(c))
            g, d_mem = policy.backward(params, step, *coefs(t), d_mem)
            for k, v in g.items():
                target[k] += v
    _check_finite(d_theta, "policy")
    _check_finite(d_theta_v, "value")
    return d_theta, d_theta_v


def descent_direction(d_theta, d_theta_v):
    return {k: d_theta_v[k] - d_theta[k] for k in d_theta}


@dataclass
class AgentTrainConfig:
    workers: int = 16
    tau_max: int = 5
    gamma: float = 0.99
    beta: float = 0.01
    lr: float = 1e-4
    weight_decay: float = 1e-4
    episodes: int = 2000
    n_steps: int = 5
    omega: float = 15.0
    max_grad_norm: float = None
    seed: int = 0


def train_agent_async(policy, store, make_env, n_clips, cfg, metrics=None, stage=0):
    """Asynchronous advantage actor-critic over ``cfg.workers`` threads.

    ``make_env(i)`` builds the environment of clip ``i``.  Each worker
    samples clips from its own seeded stream, updates the shared ``store``
    every ``tau_max`` steps or at a terminal state, then refreshes its
    local copy.  Returns the list of per-episode total rewards in
    completion order.
    """
    lock = threading.Lock()
    claimed = [0]
    rewards = []
    errors = []

    def claim():
        with lock:
            if claimed[0] >= cfg.episodes or errors:
                return None
            claimed[0] += 1
            return claimed[0]

    def worker(wid):
        rng = np.random.default_rng([cfg.seed, wid])
        local = store.snapshot()
        try:
            while (ep := claim()) is not None:
                t0 = time.perf_counter()
                env = make_env(int(rng.integers(n_clips)))
                state = env.reset()
                memory = policy.initial_memory(state)
                total = 0.0
                while not env.done:
                    buf = TrajectoryBuffer()
                    while not env.done and len(buf) < cfg.tau_max:
                        step, memory = policy.act(local, state, memory, "train", rng)
                        state, r, _ = env.step(step.action)
                        step.reward = r
                        buf.append(step)
                        total += r
                    buf.terminal = env.done
                    buf.bootstrap = 0.0 if env.done else policy.value(local, state, memory)
                    R = n_step_returns(buf.rewards, cfg.gamma, buf.bootstrap)
                    d_theta, d_theta_v = a3c_accumulate(policy, local, buf, R, cfg.beta)
                    store.apply(descent_direction(d_theta, d_theta_v), "adam", cfg.lr,
                                cfg.weight_decay, cfg.max_grad_norm)
                    local = store.snapshot()
                with lock:
                    rewards.append(total)
                if metrics is not None:
                    rec = {"stage": stage, "component": policy.kind.upper(), "step": ep,
                           "reward": total}
                    if hasattr(env, "G"):
                        rec["l21"] = rg_agent.l21_norm(env.G)
                    rec["wall_ms"] = (time.perf_counter() - t0) * 1e3
                    metrics(rec)
        except Exception as exc:   # noqa: BLE001 - surfaced by the orchestrator
            with lock:
                errors.append((wid, exc))

    threads = [threading.Thread(target=worker, args=(w,), daemon=True)
               for w in range(max(1, cfg.workers))]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    if errors:
        wid, exc = errors[0]
        raise TrainingAborted(f"worker {wid} failed: {exc!r}", partial=store) from exc
    return rewards


@dataclass
class SRGTrainConfig:
    epochs: int = 15
    batch_size: int = 16
    lr: float = 1e-5
    weight_decay: float = 1e-4
    seed: int = 0


def train_srg(store, batch, cfg, gates=None, masks=None, m=3, metrics=None, stage=1,
              eval_batch=None, eval_gates=None, eval_masks=None):
    """Supervised RMSprop training of embeddings + SRG; returns per-epoch losses."""
    rng = np.random.default_rng(cfg.seed)
    n = len(batch)
    history = []
    for ep in range(cfg.epochs):
        t0 = time.perf_counter()
        perm = rng.permutation(n)
        losses = []
        for k in range(0, n, cfg.batch_size):
            idx = perm[k:k + cfg.batch_size]
            loss, grads, _ = srg.srg_loss_step(
                store.params, batch.subset(idx),
                None if gates is None else gates[idx],
                None if masks is None else masks[idx], m)
            store.apply(grads, "rmsprop", cfg.lr, cfg.weight_decay)
            losses.append(loss)
        history.append(float(np.mean(losses)))
        if metrics is not None:
            rec = {"stage": stage, "component": "SRG", "step": ep + 1, "loss": history[-1]}
            if eval_batch is not None:
                rec["accuracy"] = srg_accuracy(store.params, eval_batch, eval_gates, eval_masks, m)
            rec["wall_ms"] = (time.perf_counter() - t0) * 1e3
            metrics(rec)
    return history


def srg_accuracy(params, batch, gates=None, masks=None, m=3, chunk=64):
    preds = []
    for k in range(0, len(batch), chunk):
        idx = np.arange(k, min(k + chunk, len(batch)))
        out = srg.forward_classify(params, batch.subset(idx),
                                   None if gates is None else gates[idx],
                                   None if masks is None else masks[idx], m)
        preds.append(out["logits"].argmax(axis=1))
    return float((np.concatenate(preds) == batch.labels).mean())


# ---- the three-component system ----

@dataclass
class SystemConfig:
    srg: srg.SRGConfig
    fd: fd_agent.FDAgentConfig
    rg: rg_agent.RGAgentConfig
    rg_steps: int = 5
    fd_steps: int = 5
    omega_rg: float = 15.0
    omega_fd: float = 20.0


@dataclass
class System:
    cfg: SystemConfig
    srg_store: ParamStore
    fd_store: ParamStore = None
    rg_store: ParamStore = None

    @classmethod
    def create(cls, cfg, seed=0):
        rng = np.random.default_rng(seed)
        return cls(cfg, ParamStore(srg.init_params(cfg.srg, rng)))

    def ensure(self, component, seed=0):
        rng = np.random.default_rng([seed, COMPONENTS.index(component)])
        if component == "FD" and self.fd_store is None:
            self.fd_store = ParamStore(fd_agent.init_params(self.cfg.fd, rng))
        if component == "RG" and self.rg_store is None:
            self.rg_store = ParamStore(rg_agent.init_params(self.cfg.rg, rng))

    def store(self, component):
        return {"SRG": self.srg_store, "FD": self.fd_store, "RG": self.rg_store}[component]

    def state_dict(self):
        out = {}
        for comp in COMPONENTS:
            st = self.store(comp)
            if st is not None:
                out.update({f"{comp.lower()}/{k}": v.copy() for k, v in st.params.items()})
        return out

    def load_state_dict(self, params):
        groups = {}
        for k, v in params.items():
            comp, name = k.split("/", 1)
            groups.setdefault(comp.upper(), {})[name] = v
        for comp, p in groups.items():
            if comp == "SRG":
                self.srg_store = ParamStore(p)
            elif comp == "FD":
                self.fd_store = ParamStore(p)
            elif comp == "RG":
                self.rg_store = ParamStore(p)
            else:
                raise KeyError(f"unknown component prefix {comp!r}")

    def save(self, path):
        save_checkpoint(path, self.state_dict())

    # -- inference pipeline --
    def rg_gates(self, clip_batch, mask):
        if self.rg_store is None:
            N = clip_batch.xp.shape[2]
            return np.ones((N, N))
        _, G, _ = rg_agent.rg_episode(clip_batch, self.srg_store.params, self.rg_store.params,
                                      self.cfg.rg, self.cfg.rg_steps, "test", frame_mask=mask,
                                      omega=self.cfg.omega_rg, m=self.cfg.srg.m)
        return G

    def fd_mask(self, clip_batch, gates):
        T = clip_batch.xp.shape[1]
        if self.fd_store is None:
            return np.ones(T, bool)
        _, mask, _ = fd_agent.fd_episode(clip_batch, self.srg_store.params, self.fd_store.params,
                                         self.cfg.fd, self.cfg.fd_steps, "test", gates=gates,
                                         omega=self.cfg.omega_fd, m=self.cfg.srg.m)
        return mask

    def pipeline(self, singles):
        """Per-clip ``(masks, gates)``: FD distils frames on the ungated graph,
        then RG gates the graph built from the distilled frames."""
        masks, gates = [], []
        for b in singles:
            mk = self.fd_mask(b, None)
            masks.append(mk)
            gates.append(self.rg_gates(b, mk))
        return np.array(masks), np.array(gates)

    def predict(self, batch, singles=None):
        singles = singles if singles is not None else singletons(batch)
        masks, gates = self.pipeline(singles)
        out = srg.forward_classify(self.srg_store.params, batch, gates, masks, self.cfg.srg.m)
        return out["logits"].argmax(axis=1), masks, gates

    def accuracy(self, batch, singles=None):
        pred, _, _ = self.predict(batch, singles)
        return float((pred == batch.labels).mean())


def singletons(batch):
    return [batch.subset(np.array([i])) for i in range(len(batch))]


@dataclass
class StageSchedule:
    stages: tuple = DEFAULT_SCHEDULE
    srg_epochs: int = 15
    agent_episodes: int = 2000

    def __post_init__(self):
        bad = [s for s in self.stages if s not in COMPONENTS]
        if bad:
            raise ValueError(f"unknown stage component(s) {bad}")

    def __len__(self):
        return len(self.stages)


@dataclass
class AlternateConfig:
    schedule: StageSchedule = field(default_factory=StageSchedule)
    srg_train: SRGTrainConfig = field(default_factory=SRGTrainConfig)
    agent_train: AgentTrainConfig = field(default_factory=AgentTrainConfig)
    resume_agents: bool = True
    seed: int = 0
    # per-component AgentTrainConfig field overrides, e.g. {"RG": {"lr": 3e-4}}
    agent_overrides: dict = field(default_factory=dict)


def train_stage(system, component, stage, batch, singles, acfg, metrics=None, eval_batch=None,
                eval_singles=None):
    """Train one component with the other two frozen."""
    seed = acfg.seed * 1000 + stage
    m = system.cfg.srg.m
    if component == "SRG":
        masks, gates = system.pipeline(singles)
        eval_kw = {}
        if eval_batch is not None:
            em, eg = system.pipeline(eval_singles)
            eval_kw = dict(eval_batch=eval_batch, eval_gates=eg, eval_masks=em)
        cfg = SRGTrainConfig(acfg.schedule.srg_epochs, acfg.srg_train.batch_size,
                             acfg.srg_train.lr, acfg.srg_train.weight_decay, seed)
        return train_srg(system.srg_store, batch, cfg, gates, masks, m, metrics, stage, **eval_kw)

    if component == "FD":
        if not acfg.resume_agents:
            system.fd_store = None
        system.ensure("FD", seed)
        policy = fd_agent.FDPolicy(system.cfg.fd)

        def make_env(i):
            return fd_agent.FDEnv(system.srg_store.params, singles[i], None,
                                  system.cfg.omega_fd, system.cfg.fd_steps,
                                  system.cfg.fd.t_distill, m)
        omega = system.cfg.omega_fd
        store = system.fd_store
    else:
        if not acfg.resume_agents:
            system.rg_store = None
        system.ensure("RG", seed)
        masks = [system.fd_mask(b, None) for b in singles]
        policy = rg_agent.RGPolicy(system.cfg.rg)

        def make_env(i):
            return rg_agent.RGEnv(system.srg_store.params, singles[i], masks[i],
                                  system.cfg.omega_rg, system.cfg.rg_steps, m)
        omega = system.cfg.omega_rg
        store = system.rg_store
    a = acfg.agent_train
    cfg = AgentTrainConfig(a.workers, a.tau_max, a.gamma, a.beta, a.lr, a.weight_decay,
                           acfg.schedule.agent_episodes, a.n_steps, omega, a.max_grad_norm, seed)
    cfg = replace(cfg, **acfg.agent_overrides.get(component, {}))
    return train_agent_async(policy, store, make_env, len(singles), cfg, metrics, stage)


def checkpoint_path(out_dir, stage, component):
    return os.path.join(out_dir, f"stage{stage}_{component.lower()}.ckpt")


def alternate_training(system, batch, acfg, out_dir=None, metrics=None, start_stage=1,
                       eval_batch=None, resume_dir=None):
    """Run the stage schedule, checkpointing after every stage into ``out_dir``.

    With ``start_stage > 1`` the checkpoint of the preceding stage is
    loaded first from ``resume_dir`` (default ``out_dir``); it must exist.
    """
    stages = acfg.schedule.stages
    if start_stage > 1:
        prev = checkpoint_path(resume_dir or out_dir, start_stage - 1, stages[start_stage - 2])
        if not os.path.exists(prev):
            raise FileNotFoundError(f"cannot resume: missing checkpoint {prev}")
        system.load_state_dict(load_checkpoint(prev))
    singles = singletons(batch)
    eval_singles = singletons(eval_batch) if eval_batch is not None else None
    results = []
    for stage in range(start_stage, len(stages) + 1):
        comp = stages[stage - 1]
        log.info("stage %d: training %s", stage, comp)
        hist = train_stage(system, comp, stage, batch, singles, acfg, metrics, eval_batch,
                           eval_singles)
        res = {"stage": stage, "component": comp, "history": hist}
        if eval_batch is not None:
            res["accuracy"] = system.accuracy(eval_batch, eval_singles)
            if metrics is not None:
                metrics({"stage": stage, "component": comp, "step": 0,
                         "accuracy": res["accuracy"]})
        results.append(res)
        if out_dir is not None:
            system.save(checkpoint_path(out_dir, stage, comp))
    return results
