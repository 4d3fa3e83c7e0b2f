"""Run configuration: JSON file + command-line overrides, validated up front."""

import json
import math
import os
from dataclasses import asdict, dataclass, field, fields

from . import fd_agent, rg_agent, srg, trainer
from .scene import ConfigError, SceneConfig


def _scene_defaults():
    return asdict(SceneConfig())


def _net_defaults(cls, drop=()):
    return {k: v for k, v in asdict(cls()).items() if k not in drop}


# dims that must agree with the scene are derived from it, not configured twice
_SRG_DERIVED = ("d_feature", "n_classes")
_FD_DERIVED = ("d_feature", "n_frames", "t_distill")
_RG_DERIVED = ("d_v", "d_e", "n_classes")


@dataclass
class RunConfig:
    seed: int = 0
    n_train: int = 400
    gamma: float = 0.99
    beta: float = 0.01
    tau_max: int = 5
    workers: int = 16
    agent_lr: float = 1e-4
    agent_weight_decay: float = 1e-4
    agent_episodes: int = 2000
    max_grad_norm: float = None
    omega_rg: float = 15.0
    omega_fd: float = 20.0
    rg_steps: int = 5
    fd_steps: int = 5
    srg_lr: float = 1e-5
    srg_weight_decay: float = 1e-4
    srg_epochs: int = 15
    batch_size: int = 16
    schedule: list = field(default_factory=lambda: list(trainer.DEFAULT_SCHEDULE))
    resume_agents: bool = True
    record_wall_ms: bool = True
    scene: dict = field(default_factory=_scene_defaults)
    srg_net: dict = field(default_factory=lambda: _net_defaults(srg.SRGConfig, _SRG_DERIVED))
    fd_net: dict = field(default_factory=lambda: _net_defaults(fd_agent.FDAgentConfig,
                                                               _FD_DERIVED))
    rg_net: dict = field(default_factory=lambda: _net_defaults(rg_agent.RGAgentConfig,
                                                               _RG_DERIVED))
    data: str = None
    out_root: str = "runs"
    checkpoint: str = None

    # -- derived component configs --
    def scene_config(self):
        return SceneConfig(**self.scene)

    def srg_config(self):
        s = self.scene
        return srg.SRGConfig(d_feature=s["d_feature"], n_classes=s["n_classes"], **self.srg_net)

    def fd_config(self):
        s = self.scene
        return fd_agent.FDAgentConfig(d_feature=s["d_feature"], n_frames=s["n_frames"],
                                      t_distill=s["t_distill"], **self.fd_net)

    def rg_config(self):
        n = self.srg_net
        return rg_agent.RGAgentConfig(d_v=n["d_v"], d_e=n["d_e"],
                                      n_classes=self.scene["n_classes"], **self.rg_net)

    def system_config(self):
        return trainer.SystemConfig(self.srg_config(), self.fd_config(), self.rg_config(),
                                    self.rg_steps, self.fd_steps, self.omega_rg, self.omega_fd)

    def srg_train_config(self, epochs=None):
        return trainer.SRGTrainConfig(self.srg_epochs if epochs is None else epochs,
                                      self.batch_size, self.srg_lr, self.srg_weight_decay,
                                      self.seed)

    def agent_train_config(self, omega):
        return trainer.AgentTrainConfig(
            workers=self.workers, tau_max=self.tau_max, gamma=self.gamma, beta=self.beta,
            lr=self.agent_lr, weight_decay=self.agent_weight_decay,
            episodes=self.agent_episodes, omega=omega, max_grad_norm=self.max_grad_norm,
            seed=self.seed)

    def alternate_config(self):
        sched = trainer.StageSchedule(tuple(self.schedule), self.srg_epochs, self.agent_episodes)
        return trainer.AlternateConfig(sched, self.srg_train_config(),
                                       self.agent_train_config(self.omega_rg),
                                       self.resume_agents, self.seed)

    def to_dict(self):
        return asdict(self)

    # -- validation --
    def validate(self):
        def need(ok, key, msg):
            if not ok:
                raise ConfigError(f"{key}: {msg}")

        need(0.0 <= self.gamma < 1.0, "gamma", f"must lie in [0, 1), got {self.gamma}")
        need(self.beta >= 0.0, "beta", f"must be non-negative, got {self.beta}")
        for key in ("tau_max", "workers", "agent_episodes", "rg_steps", "fd_steps",
                    "srg_epochs", "batch_size"):
            v = getattr(self, key)
            need(isinstance(v, int) and v >= 1, key, f"must be a positive integer, got {v!r}")
        for key in ("agent_lr", "srg_lr"):
            v = getattr(self, key)
            need(v > 0 and math.isfinite(v), key, f"must be positive, got {v}")
        for key in ("agent_weight_decay", "srg_weight_decay", "omega_rg", "omega_fd"):
            need(getattr(self, key) >= 0, key, f"must be non-negative, got {getattr(self, key)}")
        need(self.max_grad_norm is None or self.max_grad_norm > 0, "max_grad_norm",
             "must be positive or null")
        bad = [s for s in self.schedule if s not in trainer.COMPONENTS]
        need(not bad and len(self.schedule) > 0, "schedule",
             f"entries must be one of {trainer.COMPONENTS}, got {self.schedule}")
        sc = self.scene_config()
        try:
            sc.validate()
        except ConfigError as exc:
            raise ConfigError(f"scene.{exc}") from None
        need(1 <= self.n_train < sc.n_clips, "n_train",
             f"must lie in [1, scene.n_clips={sc.n_clips}), got {self.n_train}")
        need(self.srg_net.get("m", 1) >= 1, "srg_net.m", "must be at least 1")
        for sec in ("srg_net", "fd_net", "rg_net"):
            for k, v in getattr(self, sec).items():
                if isinstance(v, int) and not isinstance(v, bool) and k != "m":
                    need(v >= 1, f"{sec}.{k}", f"must be a positive integer, got {v}")
        need(0.0 < self.fd_net["init_shift_prob"] < 1.0, "fd_net.init_shift_prob",
             "must lie in (0, 1)")
        need(self.rg_net["init_sigma"] > 0, "rg_net.init_sigma", "must be positive")
        return self


_SECTIONS = ("scene", "srg_net", "fd_net", "rg_net")
_PATH_KEYS = ("data", "out_root", "checkpoint")


def _coerce(key, value, default):
    """Cast ``value`` (possibly a CLI string) to the type of ``default``."""
    if key in _PATH_KEYS:
        return None if value is None else str(value)
    if isinstance(default, list) and isinstance(value, str) and not value.startswith("["):
        value = [v.strip() for v in value.split(",") if v.strip()]
    if isinstance(value, str) and not isinstance(default, str):
        try:
            value = json.loads(value)
        except json.JSONDecodeError:
            if default is not None:
                raise ConfigError(f"{key}: cannot parse {value!r}") from None
    if default is None or value is None:
        return value
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{key}: expected true/false, got {value!r}")
        return value
    if isinstance(default, int):
        if (isinstance(value, bool) or not isinstance(value, (int, float))
                or not float(value).is_integer()):
            raise ConfigError(f"{key}: expected an integer, got {value!r}")
        return int(value)
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key}: expected a number, got {value!r}")
        return float(value)
    if isinstance(default, list):
        if not isinstance(value, list):
            raise ConfigError(f"{key}: expected a list, got {value!r}")
        return list(value)
    return value


def _merge(cfg, updates, origin):
    names = {f.name for f in fields(RunConfig)}
    for key, value in updates.items():
        if "." in key:
            sec, sub = key.split(".", 1)
            updates_sec = {sub: value}
        elif key in _SECTIONS:
            if not isinstance(value, dict):
                raise ConfigError(f"{key}: expected an object ({origin})")
            sec, updates_sec = key, value
        else:
            sec = None
        if sec is not None:
            if sec not in _SECTIONS:
                raise ConfigError(f"{key}: unknown key ({origin})")
            target = getattr(cfg, sec)
            for sub, v in updates_sec.items():
                if sub not in target:
                    raise ConfigError(f"{sec}.{sub}: unknown key ({origin})")
                target[sub] = _coerce(f"{sec}.{sub}", v, target[sub])
            continue
        if key not in names:
            raise ConfigError(f"{key}: unknown key ({origin})")
        setattr(cfg, key, _coerce(key, value, getattr(cfg, key)))
    return cfg


def load_config_file(path):
    if not os.path.exists(path):
        raise ConfigError(f"config file not found: {path}")
    with open(path) as fh:
        text = fh.read()
    if not text.strip():
        return {}
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}") from None
    if not isinstance(data, dict):
        raise ConfigError(f"config file {path} must hold a JSON object")
    return data


def parse_config(path=None, overrides=None):
    """Defaults, then the JSON file at ``path``, then ``overrides``; validated.

    ``overrides`` maps keys (``"gamma"`` or dotted ``"scene.noise_frames"``)
    to values, which may be strings as they come from the command line.
    """
    cfg = RunConfig()
    if path is not None:
        _merge(cfg, load_config_file(path), path)
    if overrides:
        _merge(cfg, {k: v for k, v in overrides.items() if v is not None}, "flags")
    return cfg.validate()
