"""Synthetic group-activity clips with planted ground truth.

A clip has ``n_persons`` people over ``n_frames`` frames.  A subset of
"key" persons performs a class-specific joint motion (a blend of rotation
about their centroid and radial approach/dispersal) and shows a
class-specific appearance prototype, but only during the clip's
informative frames.  Outside those frames, and for distractor persons
throughout, motion is a slow random walk and appearance is noise plus an
optional decoy prototype of a random class.
"""

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .numerics import affine_backward, affine_forward

N_INTERACTION = 6


class ConfigError(ValueError):
    pass


@dataclass
class SceneConfig:
    n_classes: int = 4
    n_persons: int = 6
    n_frames: int = 10
    d_feature: int = 12
    n_clips: int = 500
    noise_frames: int = 0
    distractor_persons: int = 0
    t_distill: int = 5
    signal: float = 1.0
    noise: float = 0.6
    decoy: float = 0.0
    # decoy persons/frames share one wrong class per clip instead of a random class each
    coherent_decoy: bool = False
    speed: float = 0.35
    jitter: float = 0.05

    def validate(self):
        if self.n_persons < 3:
            raise ConfigError("n_persons must be at least 3")
        if self.n_classes < 2:
            raise ConfigError("n_classes must be at least 2")
        if self.n_frames < 1 or self.n_clips < 0:
            raise ConfigError("n_frames must be positive and n_clips non-negative")
        if self.d_feature < 3:
            raise ConfigError("d_feature must be at least 3 (2 velocity channels + appearance)")
        if not 0 <= self.distractor_persons <= self.n_persons - 2:
            raise ConfigError(
                f"distractor_persons={self.distractor_persons} leaves fewer than 2 key persons "
                f"among {self.n_persons}")
        if not 1 <= self.t_distill <= self.n_frames:
            raise ConfigError("t_distill must lie in [1, n_frames]")
        if not 0 <= self.noise_frames <= self.n_frames - self.t_distill:
            raise ConfigError(
                f"noise_frames={self.noise_frames} leaves fewer than t_distill={self.t_distill} "
                "informative frames")
        return self

    @property
    def n_key(self):
        return self.n_persons - self.distractor_persons


@dataclass
class SceneClip:
    clip_id: int
    positions: np.ndarray          # (N, T, 2)
    person_features: np.ndarray    # (N, T, D_F)
    activity_label: int
    key_persons: list
    key_relations: list            # sorted (i, j) pairs with i < j
    informative_frames: list
    meta: dict = field(default_factory=dict)

    @property
    def n_persons(self):
        return self.positions.shape[0]

    @property
    def n_frames(self):
        return self.positions.shape[1]

    def interaction_tensor(self):
        """Per-frame pairwise features, shape ``(T, N, N, 6)``."""
        return pairwise_interactions(self.positions.transpose(1, 0, 2))

    def to_record(self):
        return {
            "clip_id": self.clip_id,
            "n_persons": self.n_persons,
            "n_frames": self.n_frames,
            "positions": self.positions.tolist(),
            "person_features": self.person_features.tolist(),
            "activity_label": self.activity_label,
            "key_persons": list(self.key_persons),
            "key_relations": [list(p) for p in self.key_relations],
            "informative_frames": list(self.informative_frames),
        }

    @classmethod
    def from_record(cls, rec):
        return cls(
            clip_id=rec["clip_id"],
            positions=np.asarray(rec["positions"], dtype=np.float64),
            person_features=np.asarray(rec["person_features"], dtype=np.float64),
            activity_label=int(rec["activity_label"]),
            key_persons=list(rec["key_persons"]),
            key_relations=[tuple(p) for p in rec["key_relations"]],
            informative_frames=list(rec["informative_frames"]),
        )


def _atan_ratio(dy, dx):
    # atan(dy/dx) with atan(./0) = +-pi/2 by the sign of dy and atan(0/0) = 0
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.arctan(dy / dx)
    zero = dx == 0
    out = np.where(zero, np.sign(dy) * (np.pi / 2), out)
    return np.where(zero & (dy == 0), 0.0, out)


def interaction_features(pos_i, pos_j):
    """Distance and direction features of the displacement from i to j.

    Channels: ``|dx|, |dy|, |dx + dy|, sqrt(dx^2 + dy^2), atan(dy/dx),
    atan2(dy, dx)``.
    """
    dx = float(pos_j[0]) - float(pos_i[0])
    dy = float(pos_j[1]) - float(pos_i[1])
    return np.array([
        abs(dx), abs(dy), abs(dx + dy), np.hypot(dx, dy),
        float(_atan_ratio(np.float64(dy), np.float64(dx))), np.arctan2(dy, dx),
    ])


def pairwise_interactions(pos):
    """Vectorised :func:`interaction_features` for positions ``(..., N, 2)``.

    Returns ``(..., N, N, 6)`` with entry ``[i, j]`` describing i -> j.
    """
    d = pos[..., None, :, :] - pos[..., :, None, :]
    dx, dy = d[..., 0], d[..., 1]
    return np.stack([
        np.abs(dx), np.abs(dy), np.abs(dx + dy), np.hypot(dx, dy),
        _atan_ratio(dy, dx), np.arctan2(dy, dx),
    ], axis=-1)


def _motif(label, n_classes):
    angle = 2 * np.pi * label / n_classes
    return np.cos(angle), np.sin(angle)   # rotation rate, radial rate


def _prototypes(rng, n_classes, dim):
    P = rng.normal(size=(n_classes, dim))
    return P / np.linalg.norm(P, axis=1, keepdims=True)


def generate_dataset(cfg, seed=0):
    """Generate ``cfg.n_clips`` clips; a pure function of ``(cfg, seed)``."""
    cfg.validate()
    rng = np.random.default_rng(seed)
    N, T, K = cfg.n_persons, cfg.n_frames, cfg.n_classes
    d_app = cfg.d_feature - 2
    protos = _prototypes(rng, K, d_app)
    labels = rng.permutation(np.arange(cfg.n_clips) % K)
    clips = []
    for cid in range(cfg.n_clips):
        label = int(labels[cid])
        key = np.sort(rng.choice(N, size=cfg.n_key, replace=False))
        is_key = np.zeros(N, bool)
        is_key[key] = True
        informative = np.sort(rng.choice(T, size=T - cfg.noise_frames, replace=False))
        is_inf = np.zeros(T, bool)
        is_inf[informative] = True

        pos = np.zeros((N, T, 2))
        centre = rng.uniform(-1.0, 1.0, size=2)
        ang = rng.uniform(0, 2 * np.pi, size=N)
        rad = np.where(is_key, rng.uniform(0.8, 1.4, size=N), rng.uniform(2.0, 3.5, size=N))
        pos[:, 0] = centre + rad[:, None] * np.stack([np.cos(ang), np.sin(ang)], axis=1)
        omega, rho = _motif(label, K)
        for t in range(1, T):
            step = rng.normal(scale=cfg.jitter, size=(N, 2))
            pos[:, t] = pos[:, t - 1] + step
            if is_inf[t]:
                kp = pos[key, t - 1]
                c = kp.mean(axis=0)
                rel = kp - c
                rot = np.stack([-rel[:, 1], rel[:, 0]], axis=1)
                pos[key, t] = kp + cfg.speed * (omega * rot + rho * rel) + step[key]

        vel = np.diff(pos, axis=1, prepend=pos[:, :1])
        if T > 1:
            vel[:, 0] = vel[:, 1]
        app = rng.normal(scale=cfg.noise, size=(N, T, d_app))
        wrong = [k for k in range(K) if k != label]
        clip_decoy = wrong[rng.integers(len(wrong))]
        for p in range(N):
            for t in range(T):
                if is_key[p] and is_inf[t]:
                    app[p, t] += cfg.signal * protos[label]
                elif cfg.decoy:
                    dc = clip_decoy if cfg.coherent_decoy else int(rng.integers(K))
                    app[p, t] += cfg.decoy * protos[dc]
        feats = np.concatenate([app, vel / max(cfg.speed, 1e-12)], axis=-1)
        kl = [(int(a), int(b)) for ai, a in enumerate(key) for b in key[ai + 1:]]
        clips.append(SceneClip(cid, pos, feats, label, [int(k) for k in key], kl,
                               [int(t) for t in informative]))
    return clips


def split(clips, n_train):
    return clips[:n_train], clips[n_train:]


def oracle_features(clip):
    """Mean key-person feature over informative frames (learnability probe)."""
    f = clip.person_features[np.ix_(clip.key_persons, clip.informative_frames)]
    return f.mean(axis=(0, 1))


def save_dataset(path, clips):
    with open(path, "w") as fh:
        for clip in clips:
            fh.write(json.dumps(clip.to_record()) + "\n")


def load_dataset(path):
    with open(path) as fh:
        return [SceneClip.from_record(json.loads(line)) for line in fh if line.strip()]


def config_dict(cfg):
    return asdict(cfg)


def embed_features(xp, xe, params):
    """Affine embeddings of person and interaction features.

    ``xp`` is ``(..., N, D_F)``, ``xe`` is ``(..., N, N, 6)``.  Returns
    ``(Hv0, He0, cache)``.
    """
    hv, cv = affine_forward(xp, params["emb_v.W"], params["emb_v.b"])
    he, ce = affine_forward(xe, params["emb_e.W"], params["emb_e.b"])
    return hv, he, (cv, ce)


def embed_backward(cache, params, dhv, dhe):
    cv, ce = cache
    _, dWv, dbv = affine_backward(cv, params["emb_v.W"], dhv)
    _, dWe, dbe = affine_backward(ce, params["emb_e.W"], dhe)
    return {"emb_v.W": dWv, "emb_v.b": dbv, "emb_e.W": dWe, "emb_e.b": dbe}
