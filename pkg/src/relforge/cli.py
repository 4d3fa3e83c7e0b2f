"""Command-line entry point: ``relforge <command> [options]``.

Every command writes into a fresh run directory under the output root
(``--out-root``, overridden by the ``RELFORGE_OUT`` environment variable):
``config.json`` with the effective configuration, ``metrics.jsonl`` with
one JSON record per epoch/episode, and whatever the command produces
(checkpoints, gate dumps, episode traces).
"""

import argparse
import json
import logging
import math
import os
import sys
import threading
import time

import numpy as np

from . import fd_agent, gradcheck, rg_agent, scene, srg, trainer
from .config import parse_config
from .numerics import load_checkpoint
from .scene import ConfigError

log = logging.getLogger("relforge")

COMMANDS = ("generate", "train-srg", "train-fd", "train-rg", "train-alternate", "eval",
            "inspect-gates", "grad-check")


class CommandError(RuntimeError):
    """A command could not run (missing checkpoint, bad dataset, ...)."""


# ---- metrics ----

def _sanitize(obj, bad):
    if isinstance(obj, dict):
        return {k: _sanitize(v, bad) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_sanitize(v, bad) for v in obj]
    if isinstance(obj, np.ndarray):
        return _sanitize(obj.tolist(), bad)
    if isinstance(obj, np.generic):
        obj = obj.item()
    if isinstance(obj, float) and not math.isfinite(obj):
        bad.append(obj)
        return None
    return obj


class MetricsWriter:
    """Append-only JSON-lines writer shared by all workers of a run.

    Non-finite floats are written as ``null`` with a warning.  With
    ``keep_wall=False`` the ``wall_ms`` timing field is dropped so that
    repeated runs produce byte-identical files.
    """

    def __init__(self, path, keep_wall=True):
        self.path = path
        self.keep_wall = keep_wall
        self._lock = threading.Lock()
        self._fh = open(path, "a", encoding="utf-8")

    def __call__(self, record):
        self.write(record)

    def write(self, record):
        if not self.keep_wall:
            record = {k: v for k, v in record.items() if k != "wall_ms"}
        bad = []
        clean = _sanitize(record, bad)
        if bad:
            log.warning("non-finite metric value(s) %s written as null", bad)
        line = json.dumps(clean, sort_keys=True) + "\n"
        with self._lock:
            try:
                self._fh.write(line)
                self._fh.flush()
            except OSError as exc:
                raise OSError(f"cannot write metrics to {self.path}: {exc}") from exc

    def close(self):
        with self._lock:
            self._fh.close()


def read_metrics(path):
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


# ---- run directories and data ----

def output_root(cfg):
    return os.environ.get("RELFORGE_OUT") or cfg.out_root


def make_run_dir(root, seed, command):
    """``<root>/<timestamp>_<command>_seed<seed>``, suffixed if it already exists."""
    os.makedirs(root, exist_ok=True)
    base = os.path.join(root, f"{time.strftime('%Y%m%d-%H%M%S')}_{command}_seed{seed}")
    path, k = base, 1
    while True:
        try:
            os.makedirs(path)
            return path
        except FileExistsError:
            k += 1
            path = f"{base}-{k}"


def load_clips(cfg):
    """The dataset of a run: the JSONL file at ``cfg.data`` or a fresh one."""
    sc = cfg.scene_config()
    if cfg.data is None:
        return scene.generate_dataset(sc, cfg.seed)
    if not os.path.isfile(cfg.data):
        raise CommandError(f"dataset not found: {cfg.data}")
    try:
        clips = scene.load_dataset(cfg.data)
    except (ValueError, KeyError) as exc:
        raise CommandError(f"cannot read dataset {cfg.data}: {exc}") from exc
    if len(clips) <= cfg.n_train:
        raise CommandError(f"dataset {cfg.data} has {len(clips)} clips, need more than "
                           f"n_train={cfg.n_train}")
    want = (sc.n_persons, sc.n_frames, sc.d_feature)
    for c in clips:
        if c.person_features.shape != want:
            raise CommandError(f"clip {c.clip_id} has features {c.person_features.shape}, "
                               f"config expects {want}")
    return clips


def split_batches(cfg, clips):
    train, test = scene.split(clips, cfg.n_train)
    return srg.ClipBatch.from_clips(train), srg.ClipBatch.from_clips(test), test


def load_system(cfg, need=("SRG",), required=True):
    system = trainer.System.create(cfg.system_config(), cfg.seed)
    if cfg.checkpoint is None:
        if required:
            raise CommandError("this command needs --checkpoint (a trained model)")
        return system
    if not os.path.isfile(cfg.checkpoint):
        raise CommandError(f"checkpoint not found: {cfg.checkpoint}")
    system.load_state_dict(load_checkpoint(cfg.checkpoint))
    for comp in need:
        if system.store(comp) is None:
            raise CommandError(f"checkpoint {cfg.checkpoint} holds no {comp} parameters")
    return system


def write_jsonl(path, records):
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(json.dumps(_sanitize(r, []), sort_keys=True) + "\n")


# ---- commands ----

def cmd_generate(cfg, run_dir, metrics, args):
    clips = scene.generate_dataset(cfg.scene_config(), cfg.seed)
    path = cfg.data or os.path.join(run_dir, "dataset.jsonl")
    if os.path.exists(path):
        raise CommandError(f"refusing to overwrite existing dataset {path}")
    scene.save_dataset(path, clips)
    metrics({"event": "generate", "n_clips": len(clips), "path": path})
    print(path)
    return 0


def cmd_train_srg(cfg, run_dir, metrics, args):
    clips = load_clips(cfg)
    train_b, test_b, _ = split_batches(cfg, clips)
    system = load_system(cfg, required=False)
    gates = masks = None
    eval_kw = {"eval_batch": test_b}
    if system.fd_store is not None or system.rg_store is not None:
        masks, gates = system.pipeline(trainer.singletons(train_b))
        em, eg = system.pipeline(trainer.singletons(test_b))
        eval_kw.update(eval_gates=eg, eval_masks=em)
    trainer.train_srg(system.srg_store, train_b, cfg.srg_train_config(), gates, masks,
                      system.cfg.srg.m, metrics, 1, **eval_kw)
    acc = system.accuracy(test_b)
    system.save(os.path.join(run_dir, "model.ckpt"))
    metrics({"event": "summary", "component": "SRG", "accuracy": acc})
    print(f"test accuracy {acc:.4f}")
    return 0


def _dump_traces(path, system, singles, clips, kind):
    records = []
    for b, c in zip(singles, clips):
        if kind == "FD":
            _, mask, env = fd_agent.fd_episode(
                b, system.srg_store.params, system.fd_store.params, system.cfg.fd,
                system.cfg.fd_steps, "test", omega=system.cfg.omega_fd, m=system.cfg.srg.m)
        else:
            mask = system.fd_mask(b, None)
            _, _, env = rg_agent.rg_episode(
                b, system.srg_store.params, system.rg_store.params, system.cfg.rg,
                system.cfg.rg_steps, "test", frame_mask=mask, omega=system.cfg.omega_rg,
                m=system.cfg.srg.m)
        records.append({"clip_id": c.clip_id, "agent": kind, "steps": env.trace})
    write_jsonl(path, records)


def _train_agent(cfg, run_dir, metrics, args, kind):
    clips = load_clips(cfg)
    train_b, test_b, test_clips = split_batches(cfg, clips)
    system = load_system(cfg, need=("SRG",))
    singles = trainer.singletons(train_b)
    m = system.cfg.srg.m
    system.ensure(kind, cfg.seed)
    if kind == "FD":
        policy = fd_agent.FDPolicy(system.cfg.fd)

        def make_env(i):
            return fd_agent.FDEnv(system.srg_store.params, singles[i], None,
                                  system.cfg.omega_fd, system.cfg.fd_steps,
                                  system.cfg.fd.t_distill, m)
        omega = cfg.omega_fd
    else:
        policy = rg_agent.RGPolicy(system.cfg.rg)
        masks = [system.fd_mask(b, None) for b in singles]

        def make_env(i):
            return rg_agent.RGEnv(system.srg_store.params, singles[i], masks[i],
                                  system.cfg.omega_rg, system.cfg.rg_steps, m)
        omega = cfg.omega_rg
    rewards = trainer.train_agent_async(policy, system.store(kind), make_env, len(singles),
                                        cfg.agent_train_config(omega), metrics, 0)
    system.save(os.path.join(run_dir, "model.ckpt"))
    test_singles = trainer.singletons(test_b)
    summary = {"event": "summary", "component": kind, "episodes": len(rewards),
               "mean_reward": float(np.mean(rewards)) if rewards else None,
               "accuracy": system.accuracy(test_b, test_singles)}
    if kind == "FD":
        summary["mask_recall"] = float(np.mean([
            fd_agent.mask_recall(system.fd_mask(b, None), c.informative_frames)
            for b, c in zip(test_singles, test_clips)]))
    metrics(summary)
    if args.dump_trace:
        _dump_traces(os.path.join(run_dir, "traces.jsonl"), system, test_singles, test_clips,
                     kind)
    print(json.dumps(_sanitize(summary, []), sort_keys=True))
    return 0


def cmd_train_fd(cfg, run_dir, metrics, args):
    return _train_agent(cfg, run_dir, metrics, args, "FD")


def cmd_train_rg(cfg, run_dir, metrics, args):
    return _train_agent(cfg, run_dir, metrics, args, "RG")


def cmd_train_alternate(cfg, run_dir, metrics, args):
    clips = load_clips(cfg)
    train_b, test_b, _ = split_batches(cfg, clips)
    system = trainer.System.create(cfg.system_config(), cfg.seed)
    resume_dir = args.resume_dir
    if args.start_stage > 1 and resume_dir is None:
        raise CommandError("--start-stage > 1 needs --resume-dir with the earlier stages")
    try:
        results = trainer.alternate_training(system, train_b, cfg.alternate_config(), run_dir,
                                             metrics, args.start_stage, test_b,
                                             resume_dir=resume_dir)
    except FileNotFoundError as exc:
        raise CommandError(str(exc)) from exc
    system.save(os.path.join(run_dir, "model.ckpt"))
    final = {"event": "summary", "component": "PRL",
             "stage_accuracy": [r.get("accuracy") for r in results],
             "accuracy": results[-1].get("accuracy") if results else None}
    metrics(final)
    print(json.dumps(_sanitize(final, []), sort_keys=True))
    return 0


def cmd_eval(cfg, run_dir, metrics, args):
    system = load_system(cfg)
    clips = load_clips(cfg)
    _, test_b, test_clips = split_batches(cfg, clips)
    singles = trainer.singletons(test_b)
    pred, masks, _ = system.predict(test_b, singles)
    acc = float((pred == test_b.labels).mean())
    rec = {"event": "eval", "accuracy": acc, "n_clips": len(test_b)}
    if system.fd_store is not None:
        rec["mask_recall"] = float(np.mean([fd_agent.mask_recall(mk, c.informative_frames)
                                            for mk, c in zip(masks, test_clips)]))
    metrics(rec)
    with open(os.path.join(run_dir, "eval.json"), "w") as fh:
        json.dump(rec, fh, indent=2, sort_keys=True)
    if args.dump_trace:
        for kind, store in (("FD", system.fd_store), ("RG", system.rg_store)):
            if store is not None:
                _dump_traces(os.path.join(run_dir, f"traces_{kind.lower()}.jsonl"), system,
                             singles, test_clips, kind)
    print(f"test accuracy {acc:.4f}")
    return 0


def cmd_inspect_gates(cfg, run_dir, metrics, args):
    system = load_system(cfg, need=("SRG", "RG"))
    clips = load_clips(cfg)
    _, test_b, test_clips = split_batches(cfg, clips)
    pred, _, gates = system.predict(test_b)
    records = [srg.gate_record(c.clip_id, int(p), c.activity_label, G)
               for c, p, G in zip(test_clips, pred, gates)]
    write_jsonl(os.path.join(run_dir, "gates.jsonl"), records)
    for r in records:
        print(json.dumps(_sanitize(r, []), sort_keys=True))
    metrics({"event": "inspect-gates", "n_clips": len(records)})
    return 0


def cmd_grad_check(cfg, run_dir, metrics, args):
    results = gradcheck.run_suite(cfg.seed)
    ok = True
    for r in results:
        metrics({"event": "grad-check", **r})
        print(f"{r['name']:<14} max rel err {r['max_rel_error']:.3e}  "
              f"{'ok' if r['passed'] else 'FAIL'}")
        ok &= r["passed"]
    return 0 if ok else 1


HANDLERS = {
    "generate": cmd_generate,
    "train-srg": cmd_train_srg,
    "train-fd": cmd_train_fd,
    "train-rg": cmd_train_rg,
    "train-alternate": cmd_train_alternate,
    "eval": cmd_eval,
    "inspect-gates": cmd_inspect_gates,
    "grad-check": cmd_grad_check,
}

# flag -> config key
FLAG_KEYS = {
    "seed": "seed", "workers": "workers", "gamma": "gamma", "beta": "beta",
    "tau_max": "tau_max", "agent_lr": "agent_lr", "srg_lr": "srg_lr",
    "episodes": "agent_episodes", "epochs": "srg_epochs", "data": "data",
    "out_root": "out_root", "checkpoint": "checkpoint",
}


def build_parser():
    p = argparse.ArgumentParser(prog="relforge",
                                description="Relation graph + distilling/gating agents.")
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", help="JSON config file (keys as in RunConfig)")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override any config key, e.g. scene.noise_frames=5")
    p.add_argument("--seed", type=int)
    p.add_argument("--workers", type=int)
    p.add_argument("--gamma", type=float)
    p.add_argument("--beta", type=float)
    p.add_argument("--tau-max", type=int)
    p.add_argument("--agent-lr", type=float)
    p.add_argument("--srg-lr", type=float)
    p.add_argument("--episodes", type=int, help="agent episodes per stage")
    p.add_argument("--epochs", type=int, help="SRG epochs per stage")
    p.add_argument("--data", help="dataset JSONL (generate writes it, others read it)")
    p.add_argument("--out-root", help="output root (RELFORGE_OUT takes precedence)")
    p.add_argument("--checkpoint", help="model checkpoint to load")
    p.add_argument("--dump-trace", action="store_true",
                   help="write per-step episode traces of the test clips")
    p.add_argument("--start-stage", type=int, default=1)
    p.add_argument("--resume-dir", help="run directory holding the earlier stage checkpoints")
    p.add_argument("--no-wall-ms", action="store_true",
                   help="omit timing fields so metrics are reproducible byte for byte")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    overrides = {}
    for item in args.set:
        if "=" not in item:
            print(f"error: --set expects KEY=VALUE, got {item!r}", file=sys.stderr)
            return 2
        k, v = item.split("=", 1)
        overrides[k.strip()] = v
    for flag, key in FLAG_KEYS.items():
        v = getattr(args, flag)
        if v is not None:
            overrides[key] = v
    if args.no_wall_ms:
        overrides["record_wall_ms"] = False
    try:
        cfg = parse_config(args.config, overrides)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    cfg.out_root = output_root(cfg)
    run_dir = make_run_dir(cfg.out_root, cfg.seed, args.command)
    print(f"run directory {run_dir}", file=sys.stderr)
    with open(os.path.join(run_dir, "config.json"), "w") as fh:
        json.dump(cfg.to_dict(), fh, indent=2, sort_keys=True)
    metrics = MetricsWriter(os.path.join(run_dir, "metrics.jsonl"), cfg.record_wall_ms)
    metrics({"event": "config", "command": args.command, "config": cfg.to_dict()})
    try:
        return HANDLERS[args.command](cfg, run_dir, metrics, args)
    except (CommandError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (trainer.TrainingAborted, FloatingPointError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    finally:
        metrics.close()


if __name__ == "__main__":
    sys.exit(main())
