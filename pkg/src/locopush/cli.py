"""Command-line entry point: train | eval | replay | print-config."""
from __future__ import annotations

import argparse
import contextlib
import csv
import dataclasses
import logging
import os
import sys
from pathlib import Path
from typing import Optional

import numpy as np
from threadpoolctl import threadpool_limits

from . import checkpoint as ckpt_io
from . import config as C
from . import env as E
from . import eval as ev
from . import nn, ppo

log = logging.getLogger("locopush")

METRICS_HEADER = [
    "iteration", "mean_return", "mean_length", "success_rate", "surrogate_loss", "value_loss",
    "entropy", "smoothness_loss", "clip_fraction", "level", "episodes", "mean_reward", "diverged", "aborted",
]
CHECKPOINT_NAME = "checkpoint.hlom"


def _fmt(v) -> str:
    if isinstance(v, bool):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, np.integer):
        return str(int(v))
    return str(v)


def metrics_row(s: ppo.TrainStats) -> list:
    d = dataclasses.asdict(s)
    return [_fmt(d[k]) for k in METRICS_HEADER]


def read_metrics(path) -> list:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def build_trainer(cfg: C.ExperimentConfig) -> ppo.Trainer:
    pcfg = dataclasses.replace(cfg.ppo, seed=cfg.seed)
    reward_cfg = ev.apply_ablation(cfg.ablation, cfg.rewards, pcfg)
    env = E.PushEnv(cfg.ppo.n_envs, seed=cfg.seed, params=cfg.world, ranges=cfg.ranges,
                    schedule=cfg.curriculum, reward_cfg=reward_cfg, fixed_level=cfg.training_level())
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0]))
    net = cfg.network
    pi = nn.GaussianPolicy.create(rng, E.OBS_DIM, E.ACTION_DIM, net.actor_hidden, net.activation, net.init_log_std)
    v = nn.ValueNet.create(rng, E.OBS_DIM + E.PRIV_DIM, net.critic_hidden, net.activation)
    return ppo.Trainer(env, pi, v, pcfg)


def _save(trainer: ppo.Trainer, cfg: C.ExperimentConfig, out: Path) -> Path:
    path = out / CHECKPOINT_NAME
    tmp = out / (CHECKPOINT_NAME + ".tmp")
    ckpt_io.save(tmp, ckpt_io.from_training(cfg.to_dict(), cfg.hash(), trainer))
    os.replace(tmp, path)
    return path


def train(cfg: C.ExperimentConfig, resume: Optional[str] = None, progress=None) -> Path:
    """Run (or continue) training; returns the output directory."""
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    trainer = build_trainer(cfg)
    metrics_path = out / "metrics.csv"
    rows: list = []
    if resume is not None:
        ck_path = Path(resume)
        if ck_path.is_dir():
            ck_path = ck_path / CHECKPOINT_NAME
        if not ck_path.exists():
            raise ckpt_io.CheckpointError(f"resume requested but no checkpoint at {ck_path}")
        ck = ckpt_io.load(ck_path)
        if ck.header["config_hash"] != cfg.hash():
            log.warning("config hash mismatch: checkpoint %s vs current %s", ck.header["config_hash"][:12],
                        cfg.hash()[:12])
        ckpt_io.restore_training(ck, trainer)
        if metrics_path.exists():
            with open(metrics_path, newline="") as fh:
                rows = [r for r in csv.reader(fh)][1:]
            rows = [r for r in rows if int(r[0]) <= trainer.iteration]
    (out / "config.yaml").write_text(cfg.dump())
    with open(metrics_path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRICS_HEADER)
        w.writerows(rows)
        while trainer.iteration < cfg.ppo.total_iterations:
            stats = trainer.step()
            w.writerow(metrics_row(stats))
            fh.flush()
            if progress is not None:
                progress(stats)
            if trainer.iteration % cfg.checkpoint_every == 0:
                _save(trainer, cfg, out)
    _save(trainer, cfg, out)
    return out


def _load_policy(path):
    ck = ckpt_io.load(path)
    pi, _ = ckpt_io.load_networks(ck)
    cfg = C.from_dict(ck.header["config"])
    return pi, cfg


def evaluate(checkpoint, n: int, seed: int, level: Optional[int], out) -> ev.EvalReport:
    pi, cfg = _load_policy(checkpoint)
    schedule = cfg.curriculum
    if level is not None and not 0 <= level < schedule.n_levels:
        raise ValueError(f"level {level} outside the valid range 0..{schedule.n_levels - 1}")
    reward_cfg = ev.apply_ablation(cfg.ablation, cfg.rewards)
    report = ev.run_eval(pi, n, seed, cfg.ranges, level, cfg.world, schedule, reward_cfg)
    if out is not None:
        Path(out).write_text(report.to_json() + "\n")
    return report


def replay(checkpoint, seed: int, level: int, out) -> tuple[int, float]:
    pi, cfg = _load_policy(checkpoint)
    if not 0 <= level < cfg.curriculum.n_levels:
        raise ValueError(f"level {level} outside the valid range 0..{cfg.curriculum.n_levels - 1}")
    reward_cfg = ev.apply_ablation(cfg.ablation, cfg.rewards)
    records, ret = ev.record_episode(pi, seed, level, params=cfg.world, ranges=cfg.ranges,
                                     schedule=cfg.curriculum, reward_cfg=reward_cfg)
    n = ev.write_replay(records, out, {"seed": seed, "level": level, "episode_return": ret})
    return n, ret


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="locopush", description=__doc__)
    sub = p.add_subparsers(dest="cmd", required=True)

    def common(sp):
        sp.add_argument("--seed", type=int, default=None)
        sp.add_argument("--deterministic", action="store_true", help="single-threaded, bit-reproducible")

    t = sub.add_parser("train", help="train the planner policy")
    t.add_argument("--config", default=None)
    t.add_argument("--out", default=None)
    t.add_argument("--resume", nargs="?", const="", default=None,
                   help="continue from a checkpoint (default: <out>/checkpoint.hlom)")
    t.add_argument("--iterations", type=int, default=None)
    t.add_argument("--no-curriculum", action="store_true")
    t.add_argument("--no-key-rewards", action="store_true")
    t.add_argument("--no-smoothness", action="store_true")
    common(t)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("checkpoint")
    e.add_argument("--n", type=int, default=100)
    e.add_argument("--level", type=int, default=None)
    e.add_argument("--out", default=None)
    common(e)

    r = sub.add_parser("replay", help="write a tick-level log of one episode")
    r.add_argument("checkpoint")
    r.add_argument("--level", type=int, default=0)
    r.add_argument("--out", required=True)
    common(r)

    c = sub.add_parser("print-config", help="print the effective configuration")
    c.add_argument("--config", default=None)
    return p


def _train_config(args) -> C.ExperimentConfig:
    cfg = C.load(args.config) if args.config else C.from_dict({})
    ab = dataclasses.replace(
        cfg.ablation,
        disable_curriculum=cfg.ablation.disable_curriculum or args.no_curriculum,
        disable_key_rewards=cfg.ablation.disable_key_rewards or args.no_key_rewards,
        disable_smoothness=cfg.ablation.disable_smoothness or args.no_smoothness,
    )
    changes = {"ablation": ab}
    if args.seed is not None:
        changes["seed"] = args.seed
    if args.out is not None:
        changes["out_dir"] = args.out
    if args.iterations is not None:
        changes["ppo"] = dataclasses.replace(cfg.ppo, total_iterations=args.iterations)
    cfg = C.override(cfg, **changes)
    C.validate(cfg)
    return cfg


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")
    limits = threadpool_limits(1) if getattr(args, "deterministic", False) else contextlib.nullcontext()
    try:
        with limits:
            if args.cmd == "print-config":
                cfg = C.load(args.config) if args.config else C.from_dict({})
                sys.stdout.write(cfg.dump())
            elif args.cmd == "train":
                cfg = _train_config(args)
                resume = None
                if args.resume is not None:
                    resume = args.resume or str(Path(cfg.out_dir) / CHECKPOINT_NAME)

                def progress(s):
                    log.info("iter %d return %.3f success %.3f level %d", s.iteration, s.mean_return,
                             s.success_rate, s.level)

                out = train(cfg, resume, progress)
                print(out / "metrics.csv")
            elif args.cmd == "eval":
                report = evaluate(args.checkpoint, args.n, args.seed or 0, args.level, args.out)
                print(f"success_rate {report.success_rate:.3f} avg_completion_time {report.avg_completion_time:.2f} "
                      f"n {report.n_episodes} level {report.level}")
            elif args.cmd == "replay":
                n, ret = replay(args.checkpoint, args.seed or 0, args.level, args.out)
                print(f"{n} ticks, return {ret:.6f} -> {args.out}")
    except C.ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (ckpt_io.CheckpointError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
