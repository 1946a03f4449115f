"""Evaluation, ablation comparison and replay logs."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Optional

import numpy as np

from . import env as E
from . import nn
from . import world as W

REPLAY_SCHEMA_VERSION = 1
BATCH = 64

# Success rate (%) and average completion time (s) reported for the full-scale system.
REFERENCE_ROWS = (
    ("reference: full method", 95.6, 12.1),
    ("reference: w/o curriculum", 78.7, 18.9),
    ("reference: w/o key rewards", 67.9, 21.3),
)


@dataclass
class AblationConfig:
    disable_curriculum: bool = False
    disable_key_rewards: bool = False
    disable_smoothness: bool = False

    @property
    def name(self) -> str:
        parts = [n for n, on in (("no-curriculum", self.disable_curriculum),
                                 ("no-key-rewards", self.disable_key_rewards),
                                 ("no-smoothness", self.disable_smoothness)) if on]
        return "+".join(parts) or "full"


def apply_ablation(ab: AblationConfig, reward_cfg: E.RewardConfig, ppo_cfg=None) -> E.RewardConfig:
    """Return a reward config with the key rewards removed if requested; mutates ``ppo_cfg`` in place."""
    if ab.disable_key_rewards:
        reward_cfg = replace(reward_cfg, bicontact_bonus=0.0, orientation=0.0)
    if ab.disable_smoothness and ppo_cfg is not None:
        ppo_cfg.lambda_pi = 0.0
        ppo_cfg.lambda_v = 0.0
    return reward_cfg


@dataclass
class EpisodeRecord:
    index: int
    seed: int
    outcome: str
    time: float
    pos_error: float
    yaw_error: float
    object: dict


@dataclass
class EvalReport:
    n_episodes: int = 0
    success_rate: float = 0.0
    avg_completion_time: float = math.nan  # over successes only
    level: int = 0
    episodes: list = field(default_factory=list)

    def to_dict(self) -> dict:
        d = asdict(self)
        if math.isnan(d["avg_completion_time"]):
            d["avg_completion_time"] = None
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True)


def episode_seeds(seed: int, n: int) -> list:
    """Distinct, reproducible per-episode seeds derived from the master seed."""
    ss = np.random.SeedSequence(seed)
    return [int(c.generate_state(1, dtype=np.uint64)[0]) for c in ss.spawn(n)]


def _run_batch(policy: nn.GaussianPolicy, seeds: list, level: int, kwargs: dict) -> list:
    n = len(seeds)
    env = E.PushEnv(n, terminate_on_success=True, fixed_level=level, episode_seeds=seeds, **kwargs)
    actor, _ = env.reset()
    first: dict = {}
    while len(first) < n:
        actor, _, _, _, info = env.step(policy.mean(actor))
        for i, out, length, detail in zip(info.finished_index, info.finished_outcomes,
                                          info.finished_lengths, info.finished_detail):
            if i not in first:
                first[i] = (out, length * env.params.control_dt, detail)
    return [first[i] for i in range(n)]


def run_eval(policy: nn.GaussianPolicy, n: int, seed: int, ranges: Optional[E.RandomizationRanges] = None,
             level: Optional[int] = None, params: Optional[W.WorldParams] = None,
             schedule: Optional[E.CurriculumSchedule] = None,
             reward_cfg: Optional[E.RewardConfig] = None) -> EvalReport:
    """Roll out ``n`` fresh episodes with the policy mean; stop each at its first terminal event."""
    schedule = schedule or E.CurriculumSchedule()
    if level is None:
        level = schedule.n_levels - 1
    if not 0 <= level < schedule.n_levels:
        raise ValueError(f"level {level} outside the valid range 0..{schedule.n_levels - 1}")
    report = EvalReport(n_episodes=n, level=level)
    if n == 0:
        return report
    seeds = episode_seeds(seed, n)
    kwargs = dict(params=params, ranges=ranges, schedule=schedule, reward_cfg=reward_cfg)
    results = []
    for start in range(0, n, BATCH):
        results += _run_batch(policy, seeds[start:start + BATCH], level, kwargs)
    times = []
    for i, (out, t, detail) in enumerate(results):
        report.episodes.append(EpisodeRecord(i, seeds[i], out.name.lower(), t, detail["pos_error"],
                                             detail["yaw_error"], detail["object"]))
        if out == E.EpisodeStatus.SUCCESS:
            times.append(t)
    report.success_rate = len(times) / n
    if times:
        report.avg_completion_time = float(np.mean(times))
    return report


# ---------------------------------------------------------------- replay

def record_episode(policy: nn.GaussianPolicy, seed: int, level: int = 0, **kwargs) -> tuple[list, float]:
    """Run one deterministic episode; return its tick records and return."""
    env = E.PushEnv(1, terminate_on_success=True, fixed_level=level, episode_seeds=episode_seeds(seed, 1), **kwargs)
    records: list = []
    env.log_hook = lambda i, rec: records.append(rec)
    actor, _ = env.reset()
    while True:
        actor, _, _, done, info = env.step(policy.mean(actor))
        if done[0]:
            return records, info.finished_returns[0]


def write_replay(records, path, header: Optional[dict] = None) -> int:
    """Write a header line then one JSON object per tick. Returns the tick count."""
    head = {"schema_version": REPLAY_SCHEMA_VERSION, "kind": "replay"}
    head.update(header or {})
    try:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(json.dumps(head, sort_keys=True) + "\n")
            n = 0
            for rec in records:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")
                n += 1
    except OSError as exc:
        raise OSError(f"cannot write replay to {path}: {exc.strerror or exc}") from exc
    return n


def read_replay(path) -> tuple[dict, list]:
    with open(path, encoding="utf-8") as fh:
        lines = [json.loads(x) for x in fh if x.strip()]
    if not lines or "schema_version" not in lines[0]:
        raise ValueError(f"{path}: missing replay header")
    return lines[0], lines[1:]


# ---------------------------------------------------------------- ablations

@dataclass
class ComparisonTable:
    rows: list  # (name, success %, avg time s, delta success, delta time)
    reference: list

    def format(self) -> str:
        out = [f"{'configuration':<30} {'success %':>10} {'avg time s':>11} {'d success':>10} {'d time':>8}"]
        for name, sr, t, dsr, dt in self.rows:
            out.append(f"{name:<30} {sr:>10.1f} {_fmt(t):>11} {dsr:>+10.1f} {_fmt(dt, True):>8}")
        for name, sr, t in self.reference:
            out.append(f"{name:<30} {sr:>10.1f} {t:>11.1f} {'':>10} {'':>8}")
        return "\n".join(out)


def _fmt(x, signed=False):
    if x is None or (isinstance(x, float) and math.isnan(x)):
        return "-"
    return f"{x:+.2f}" if signed else f"{x:.2f}"


def compare_ablations(reports: dict) -> ComparisonTable:
    """Tabulate reports against the first entry (the baseline). No ordering is asserted."""
    if len(reports) < 2:
        raise ValueError("compare_ablations needs at least two reports")
    items = list(reports.items())
    base = items[0][1]
    rows = []
    for name, r in items:
        rows.append((str(name), 100.0 * r.success_rate, r.avg_completion_time,
                     100.0 * (r.success_rate - base.success_rate),
                     r.avg_completion_time - base.avg_completion_time))
    return ComparisonTable(rows, list(REFERENCE_ROWS))
