"""Binary checkpoints.

Layout (little-endian): magic ``HLOM``, u32 format version, u32 header
length, UTF-8 JSON header, u32 block count, then per block a u64 element
count followed by that many float64 values. Block names and shapes are
listed in the header in storage order.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import nn

MAGIC = b"HLOM"
VERSION = 1


class CheckpointError(RuntimeError):
    pass


@dataclass
class Checkpoint:
    header: dict
    blocks: dict = field(default_factory=dict)  # name -> float64 array, in storage order


def _block_dtype(a: np.ndarray) -> str:
    return str(np.asarray(a).dtype)


def save(path, ckpt: Checkpoint) -> None:
    header = dict(ckpt.header)
    header["blocks"] = [
        {"name": k, "shape": list(np.shape(v)), "dtype": _block_dtype(v)} for k, v in ckpt.blocks.items()
    ]
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(hbytes)))
        fh.write(hbytes)
        fh.write(struct.pack("<I", len(ckpt.blocks)))
        for v in ckpt.blocks.values():
            data = np.ascontiguousarray(np.asarray(v).reshape(-1), dtype="<f8")
            fh.write(struct.pack("<Q", data.size))
            fh.write(data.tobytes())


def load(path) -> Checkpoint:
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except FileNotFoundError as exc:
        raise CheckpointError(f"checkpoint not found: {path}") from exc
    if raw[:4] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {raw[:4]!r}, expected {MAGIC!r}")
    if len(raw) < 12:
        raise CheckpointError(f"{path}: truncated header")
    version, hlen = struct.unpack_from("<II", raw, 4)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version} (expected {VERSION})")
    pos = 12
    try:
        header = json.loads(raw[pos:pos + hlen].decode("utf-8"))
        pos += hlen
        (count,) = struct.unpack_from("<I", raw, pos)
        pos += 4
        specs = header.pop("blocks")
        if len(specs) != count:
            raise CheckpointError(f"{path}: header lists {len(specs)} blocks, file has {count}")
        blocks = {}
        for spec in specs:
            (n,) = struct.unpack_from("<Q", raw, pos)
            pos += 8
            data = np.frombuffer(raw, dtype="<f8", count=n, offset=pos).astype(np.float64)
            pos += 8 * n
            shape = tuple(spec["shape"])
            if int(np.prod(shape)) != n:
                raise CheckpointError(f"{path}: block {spec['name']} size {n} does not match shape {shape}")
            blocks[spec["name"]] = data.reshape(shape).astype(spec["dtype"])
    except (struct.error, ValueError, KeyError) as exc:
        raise CheckpointError(f"{path}: corrupt checkpoint ({exc})") from exc
    if pos != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - pos} trailing bytes")
    return Checkpoint(header, blocks)


# ---------------------------------------------------------------- training state <-> checkpoint

def _jsonable_rng(state):
    return json.loads(json.dumps(state))


def from_training(cfg_dict: dict, cfg_hash: str, trainer) -> Checkpoint:
    pi, v = trainer.pi, trainer.value_net
    blocks = {}
    for i, (w, b) in enumerate(zip(pi.mean_net.weights, pi.mean_net.biases)):
        blocks[f"policy.W{i}"] = w
        blocks[f"policy.b{i}"] = b
    blocks["policy.log_std"] = pi.log_std
    for i, (w, b) in enumerate(zip(v.net.weights, v.net.biases)):
        blocks[f"critic.W{i}"] = w
        blocks[f"critic.b{i}"] = b
    for prefix, net in (("policy", pi.mean_net), ("critic", v.net)):
        if net.in_shift is not None:
            blocks[f"{prefix}.in_shift"] = net.in_shift
            blocks[f"{prefix}.in_scale"] = net.in_scale
    st = trainer.get_state()
    adam = st["adam"]
    if adam["m"] is not None:
        for i, (m, s) in enumerate(zip(adam["m"], adam["v"])):
            blocks[f"adam.m{i}"] = m
            blocks[f"adam.v{i}"] = s
    env_state = st["env"]
    for k in sorted(env_state["arrays"]):
        blocks[f"env.{k}"] = env_state["arrays"][k]
    if st["last_obs"] is not None:
        blocks["obs.actor"] = st["last_obs"][0]
        blocks["obs.critic"] = st["last_obs"][1]
    norm = st.get("obs_norm")
    if norm is not None:
        blocks["norm.mean"] = norm["mean"]
        blocks["norm.var"] = norm["var"]
    header = {
        "config": cfg_dict,
        "config_hash": cfg_hash,
        "iteration": st["iteration"],
        "adam_t": adam["t"],
        "rng": _jsonable_rng(st["rng"]),
        "env_rngs": _jsonable_rng(env_state["rngs"]),
        "curriculum": env_state["curriculum"],
        "policy_layers": list(pi.mean_net.layer_dims),
        "critic_layers": list(v.net.layer_dims),
        "activation": pi.mean_net.activation.value,
        "norm_count": None if norm is None else float(norm["count"]),
    }
    return Checkpoint(header, blocks)


def load_networks(ckpt: Checkpoint):
    h, b = ckpt.header, ckpt.blocks
    act = nn.Activation(h["activation"])
    pl, cl = h["policy_layers"], h["critic_layers"]
    pw = [b[f"policy.W{i}"] for i in range(len(pl) - 1)]
    pb = [b[f"policy.b{i}"] for i in range(len(pl) - 1)]
    cw = [b[f"critic.W{i}"] for i in range(len(cl) - 1)]
    cb = [b[f"critic.b{i}"] for i in range(len(cl) - 1)]
    pi = nn.GaussianPolicy(nn.MlpParams(list(pl), pw, pb, act), b["policy.log_std"].copy())
    v = nn.ValueNet(nn.MlpParams(list(cl), cw, cb, act))
    for prefix, net in (("policy", pi.mean_net), ("critic", v.net)):
        if f"{prefix}.in_shift" in b:
            net.in_shift = b[f"{prefix}.in_shift"].copy()
            net.in_scale = b[f"{prefix}.in_scale"].copy()
    pi.mean_net.validate()
    v.net.validate()
    return pi, v


def restore_training(ckpt: Checkpoint, trainer) -> None:
    pi, v = load_networks(ckpt)
    trainer.pi.set_params(pi.params())
    trainer.value_net.set_params(v.params())
    for dst, src in ((trainer.pi.mean_net, pi.mean_net), (trainer.value_net.net, v.net)):
        dst.in_shift, dst.in_scale = src.in_shift, src.in_scale
    h, b = ckpt.header, ckpt.blocks
    n_params = len(trainer.pi.params()) + len(trainer.value_net.params())
    if "adam.m0" in b:
        m = [b[f"adam.m{i}"] for i in range(n_params)]
        s = [b[f"adam.v{i}"] for i in range(n_params)]
    else:
        m = s = None
    arrays = {k[4:]: v for k, v in b.items() if k.startswith("env.")}
    last_obs: Optional[list] = None
    if "obs.actor" in b:
        last_obs = [b["obs.actor"], b["obs.critic"]]
    trainer.set_state({
        "iteration": h["iteration"],
        "rng": h["rng"],
        "adam": {"m": m, "v": s, "t": h["adam_t"]},
        "env": {"arrays": arrays, "rngs": h["env_rngs"], "curriculum": h["curriculum"]},
        "last_obs": last_obs,
        "obs_norm": None if "norm.mean" not in b else {
            "mean": b["norm.mean"], "var": b["norm.var"], "count": h.get("norm_count") or 0.0},
    })
