"""Adam optimizer, polynomial learning-rate decay, and checkpoint IO.

Checkpoint file layout: magic "CKPT", u32 length of a UTF-8 JSON manifest
[{name, shape}, ...], the manifest bytes, then raw little-endian f32 payloads
in manifest order.
"""

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor

CKPT_MAGIC = b"CKPT"


@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params, grads, state, lr=None):
    """One in-place Adam update over a name->Tensor dict.

    Classic L2 weight decay: lambda * theta is added to the raw gradient.
    """
    if lr is None:
        lr = state.lr
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1 ** state.t
    bc2 = 1.0 - b2 ** state.t
    for name, p in params.items():
        g = np.asarray(grads[name], p.data.dtype)
        if g.shape != p.data.shape:
            raise ValueError(f"gradient shape mismatch for {name}")
        if state.weight_decay:
            g = g + np.asarray(state.weight_decay, p.data.dtype) * p.data
        m = state.m.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            state.m[name] = m
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        mhat = m / bc1
        vhat = v / bc2
        p.data = p.data - np.asarray(lr, p.data.dtype) * mhat / (np.sqrt(vhat) + state.eps)
    return params, state


@dataclass
class PolySchedule:
    base_lr: float = 1e-4
    total_steps: int = 2000
    power: float = 0.9

    def __post_init__(self):
        if self.total_steps <= 0 or self.power <= 0:
            raise ValueError("total_steps and power must be positive")


def poly_lr(schedule, step):
    """base_lr * (1 - step/T)^power for step in [0, T]."""
    if not 0 <= step <= schedule.total_steps:
        raise ValueError(f"step {step} outside [0, {schedule.total_steps}]")
    return schedule.base_lr * (1.0 - step / schedule.total_steps) ** schedule.power


def init_param(rng, shape, fan_in):
    """Seeded uniform init in [-1/sqrt(fan_in), 1/sqrt(fan_in)]."""
    bound = 1.0 / np.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, shape).astype(np.float32))


def save_checkpoint(params, path):
    """Write a name->Tensor dict; insertion order defines payload order."""
    manifest = [{"name": n, "shape": list(p.data.shape)} for n, p in params.items()]
    blob = json.dumps(manifest).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CKPT_MAGIC)
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        for p in params.values():
            f.write(np.ascontiguousarray(p.data, dtype="<f4").tobytes())


def load_checkpoint(path):
    with open(path, "rb") as f:
        data = f.read()
    if data[:4] != CKPT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    (n,) = struct.unpack_from("<I", data, 4)
    manifest = json.loads(data[8:8 + n].decode("utf-8"))
    offset = 8 + n
    params = {}
    for entry in manifest:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(data, dtype="<f4", count=count, offset=offset)
        params[entry["name"]] = Tensor(arr.reshape(shape).copy())
        offset += count * 4
    if offset != len(data):
        raise ValueError(f"{path}: trailing or missing payload bytes")
    return params
