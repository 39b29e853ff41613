"""Parameter storage, initialisation, optimiser rules, gradient checks and the MDL1 archive."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping

import numpy as np

from .autodiff import Tape, Tensor, backward

ADAGRAD = "adagrad"
RMSPROP = "rmsprop"
RULES = (ADAGRAD, RMSPROP)
RMS_DECAY = 0.9
OPT_EPS = 1e-8
MAGIC = b"MDL1"


@dataclass
class ParamStore:
    params: dict[str, np.ndarray] = field(default_factory=dict)
    rules: dict[str, str] = field(default_factory=dict)
    acc: dict[str, np.ndarray] = field(default_factory=dict)

    def add(self, name: str, value: np.ndarray, rule: str = RMSPROP) -> None:
        if name in self.params:
            raise KeyError(f"duplicate parameter name {name!r}")
        if rule not in RULES:
            raise ValueError(f"unknown optimiser rule {rule!r}")
        value = np.asarray(value, dtype=np.float64)
        self.params[name] = value
        self.rules[name] = rule
        self.acc[name] = np.zeros_like(value)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.params[name]

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def __iter__(self):
        return iter(self.params)

    def __len__(self) -> int:
        return len(self.params)

    def count(self) -> int:
        return int(sum(v.size for v in self.params.values()))

    def copy(self) -> "ParamStore":
        return ParamStore(
            {k: v.copy() for k, v in self.params.items()},
            dict(self.rules),
            {k: v.copy() for k, v in self.acc.items()},
        )

    def on_tape(self, tape: Tape) -> dict[str, Tensor]:
        return {name: tape.param(name, value) for name, value in self.params.items()}


def init_params(spec: Mapping[str, tuple], seed: int) -> ParamStore:
    """Build a store from ``name -> (shape, kind[, rule])``.

    ``kind`` is ``"zeros"``, ``"ones"`` (layer-norm gains) or ``"uniform-scaled"``
    (Xavier uniform, fans taken from the last two axes). Draws happen in declaration order from one seeded stream.
    """
    rng = np.random.default_rng(seed)
    store = ParamStore()
    for name, entry in spec.items():
        shape, kind = tuple(entry[0]), entry[1]
        rule = entry[2] if len(entry) > 2 else RMSPROP
        if not shape or any(int(n) < 1 for n in shape):
            raise ValueError(f"{name}: shape must be positive, got {shape}")
        if kind == "zeros":
            value = np.zeros(shape)
        elif kind == "ones":
            value = np.ones(shape)
        elif kind == "uniform-scaled":
            fan_in = shape[-2] if len(shape) > 1 else shape[0]
            fan_out = shape[-1]
            a = np.sqrt(6.0 / (fan_in + fan_out))
            value = rng.uniform(-a, a, size=shape)
        else:
            raise ValueError(f"{name}: unknown init kind {kind!r}")
        store.add(name, value, rule)
    return store


def optimizer_step(store: ParamStore, grads: Mapping[str, np.ndarray], lr_dense: float,
                   lr_sparse: float | None = None) -> ParamStore:
    """In-place update; adagrad-tagged entries use ``lr_sparse`` (defaults to ``lr_dense``)."""
    if lr_sparse is None:
        lr_sparse = lr_dense
    if lr_dense < 0 or lr_sparse < 0:
        raise ValueError("learning rates must be >= 0")
    for name, g in grads.items():
        if not isinstance(name, str):
            continue
        if name not in store.params:
            raise KeyError(f"gradient for unknown parameter {name!r}")
        p = store.params[name]
        if g.shape != p.shape:
            raise ValueError(f"{name}: gradient shape {g.shape} != parameter shape {p.shape}")
        acc = store.acc[name]
        if store.rules[name] == ADAGRAD:
            acc += g * g
            lr = lr_sparse
        else:
            acc *= RMS_DECAY
            acc += (1.0 - RMS_DECAY) * g * g
            lr = lr_dense
        if lr == 0.0:
            continue
        p -= lr * g / (np.sqrt(acc) + OPT_EPS)
    return store


ScalarFn = Callable[[Tape, dict[str, Tensor]], Tensor]


def _evaluate(fn: ScalarFn, params: Mapping[str, np.ndarray]) -> float:
    tape = Tape()
    out = fn(tape, {k: tape.param(k, v) for k, v in params.items()})
    value = float(np.asarray(out.value).reshape(()))
    if not np.isfinite(value):
        raise FloatingPointError(f"function value is not finite: {value}")
    return value


def finite_diff_check(fn: ScalarFn, params: ParamStore | Mapping[str, np.ndarray],
                      epsilon: float = 1e-5) -> float:
    """Max relative error between tape gradients and central differences.

    ``fn(tape, tensors)`` must return a scalar tensor built from ``tensors``.
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    values = params.params if isinstance(params, ParamStore) else params
    values = {k: np.array(v, dtype=np.float64) for k, v in values.items()}
    tape = Tape()
    out = fn(tape, {k: tape.param(k, v) for k, v in values.items()})
    if not np.all(np.isfinite(out.value)):
        raise FloatingPointError("function value is not finite")
    ad = backward(tape, out)
    worst = 0.0
    for name, value in values.items():
        flat = value.reshape(-1)
        ad_flat = ad[name].reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + epsilon
            hi = _evaluate(fn, values)
            flat[i] = orig - epsilon
            lo = _evaluate(fn, values)
            flat[i] = orig
            fd = (hi - lo) / (2.0 * epsilon)
            err = abs(ad_flat[i] - fd) / max(1e-8, abs(ad_flat[i]) + abs(fd))
            worst = max(worst, err)
    return worst


def save_archive(store: ParamStore, path: str | Path, include_state: bool = True) -> None:
    """Write the MDL1 binary format; optimiser state goes under ``<name>.acc``."""
    items = list(store.params.items())
    if include_state:
        items += [(f"{k}.acc", v) for k, v in store.acc.items()]
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(items)))
        for name, value in items:
            raw = name.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<I", value.ndim))
            for n in value.shape:
                fh.write(struct.pack("<Q", n))
            fh.write(np.ascontiguousarray(value, dtype="<f8").tobytes())


def read_archive(path: str | Path) -> dict[str, np.ndarray]:
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise ValueError(f"{path}: not an MDL1 archive")
    pos = 4
    (count,) = struct.unpack_from("<Q", data, pos)
    pos += 8
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (n,) = struct.unpack_from("<I", data, pos)
        pos += 4
        name = data[pos:pos + n].decode("utf-8")
        pos += n
        (rank,) = struct.unpack_from("<I", data, pos)
        pos += 4
        shape = struct.unpack_from(f"<{rank}Q", data, pos)
        pos += 8 * rank
        size = int(np.prod(shape)) if rank else 1
        out[name] = np.frombuffer(data, dtype="<f8", count=size, offset=pos).reshape(shape).astype(np.float64)
        pos += 8 * size
    if pos != len(data):
        raise ValueError(f"{path}: {len(data) - pos} trailing bytes")
    return out


def load_archive(path: str | Path, rules: Mapping[str, str]) -> ParamStore:
    raw = read_archive(path)
    store = ParamStore()
    for name, value in raw.items():
        if name.endswith(".acc") and name[:-4] in raw:
            continue
        store.add(name, value, rules.get(name, RMSPROP))
    for name in store.params:
        if f"{name}.acc" in raw:
            store.acc[name] = raw[f"{name}.acc"].copy()
    return store
