"""Synthetic multi-scenario, multi-task ranking logs and their JSONL storage.

Each (user, query) group holds 8-16 candidate items and belongs to one membership
pattern. Task scores come from a latent bilinear model in which the user vector is
rotated by the scenario the group was served in, so scenarios differ in input
distribution and tasks differ in label distribution.

Observable side information: ``ctx`` is the candidate's noisy content vector
shifted by a per-scenario offset; ``seq[k]`` is the user's noisy rotated vector
for scenario ``k`` (a stand-in for a per-scenario behaviour-sequence summary).
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.linalg import expm

GROUP_MIN, GROUP_MAX = 8, 16
FIELDS = ("uid", "qid", "iid", "ctx", "seq", "member", "labels")


@dataclass
class GenConfig:
    K: int = 3
    N: int = 3
    users: int = 1000
    queries: int = 400
    items: int = 1500
    instances: int = 55_556
    memberships: list[list[int]] = field(default_factory=lambda: [[0], [1], [2], [0, 1], [1, 2]])
    scenario_mix: list[float] = field(default_factory=lambda: [0.45, 0.25, 0.15, 0.10, 0.05])
    latent_dim: int = 4
    positive_rates: list[float] = field(default_factory=lambda: [0.30, 0.08, 0.02])
    task_bias: list[float] | None = None
    task_spread: float = 1.0
    scenario_shift: list[float] = field(default_factory=lambda: [2.5, 2.5, 2.5])
    seq_noise: float = 0.1
    ctx_noise: float = 0.1
    noise_std: float = 0.1
    seed: int = 0

    def validate(self) -> None:
        if min(self.K, self.N, self.users, self.queries, self.items, self.instances, self.latent_dim) < 1:
            raise ValueError("counts and dimensions must be positive")
        if len(self.memberships) != len(self.scenario_mix):
            raise ValueError("memberships and scenario_mix lengths differ")
        if abs(sum(self.scenario_mix) - 1.0) > 1e-9 or min(self.scenario_mix) < 0:
            raise ValueError(f"scenario_mix must be a probability vector, got {self.scenario_mix}")
        for pattern in self.memberships:
            if not pattern or any(not 0 <= k < self.K for k in pattern) or len(set(pattern)) != len(pattern):
                raise ValueError(f"invalid membership pattern {pattern} for K={self.K}")
        if self.task_bias is not None and len(self.task_bias) != self.N:
            raise ValueError("task_bias needs one entry per task")
        if self.task_bias is None:
            if len(self.positive_rates) != self.N or not all(0 < r < 1 for r in self.positive_rates):
                raise ValueError("positive_rates needs one rate in (0, 1) per task")
        if len(self.scenario_shift) != self.K or min(self.scenario_shift) < 0:
            raise ValueError("scenario_shift needs one non-negative entry per scenario")
        if self.noise_std < 0 or self.seq_noise < 0 or self.ctx_noise < 0:
            raise ValueError("noise levels must be >= 0")
        if self.instances < GROUP_MIN:
            raise ValueError(f"instances={self.instances} is smaller than the minimum group size {GROUP_MIN}")
        if self.items < GROUP_MAX:
            raise ValueError(f"need at least {GROUP_MAX} items to fill a group")

    @classmethod
    def from_dict(cls, raw: dict) -> "GenConfig":
        unknown = set(raw) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown GenConfig keys: {sorted(unknown)}")
        cfg = cls(**raw)
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path: str | Path) -> "GenConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Instance:
    uid: int
    qid: int
    iid: int
    ctx: list[float]
    seq: list[list[float]]
    member: list[int]
    labels: list[int]

    @property
    def group(self) -> tuple[int, int]:
        return (self.uid, self.qid)


@dataclass
class Batch:
    """Columnar view of a list of instances, the form every model consumes."""

    uid: np.ndarray
    qid: np.ndarray
    iid: np.ndarray
    ctx: np.ndarray      # (n, latent_dim)
    seq: np.ndarray      # (n, K, seq_dim)
    member: np.ndarray   # (n, K) float 0/1
    labels: np.ndarray   # (n, N) float 0/1

    def __len__(self) -> int:
        return len(self.uid)

    def take(self, idx) -> "Batch":
        return Batch(*(getattr(self, f)[idx] for f in FIELDS))

    @property
    def group_keys(self) -> np.ndarray:
        return self.uid.astype(np.int64) * (int(self.qid.max(initial=0)) + 1) + self.qid

    @classmethod
    def from_instances(cls, instances: Sequence[Instance]) -> "Batch":
        if not instances:
            raise ValueError("cannot batch an empty instance list")
        return cls(
            np.array([x.uid for x in instances], dtype=np.int64),
            np.array([x.qid for x in instances], dtype=np.int64),
            np.array([x.iid for x in instances], dtype=np.int64),
            np.array([x.ctx for x in instances], dtype=np.float64),
            np.array([x.seq for x in instances], dtype=np.float64),
            np.array([x.member for x in instances], dtype=np.float64),
            np.array([x.labels for x in instances], dtype=np.float64),
        )

    def to_instances(self) -> list[Instance]:
        return [
            Instance(int(self.uid[i]), int(self.qid[i]), int(self.iid[i]), self.ctx[i].tolist(),
                     self.seq[i].tolist(), self.member[i].astype(int).tolist(), self.labels[i].astype(int).tolist())
            for i in range(len(self))
        ]


def _rotation(rng: np.random.Generator, dim: int, angle: float) -> np.ndarray:
    a = rng.normal(size=(dim, dim))
    skew = (a - a.T) / np.sqrt(2.0 * dim)
    return expm(angle * skew)


def _group_sizes(rng: np.random.Generator, total: int) -> list[int]:
    sizes: list[int] = []
    remaining = total
    while remaining >= GROUP_MAX + GROUP_MIN:
        size = int(rng.integers(GROUP_MIN, GROUP_MAX + 1))
        sizes.append(size)
        remaining -= size
    # finish with one or two groups that exactly absorb the remainder
    if remaining > GROUP_MAX:
        first = int(rng.integers(GROUP_MIN, remaining - GROUP_MIN + 1))
        first = min(first, GROUP_MAX)
        sizes.append(first)
        remaining -= first
    if remaining:
        sizes.append(remaining)
    return sizes


def generate_dataset(config: GenConfig) -> list[Instance]:
    return generate_batch(config)[0].to_instances()


def generate_batch(config: GenConfig) -> tuple[Batch, list[float]]:
    """Columnar generation. Returns the data and the task offsets actually used."""
    config.validate()
    rng = np.random.default_rng(config.seed)
    K, N, L = config.K, config.N, config.latent_dim
    users = rng.normal(size=(config.users, L))
    queries = rng.normal(size=(config.queries, L))
    items = rng.normal(size=(config.items, L))
    task_w = 1.0 + config.task_spread * rng.normal(size=(N, L))
    rotations = np.stack([_rotation(rng, L, config.scenario_shift[k]) for k in range(K)])
    ctx_dirs = rng.normal(size=(K, L))
    ctx_dirs /= np.linalg.norm(ctx_dirs, axis=1, keepdims=True)
    ctx_offsets = np.asarray(config.scenario_shift)[:, None] * ctx_dirs
    # item content features: the item's latent vector seen through noise
    content = items + config.ctx_noise * rng.normal(size=items.shape)
    # per-user, per-scenario behaviour summary: the rotated user vector seen through noise
    seq_table = np.einsum("kij,uj->uki", rotations, users)
    seq_table += config.seq_noise * rng.normal(size=seq_table.shape)

    sizes = _group_sizes(rng, config.instances)
    n = int(sum(sizes))
    uid = np.empty(n, dtype=np.int64)
    qid = np.empty(n, dtype=np.int64)
    iid = np.empty(n, dtype=np.int64)
    member = np.zeros((n, K))
    served = np.empty(n, dtype=np.int64)
    used: set[tuple[int, int]] = set()
    patterns = np.arange(len(config.memberships))
    pos = 0
    for size in sizes:
        while True:
            u, q = int(rng.integers(config.users)), int(rng.integers(config.queries))
            if (u, q) not in used:
                used.add((u, q))
                break
        pattern = config.memberships[int(rng.choice(patterns, p=config.scenario_mix))]
        sl = slice(pos, pos + size)
        uid[sl], qid[sl] = u, q
        iid[sl] = rng.choice(config.items, size=size, replace=False)
        member[sl, pattern] = 1.0
        served[sl] = pattern[int(rng.integers(len(pattern)))]
        pos += size

    z = np.einsum("nij,nj->ni", rotations[served], users[uid]) + queries[qid]
    raw = np.einsum("ni,ti->nt", z * items[iid], task_w) / np.sqrt(L)
    raw += config.noise_std * rng.normal(size=raw.shape)
    if config.task_bias is None:
        bias = np.array([-np.quantile(raw[:, t], 1.0 - config.positive_rates[t]) for t in range(N)])
    else:
        bias = np.asarray(config.task_bias, dtype=np.float64)
    labels = (raw + bias > 0).astype(np.float64)
    ctx = content[iid] + ctx_offsets[served]
    return Batch(uid, qid, iid, ctx, seq_table[uid], member, labels), bias.tolist()


def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def _line(x: Instance) -> str:
    def reals(v):
        return "[" + ",".join(_fmt(a) for a in v) + "]"

    def ints(v):
        return "[" + ",".join(str(int(a)) for a in v) + "]"

    seq = "[" + ",".join(reals(row) for row in x.seq) + "]"
    return (f'{{"uid":{int(x.uid)},"qid":{int(x.qid)},"iid":{int(x.iid)},"ctx":{reals(x.ctx)},'
            f'"seq":{seq},"member":{ints(x.member)},"labels":{ints(x.labels)}}}')


def write_dataset(instances: Sequence[Instance], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for x in instances:
            fh.write(_line(x))
            fh.write("\n")


def read_dataset(path: str | Path) -> list[Instance]:
    out: list[Instance] = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                raw = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValueError(f"{path}: line {lineno}: malformed record ({exc.msg})") from exc
            if not isinstance(raw, dict):
                raise ValueError(f"{path}: line {lineno}: expected an object")
            for name in FIELDS:
                if name not in raw:
                    raise ValueError(f"{path}: line {lineno}: missing field {name!r}")
            out.append(Instance(int(raw["uid"]), int(raw["qid"]), int(raw["iid"]),
                                [float(a) for a in raw["ctx"]], [[float(a) for a in r] for r in raw["seq"]],
                                [int(a) for a in raw["member"]], [int(a) for a in raw["labels"]]))
    return out


def split_dataset(instances: Sequence[Instance], eval_fraction: float, seed: int
                  ) -> tuple[list[Instance], list[Instance]]:
    """Split whole (uid, qid) groups so no query group straddles train and eval."""
    if not 0.0 < eval_fraction < 1.0:
        raise ValueError(f"eval_fraction must be in (0, 1), got {eval_fraction}")
    keys = sorted({x.group for x in instances})
    n_eval = int(round(len(keys) * eval_fraction))
    if n_eval == 0 or n_eval == len(keys):
        raise ValueError(f"eval_fraction={eval_fraction} leaves one side empty ({len(keys)} groups)")
    rng = np.random.default_rng(seed)
    chosen = {keys[i] for i in rng.permutation(len(keys))[:n_eval]}
    train = [x for x in instances if x.group not in chosen]
    held = [x for x in instances if x.group in chosen]
    return train, held
