"""Feature schema: which raw fields become which embeddings, grouped into feature tokens.

Schema files are JSON with four top-level keys::

    {
      "features": [{"name": "uid", "kind": "categorical", "source": "uid",
                    "cardinality": 3000, "dim": 8, "is_important": true},
                   {"name": "seq0", "kind": "sequence-summary", "source": "seq",
                    "index": 0, "dim": 8}, ...],
      "groups":    [{"name": "user", "features": ["uid", "seq0"]}, ...],
      "scenarios": [{"name": "s0", "prior": ["seq0"]}, ...],
      "tasks":     [{"name": "click", "prior": ["ctx"]}, ...]
    }

``source`` names a dataset field (uid, qid, iid, ctx, seq, member); ``index``
picks one scenario's row out of ``seq``. Each feature belongs to exactly one
group, and each group becomes one feature token.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

KINDS = ("categorical", "dense", "sequence-summary")
CATEGORICAL_SOURCES = ("uid", "qid", "iid")
DENSE_SOURCES = ("ctx", "member")


class SchemaError(ValueError):
    pass


@dataclass
class Feature:
    name: str
    kind: str
    source: str
    dim: int
    cardinality: int | None = None
    index: int | None = None
    is_important: bool = False

    def to_dict(self) -> dict:
        out = {"name": self.name, "kind": self.kind, "source": self.source, "dim": self.dim}
        if self.cardinality is not None:
            out["cardinality"] = self.cardinality
        if self.index is not None:
            out["index"] = self.index
        if self.is_important:
            out["is_important"] = True
        return out


@dataclass
class FeatureSchema:
    features: list[Feature]
    groups: list[tuple[str, list[str]]]
    scenarios: list[tuple[str, list[str]]]
    tasks: list[tuple[str, list[str]]]
    _by_name: dict[str, Feature] = field(init=False, repr=False)

    def __post_init__(self):
        self._by_name = {}
        for f in self.features:
            if f.name in self._by_name:
                raise SchemaError(f"duplicate feature {f.name!r}")
            if f.kind not in KINDS:
                raise SchemaError(f"feature {f.name!r}: unknown kind {f.kind!r}")
            if f.dim < 1:
                raise SchemaError(f"feature {f.name!r}: dim must be >= 1")
            if f.kind == "categorical":
                if f.source not in CATEGORICAL_SOURCES:
                    raise SchemaError(f"feature {f.name!r}: categorical source must be one of {CATEGORICAL_SOURCES}")
                if f.cardinality is None or f.cardinality < 1:
                    raise SchemaError(f"feature {f.name!r}: cardinality must be >= 1")
            elif f.kind == "dense" and f.source not in DENSE_SOURCES:
                raise SchemaError(f"feature {f.name!r}: dense source must be one of {DENSE_SOURCES}")
            elif f.kind == "sequence-summary" and (f.source != "seq" or f.index is None or f.index < 0):
                raise SchemaError(f"feature {f.name!r}: sequence-summary needs source 'seq' and an index")
            self._by_name[f.name] = f
        if not self.groups:
            raise SchemaError("at least one feature group is required")
        seen: dict[str, str] = {}
        for gname, members in self.groups:
            if not members:
                raise SchemaError(f"group {gname!r} is empty")
            for m in members:
                if m not in self._by_name:
                    raise SchemaError(f"group {gname!r} references unknown feature {m!r}")
                if m in seen:
                    raise SchemaError(f"feature {m!r} is in groups {seen[m]!r} and {gname!r}")
                seen[m] = gname
        missing = set(self._by_name) - set(seen)
        if missing:
            raise SchemaError(f"features without a group: {sorted(missing)}")
        if not self.scenarios or not self.tasks:
            raise SchemaError("schema needs at least one scenario and one task")
        for role, entries in (("scenario", self.scenarios), ("task", self.tasks)):
            for name, prior in entries:
                for p in prior:
                    if p not in self._by_name:
                        raise SchemaError(f"{role} {name!r} prior references unknown feature {p!r}")

    def __getitem__(self, name: str) -> Feature:
        return self._by_name[name]

    @property
    def n_groups(self) -> int:
        return len(self.groups)

    @property
    def n_scenarios(self) -> int:
        return len(self.scenarios)

    @property
    def n_tasks(self) -> int:
        return len(self.tasks)

    @property
    def important(self) -> list[Feature]:
        return [f for f in self.features if f.is_important]

    def group_dim(self, j: int) -> int:
        return sum(self[m].dim for m in self.groups[j][1])

    def prior_dim(self, names: list[str]) -> int:
        return sum(self[m].dim for m in names)

    def to_dict(self) -> dict:
        return {
            "features": [f.to_dict() for f in self.features],
            "groups": [{"name": g, "features": list(m)} for g, m in self.groups],
            "scenarios": [{"name": s, "prior": list(p)} for s, p in self.scenarios],
            "tasks": [{"name": t, "prior": list(p)} for t, p in self.tasks],
        }

    def hash(self) -> str:
        canon = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode("utf-8")).hexdigest()

    @classmethod
    def from_dict(cls, raw: dict) -> "FeatureSchema":
        for key in ("features", "groups", "scenarios", "tasks"):
            if key not in raw:
                raise SchemaError(f"schema is missing key {key!r}")
        feats = []
        for f in raw["features"]:
            feats.append(Feature(
                name=f["name"], kind=f["kind"], source=f.get("source", f["name"]), dim=int(f["dim"]),
                cardinality=f.get("cardinality"), index=f.get("index"),
                is_important=bool(f.get("is_important", False)),
            ))
        scenarios = []
        for s in raw["scenarios"]:
            if "prior" not in s:
                raise SchemaError(f"scenario {s.get('name')!r} has no prior declaration")
            if not s["prior"]:
                raise SchemaError(f"scenario {s.get('name')!r} declares an empty prior")
            scenarios.append((s["name"], list(s["prior"])))
        tasks = []
        for t in raw["tasks"]:
            if "prior" not in t:
                raise SchemaError(f"task {t.get('name')!r} has no prior declaration")
            tasks.append((t["name"], list(t["prior"])))
        return cls(feats, [(g["name"], list(g["features"])) for g in raw["groups"]], scenarios, tasks)

    @classmethod
    def load(cls, path: str | Path) -> "FeatureSchema":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    def check_batch(self, batch) -> None:
        """Raise SchemaError naming the first feature the batch cannot supply."""
        for f in self.features:
            if f.kind == "categorical":
                ids = getattr(batch, f.source)
                if len(ids) and (ids.min() < 0 or ids.max() >= f.cardinality):
                    bad = int(ids[(ids < 0) | (ids >= f.cardinality)][0])
                    raise SchemaError(f"feature {f.name!r}: id {bad} outside cardinality {f.cardinality}")
            elif f.kind == "dense":
                width = getattr(batch, f.source).shape[1]
                if width != f.dim:
                    raise SchemaError(f"feature {f.name!r}: expected dim {f.dim}, data has {width}")
            else:
                _, k, width = batch.seq.shape
                if f.index >= k or width != f.dim:
                    raise SchemaError(f"feature {f.name!r}: seq[{f.index}] of dim {f.dim} not in data "
                                      f"({k} rows of dim {width})")
        if batch.member.shape[1] != self.n_scenarios:
            raise SchemaError(f"schema declares {self.n_scenarios} scenarios, data has {batch.member.shape[1]}")
        if batch.labels.shape[1] != self.n_tasks:
            raise SchemaError(f"schema declares {self.n_tasks} tasks, data has {batch.labels.shape[1]}")


def default_schema(gen, emb_dim: int = 8, include_member: bool = True,
                   task_names: list[str] | None = None) -> FeatureSchema:
    """Four-group schema matching the synthetic generator's fields."""
    K, N = gen.K, gen.N
    feats = [
        Feature("uid", "categorical", "uid", emb_dim, cardinality=gen.users, is_important=True),
        Feature("qid", "categorical", "qid", emb_dim, cardinality=gen.queries, is_important=True),
        Feature("iid", "categorical", "iid", emb_dim, cardinality=gen.items, is_important=True),
        Feature("ctx", "dense", "ctx", gen.latent_dim),
    ]
    feats += [Feature(f"seq{k}", "sequence-summary", "seq", gen.latent_dim, index=k) for k in range(K)]
    context = ["ctx"]
    if include_member:
        feats.append(Feature("member", "dense", "member", K))
        context.append("member")
    groups = [
        ("user", ["uid"] + [f"seq{k}" for k in range(K)]),
        ("query", ["qid"]),
        ("item", ["iid"]),
        ("context", context),
    ]
    if task_names is None:
        task_names = ["click", "like", "fav"][:N] + [f"task{n}" for n in range(3, N)]
    return FeatureSchema(
        feats, groups,
        [(f"s{k}", [f"seq{k}"]) for k in range(K)],
        [(task_names[n], ["ctx"]) for n in range(N)],
    )


def feature_value(batch, f: Feature) -> np.ndarray:
    if f.kind == "categorical":
        return getattr(batch, f.source)
    if f.kind == "dense":
        return getattr(batch, f.source)
    return batch.seq[:, f.index, :]
