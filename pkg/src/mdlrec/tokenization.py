"""Turn a batch into feature, scenario and task tokens sharing one width ``d``.

Feature tokens project each group's concatenated embeddings. Scenario and task
tokens run a dedicated two-layer FFN over the important features' extra
embeddings concatenated with that token's prior features; the global scenario
token sees the important embeddings alone.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .params import ADAGRAD
from .schema import Feature, FeatureSchema, SchemaError, feature_value

GLOBAL = "global"


def _table_spec(f: Feature, prefix: str) -> dict:
    return {f"{prefix}.{f.name}": ((f.cardinality, f.dim), "uniform-scaled", ADAGRAD)}


def _ffn_spec(prefix: str, d_in: int, hidden: int, d_out: int) -> dict:
    return {
        f"{prefix}.W1": ((d_in, hidden), "uniform-scaled"),
        f"{prefix}.b1": ((hidden,), "zeros"),
        f"{prefix}.W2": ((hidden, d_out), "uniform-scaled"),
        f"{prefix}.b2": ((d_out,), "zeros"),
    }


def feature_param_spec(schema: FeatureSchema, d: int) -> dict:
    spec: dict = {}
    for f in schema.features:
        if f.kind == "categorical":
            spec.update(_table_spec(f, "emb"))
    for j in range(schema.n_groups):
        spec[f"tok.proj.{j}.W"] = ((schema.group_dim(j), d), "uniform-scaled")
        spec[f"tok.proj.{j}.b"] = ((d,), "zeros")
    return spec


def imp_dim(schema: FeatureSchema) -> int:
    return sum(f.dim for f in schema.important)


def scenario_token_names(schema: FeatureSchema, global_token: bool = True) -> list[str]:
    names = [str(k) for k in range(schema.n_scenarios)]
    return names + [GLOBAL] if global_token else names


def prompt_param_spec(schema: FeatureSchema, d: int, ratio: int, scenarios: bool = True,
                      global_token: bool = True, tasks: bool = True) -> dict:
    """Extra embedding tables plus one FFN per scenario/task token."""
    spec: dict = {}
    for f in schema.important:
        if f.kind == "categorical":
            spec.update(_table_spec(f, "imp"))
    prior_names: set[str] = set()
    if scenarios:
        prior_names.update(p for _, prior in schema.scenarios for p in prior)
    if tasks:
        prior_names.update(p for _, prior in schema.tasks for p in prior)
    for f in schema.features:
        if f.name in prior_names and f.kind == "categorical":
            spec.update(_table_spec(f, "prior"))
    base = imp_dim(schema)
    hidden = ratio * d
    if scenarios:
        for k, (_, prior) in enumerate(schema.scenarios):
            spec.update(_ffn_spec(f"tok.scn.{k}", base + schema.prior_dim(prior), hidden, d))
        if global_token:
            if base == 0:
                raise SchemaError("global scenario token needs at least one is_important feature")
            spec.update(_ffn_spec(f"tok.scn.{GLOBAL}", base, hidden, d))
    if tasks:
        for n, (_, prior) in enumerate(schema.tasks):
            d_in = base + schema.prior_dim(prior)
            if d_in == 0:
                raise SchemaError(f"task {schema.tasks[n][0]!r} has no input features")
            spec.update(_ffn_spec(f"tok.task.{n}", d_in, hidden, d))
    return spec


def _lookup(tape: Tape, batch, f: Feature, tensors: dict[str, Tensor], prefix: str) -> Tensor:
    value = feature_value(batch, f)
    if f.kind == "categorical":
        bad = (value < 0) | (value >= f.cardinality)
        if np.any(bad):
            raise SchemaError(f"feature {f.name!r}: categorical id {int(value[bad][0])} "
                              f"outside [0, {f.cardinality})")
        return ad.gather(tensors[f"{prefix}.{f.name}"], tape.constant(value, dtype=np.int64))
    if value.shape[-1] != f.dim:
        raise SchemaError(f"feature {f.name!r}: expected dim {f.dim}, got {value.shape[-1]}")
    return tape.constant(value)


def embed_batch(tape: Tape, batch, schema: FeatureSchema, tensors: dict[str, Tensor]) -> list[Tensor]:
    """Per group, the concatenation of its features' embeddings in declaration order."""
    out = []
    for _, members in schema.groups:
        out.append(ad.concat([_lookup(tape, batch, schema[m], tensors, "emb") for m in members]))
    return out


def _stack(tokens: list[Tensor], d: int) -> Tensor:
    b = tokens[0].shape[0]
    return ad.reshape(ad.concat(tokens), (b, len(tokens), d))


def tokenize_features(group_embeddings: list[Tensor], tensors: dict[str, Tensor], d: int) -> Tensor:
    """t_j = e_j W_j + b_j for every group; returns (B, N_f, d)."""
    tokens = []
    for j, e in enumerate(group_embeddings):
        w = tensors[f"tok.proj.{j}.W"]
        if w.shape[0] != e.shape[-1] or w.shape[1] != d:
            raise ad.ShapeError(f"tok.proj.{j}: weight {w.shape} does not map dim {e.shape[-1]} to {d}")
        tokens.append(ad.add(ad.matmul(e, w), tensors[f"tok.proj.{j}.b"]))
    return _stack(tokens, d)


def ffn(x: Tensor, tensors: dict[str, Tensor], prefix: str) -> Tensor:
    h = ad.relu(ad.add(ad.matmul(x, tensors[f"{prefix}.W1"]), tensors[f"{prefix}.b1"]))
    return ad.add(ad.matmul(h, tensors[f"{prefix}.W2"]), tensors[f"{prefix}.b2"])


def important_embeddings(tape: Tape, batch, schema: FeatureSchema, tensors) -> list[Tensor]:
    return [_lookup(tape, batch, f, tensors, "imp" if f.kind == "categorical" else "emb")
            for f in schema.important]


def _prior_embeddings(tape, batch, schema, tensors, names) -> list[Tensor]:
    return [_lookup(tape, batch, schema[n], tensors, "prior") for n in names]


def tokenize_scenarios(tape: Tape, batch, schema: FeatureSchema, tensors: dict[str, Tensor], d: int,
                       global_token: bool = True, imp: list[Tensor] | None = None) -> Tensor:
    """(B, N_s [+1], d); the global token, when present, is the last row."""
    if imp is None:
        imp = important_embeddings(tape, batch, schema, tensors)
    tokens = []
    for k, (name, prior) in enumerate(schema.scenarios):
        if not prior:
            raise SchemaError(f"scenario {name!r} has no prior features")
        x = ad.concat(imp + _prior_embeddings(tape, batch, schema, tensors, prior))
        tokens.append(ad.relu(ffn(x, tensors, f"tok.scn.{k}")))
    if global_token:
        tokens.append(ad.relu(ffn(ad.concat(imp), tensors, f"tok.scn.{GLOBAL}")))
    return _stack(tokens, d)


def tokenize_tasks(tape: Tape, batch, schema: FeatureSchema, tensors: dict[str, Tensor], d: int,
                   imp: list[Tensor] | None = None) -> Tensor:
    if imp is None:
        imp = important_embeddings(tape, batch, schema, tensors)
    tokens = []
    for n, (_, prior) in enumerate(schema.tasks):
        x = ad.concat(imp + _prior_embeddings(tape, batch, schema, tensors, prior))
        tokens.append(ad.relu(ffn(x, tensors, f"tok.task.{n}")))
    return _stack(tokens, d)
