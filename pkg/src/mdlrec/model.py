"""MDL blocks, full model assembly and the SharedBottom / MMoE baselines.

Token tensors are batched: feature tokens (B, N_f, d), scenario tokens
(B, N_s [+1], d), task tokens (B, N_t, d). Per-token weights carry the token
axis first, e.g. a per-token FFN first layer is (T, d, r*d).
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .params import ParamStore, init_params, load_archive, save_archive
from .schema import FeatureSchema
from .tokenization import (
    embed_batch,
    feature_param_spec,
    important_embeddings,
    prompt_param_spec,
    tokenize_features,
    tokenize_scenarios,
    tokenize_tasks,
)

ARCHS = ("mdl", "shared_bottom", "mmoe")
ABLATIONS = (
    "no_task_token",
    "no_task_feature_attn",
    "no_scenario_token",
    "no_global_scenario_token",
    "no_scenario_feature_attn",
)


class ConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    arch: str = "mdl"
    d: int = 32
    layers: int = 2
    heads: int = 2
    ffn_ratio: int = 2
    ablations: list[str] = field(default_factory=list)
    tower_hidden: int = 64
    experts: int = 4
    expert_hidden: int = 64

    def validate(self, schema: FeatureSchema | None = None) -> None:
        if self.arch not in ARCHS:
            raise ConfigError(f"unknown architecture {self.arch!r}; choose from {ARCHS}")
        if min(self.d, self.layers, self.heads, self.ffn_ratio, self.tower_hidden,
               self.experts, self.expert_hidden) < 1:
            raise ConfigError("dimensions, layers and heads must be positive")
        for a in self.ablations:
            if a not in ABLATIONS:
                raise ConfigError(f"unknown ablation {a!r}; choose from {ABLATIONS}")
        if self.ablations and self.arch != "mdl":
            raise ConfigError(f"ablations {self.ablations} only apply to arch 'mdl', not {self.arch!r}")
        if self.arch == "mdl" and self.d % self.heads:
            raise ConfigError(f"d={self.d} is not divisible by heads={self.heads}")
        if schema is not None and self.d % schema.n_groups:
            raise ConfigError(f"token mixing needs d={self.d} divisible by N_f={schema.n_groups}")

    def has(self, flag: str) -> bool:
        return flag in self.ablations

    @property
    def scenario_tokens(self) -> bool:
        return self.arch == "mdl" and not self.has("no_scenario_token")

    @property
    def global_token(self) -> bool:
        return self.scenario_tokens and not self.has("no_global_scenario_token")

    @property
    def task_tokens(self) -> bool:
        return self.arch == "mdl" and not self.has("no_task_token")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, raw: dict) -> "ModelConfig":
        unknown = set(raw) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown ModelConfig keys: {sorted(unknown)}")
        return cls(**raw)


# --- interaction mechanisms -------------------------------------------------

def token_mixing(tokens: Tensor) -> Tensor:
    """Parameter-free head shuffle: output token h gathers segment h of every input token."""
    b, n, d = tokens.shape
    if d % n:
        raise ConfigError(f"token mixing needs d={d} divisible by the token count {n}")
    x = ad.reshape(tokens, (b, n, n, d // n))
    return ad.reshape(ad.transpose(x, (0, 2, 1, 3)), (b, n, d))


def pertoken_ffn(x: Tensor, t: dict[str, Tensor], prefix: str) -> Tensor:
    h = ad.relu(ad.pertoken_linear(x, t[f"{prefix}.W1"], t[f"{prefix}.b1"]))
    return ad.pertoken_linear(h, t[f"{prefix}.W2"], t[f"{prefix}.b2"])


def feature_self_interaction(tokens: Tensor, t: dict[str, Tensor], prefix: str) -> Tensor:
    u = ad.layernorm(ad.add(token_mixing(tokens), tokens))
    u = ad.add(ad.mul(u, t[f"{prefix}.ln.g"]), t[f"{prefix}.ln.b"])
    return ad.add(pertoken_ffn(u, t, f"{prefix}.ffn"), u)


def domain_aware_attention(queries: Tensor, features: Tensor, t: dict[str, Tensor], prefix: str,
                           heads: int) -> tuple[Tensor, np.ndarray]:
    """Cross-attention with per-query-token Q and per-feature-token K/V maps.

    Returns the output (queries' shape) and the weights as (B, H, T_q, N_f).
    """
    b, tq, d = queries.shape
    _, nf, df = features.shape
    if df != d:
        raise ad.ShapeError(f"attention: query width {d} != feature width {df}")
    dh = d // heads
    q = ad.pertoken_linear(queries, t[f"{prefix}.q.W"], t[f"{prefix}.q.b"])
    k = ad.pertoken_linear(features, t[f"{prefix}.k.W"], t[f"{prefix}.k.b"])
    v = ad.pertoken_linear(features, t[f"{prefix}.v.W"], t[f"{prefix}.v.b"])
    q = ad.transpose(ad.reshape(q, (b, tq, heads, dh)), (0, 2, 1, 3))
    k = ad.transpose(ad.reshape(k, (b, nf, heads, dh)), (0, 2, 3, 1))
    v = ad.transpose(ad.reshape(v, (b, nf, heads, dh)), (0, 2, 1, 3))
    weights = ad.softmax(ad.scale(ad.matmul(q, k), 1.0 / np.sqrt(dh)))
    mixed = ad.matmul(weights, v)
    mixed = ad.reshape(ad.transpose(mixed, (0, 2, 1, 3)), (b, tq, d))
    out = ad.add(ad.matmul(mixed, t[f"{prefix}.o.W"]), t[f"{prefix}.o.b"])
    return out, weights.value


def scenario_mask(tape: Tape, member: np.ndarray, global_token: bool) -> Tensor:
    member = np.asarray(member, dtype=np.float64)
    if global_token:
        member = np.concatenate([member, np.ones((member.shape[0], 1))], axis=1)
    if np.any(member.sum(axis=1) == 0):
        raise ValueError("an instance selects no scenario tokens (empty membership with the global token disabled)")
    return tape.constant(member)


def domain_fused(task_hat: Tensor, scenario_hat: Tensor, mask: Tensor) -> Tensor:
    """Add the mean of each instance's selected scenario tokens to every task token."""
    avg = ad.select_mean(scenario_hat, mask)
    b, d = avg.shape
    return ad.add(task_hat, ad.reshape(avg, (b, 1, d)))


@dataclass
class TokenState:
    features: Tensor
    scenarios: Tensor | None
    tasks: Tensor | None
    layer: int = 0


def mdl_block_forward(state: TokenState, t: dict[str, Tensor], mask: Tensor | None, config: ModelConfig,
                      record: dict | None = None) -> tuple[TokenState, Tensor | None]:
    """One MDL layer. Also returns the post-attention scenario tokens consumed by fusion."""
    p = f"blk.{state.layer}"
    feats = feature_self_interaction(state.features, t, f"{p}.f")
    s_hat = None
    s_next = None
    if state.scenarios is not None:
        if config.has("no_scenario_feature_attn"):
            s_hat = state.scenarios
        else:
            attn, w = domain_aware_attention(state.scenarios, feats, t, f"{p}.sa", config.heads)
            s_hat = ad.add(attn, state.scenarios)
            if record is not None:
                record.setdefault("scenario", []).append(w)
        s_next = ad.add(pertoken_ffn(s_hat, t, f"{p}.sffn"), s_hat)
    t_next = None
    if state.tasks is not None:
        if config.has("no_task_feature_attn"):
            t_hat = state.tasks
        else:
            attn, w = domain_aware_attention(state.tasks, feats, t, f"{p}.ta", config.heads)
            t_hat = ad.add(attn, state.tasks)
            if record is not None:
                record.setdefault("task", []).append(w)
        t_tilde = domain_fused(t_hat, s_hat, mask) if s_hat is not None else t_hat
        t_next = ad.add(pertoken_ffn(t_tilde, t, f"{p}.tffn"), t_tilde)
    return TokenState(feats, s_next, t_next, state.layer + 1), s_hat


# --- parameter layout --------------------------------------------------------

def _pertoken_ffn_spec(prefix: str, n: int, d: int, hidden: int) -> dict:
    return {
        f"{prefix}.W1": ((n, d, hidden), "uniform-scaled"),
        f"{prefix}.b1": ((n, hidden), "zeros"),
        f"{prefix}.W2": ((n, hidden, d), "uniform-scaled"),
        f"{prefix}.b2": ((n, d), "zeros"),
    }


def _attention_spec(prefix: str, n_query: int, n_feat: int, d: int) -> dict:
    return {
        f"{prefix}.q.W": ((n_query, d, d), "uniform-scaled"),
        f"{prefix}.q.b": ((n_query, d), "zeros"),
        f"{prefix}.k.W": ((n_feat, d, d), "uniform-scaled"),
        f"{prefix}.k.b": ((n_feat, d), "zeros"),
        f"{prefix}.v.W": ((n_feat, d, d), "uniform-scaled"),
        f"{prefix}.v.b": ((n_feat, d), "zeros"),
        f"{prefix}.o.W": ((d, d), "uniform-scaled"),
        f"{prefix}.o.b": ((d,), "zeros"),
    }


def _feature_stack_spec(schema: FeatureSchema, config: ModelConfig) -> dict:
    d, nf, hidden = config.d, schema.n_groups, config.ffn_ratio * config.d
    spec = feature_param_spec(schema, d)
    for layer in range(config.layers):
        p = f"blk.{layer}.f"
        spec[f"{p}.ln.g"] = ((nf, d), "ones")
        spec[f"{p}.ln.b"] = ((nf, d), "zeros")
        spec.update(_pertoken_ffn_spec(f"{p}.ffn", nf, d, hidden))
    return spec


def _tower_spec(d_in: int, n_tasks: int, hidden: int) -> dict:
    return {
        "tower.W1": ((d_in, n_tasks * hidden), "uniform-scaled"),
        "tower.b1": ((n_tasks * hidden,), "zeros"),
        "tower.W2": ((n_tasks, hidden, 1), "uniform-scaled"),
        "tower.b2": ((n_tasks, 1), "zeros"),
    }


def param_spec(config: ModelConfig, schema: FeatureSchema) -> dict:
    config.validate(schema)
    d, nf, ns, nt = config.d, schema.n_groups, schema.n_scenarios, schema.n_tasks
    hidden = config.ffn_ratio * d
    spec = _feature_stack_spec(schema, config)
    if config.arch == "mdl":
        spec.update(prompt_param_spec(schema, d, config.ffn_ratio, scenarios=config.scenario_tokens,
                                      global_token=config.global_token, tasks=config.task_tokens))
        n_scn = ns + (1 if config.global_token else 0)
        for layer in range(config.layers):
            p = f"blk.{layer}"
            if config.scenario_tokens:
                if not config.has("no_scenario_feature_attn"):
                    spec.update(_attention_spec(f"{p}.sa", n_scn, nf, d))
                spec.update(_pertoken_ffn_spec(f"{p}.sffn", n_scn, d, hidden))
            if config.task_tokens:
                if not config.has("no_task_feature_attn"):
                    spec.update(_attention_spec(f"{p}.ta", nt, nf, d))
                spec.update(_pertoken_ffn_spec(f"{p}.tffn", nt, d, hidden))
        if config.task_tokens:
            spec["head.W"] = ((nt, d, 1), "uniform-scaled")
            spec["head.b"] = ((nt, 1), "zeros")
        else:
            spec.update(_tower_spec(d, nt, config.tower_hidden))
    elif config.arch == "shared_bottom":
        spec.update(_tower_spec(d, nt, config.tower_hidden))
    else:
        e, h = config.experts, config.expert_hidden
        spec.update({
            "expert.W1": ((d, e * h), "uniform-scaled"),
            "expert.b1": ((e * h,), "zeros"),
            "expert.W2": ((e, h, h), "uniform-scaled"),
            "expert.b2": ((e, h), "zeros"),
            "gate.W": ((d, nt * e), "uniform-scaled"),
            "gate.b": ((nt * e,), "zeros"),
        })
        spec.update({
            "tower.W1": ((nt, h, config.tower_hidden), "uniform-scaled"),
            "tower.b1": ((nt, config.tower_hidden), "zeros"),
            "tower.W2": ((nt, config.tower_hidden, 1), "uniform-scaled"),
            "tower.b2": ((nt, 1), "zeros"),
        })
    return spec


# --- model --------------------------------------------------------------------

@dataclass
class Forward:
    probs: Tensor                     # (B, N_t)
    attention: dict[str, list[np.ndarray]]
    gates: np.ndarray | None = None   # (B, N_t, E) for mmoe


class Model:
    def __init__(self, config: ModelConfig, schema: FeatureSchema, store: ParamStore):
        config.validate(schema)
        self.config = config
        self.schema = schema
        self.store = store

    @property
    def n_params(self) -> int:
        return self.store.count()

    @property
    def n_heads_out(self) -> int:
        return self.schema.n_tasks

    def forward(self, batch, tape: Tape | None = None, tensors: dict[str, Tensor] | None = None) -> Forward:
        tape = tape if tape is not None else Tape()
        if tensors is None:
            tensors = self.store.on_tape(tape)
        return model_forward(tape, tensors, batch, self.config, self.schema)

    def predict(self, batch, chunk: int = 4096) -> np.ndarray:
        out = []
        for start in range(0, len(batch), chunk):
            part = batch.take(slice(start, start + chunk))
            tape = Tape()
            tensors = {k: tape.constant(v) for k, v in self.store.params.items()}
            out.append(model_forward(tape, tensors, part, self.config, self.schema).probs.value)
        return np.concatenate(out, axis=0)

    def save(self, path: str | Path) -> None:
        path = Path(path)
        save_archive(self.store, path)
        sidecar = {"config": self.config.to_dict(), "schema_hash": self.schema.hash(),
                   "schema": self.schema.to_dict(), "n_params": self.n_params}
        Path(f"{path}.json").write_text(json.dumps(sidecar, indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path: str | Path, schema: FeatureSchema | None = None) -> "Model":
        sidecar = json.loads(Path(f"{path}.json").read_text())
        stored = FeatureSchema.from_dict(sidecar["schema"])
        if stored.hash() != sidecar["schema_hash"]:
            raise ValueError(f"{path}: sidecar schema does not match its recorded hash")
        if schema is not None and schema.hash() != sidecar["schema_hash"]:
            raise ValueError(f"{path}: schema hash mismatch (archive {sidecar['schema_hash'][:12]}, "
                             f"given {schema.hash()[:12]})")
        config = ModelConfig.from_dict(sidecar["config"])
        rules = {k: v[2] if len(v) > 2 else "rmsprop" for k, v in param_spec(config, stored).items()}
        store = load_archive(path, rules)
        if set(store.params) != set(rules):
            raise ValueError(f"{path}: parameter names do not match the recorded config")
        return cls(config, stored, store)


def build_model(config: ModelConfig, schema: FeatureSchema, seed: int) -> Model:
    return Model(config, schema, init_params(param_spec(config, schema), seed))


def _pool_tokens(tape: Tape, tokens: Tensor) -> Tensor:
    b, n, _ = tokens.shape
    return ad.select_mean(tokens, tape.constant(np.ones((b, n))))


def _towers(x: Tensor, t: dict[str, Tensor], n_tasks: int, hidden: int) -> Tensor:
    b = x.shape[0]
    h = ad.relu(ad.add(ad.matmul(x, t["tower.W1"]), t["tower.b1"]))
    h = ad.reshape(h, (b, n_tasks, hidden))
    return ad.reshape(ad.pertoken_linear(h, t["tower.W2"], t["tower.b2"]), (b, n_tasks))


def model_forward(tape: Tape, t: dict[str, Tensor], batch, config: ModelConfig, schema: FeatureSchema) -> Forward:
    d, nt = config.d, schema.n_tasks
    feats = tokenize_features(embed_batch(tape, batch, schema, t), t, d)
    attention: dict[str, list[np.ndarray]] = {}
    if config.arch != "mdl":
        for layer in range(config.layers):
            feats = feature_self_interaction(feats, t, f"blk.{layer}.f")
        pooled = _pool_tokens(tape, feats)
        if config.arch == "shared_bottom":
            logits = _towers(pooled, t, nt, config.tower_hidden)
            return Forward(ad.sigmoid(logits), attention)
        b, e, h = pooled.shape[0], config.experts, config.expert_hidden
        experts = ad.relu(ad.add(ad.matmul(pooled, t["expert.W1"]), t["expert.b1"]))
        experts = ad.relu(ad.pertoken_linear(ad.reshape(experts, (b, e, h)), t["expert.W2"], t["expert.b2"]))
        gates = ad.softmax(ad.reshape(ad.add(ad.matmul(pooled, t["gate.W"]), t["gate.b"]), (b, nt, e)))
        mixed = ad.matmul(gates, experts)
        hidden = ad.relu(ad.pertoken_linear(mixed, t["tower.W1"], t["tower.b1"]))
        logits = ad.reshape(ad.pertoken_linear(hidden, t["tower.W2"], t["tower.b2"]), (b, nt))
        return Forward(ad.sigmoid(logits), attention, gates.value)

    imp = important_embeddings(tape, batch, schema, t) if (config.scenario_tokens or config.task_tokens) else []
    scn = tokenize_scenarios(tape, batch, schema, t, d, config.global_token, imp) if config.scenario_tokens else None
    tasks = tokenize_tasks(tape, batch, schema, t, d, imp) if config.task_tokens else None
    mask = scenario_mask(tape, batch.member, config.global_token) if config.scenario_tokens else None
    state = TokenState(feats, scn, tasks, 0)
    s_hat = None
    for _ in range(config.layers):
        state, s_hat = mdl_block_forward(state, t, mask, config, attention)
    if config.task_tokens:
        b = state.tasks.shape[0]
        logits = ad.reshape(ad.pertoken_linear(state.tasks, t["head.W"], t["head.b"]), (b, nt))
    else:
        pooled = _pool_tokens(tape, state.features)
        if s_hat is not None:
            pooled = ad.add(pooled, ad.select_mean(s_hat, mask))
        logits = _towers(pooled, t, nt, config.tower_hidden)
    return Forward(ad.sigmoid(logits), attention)


# --- size accounting ---------------------------------------------------------

def count_params(config: ModelConfig, schema: FeatureSchema) -> int:
    return int(sum(int(np.prod(v[0])) for v in param_spec(config, schema).values()))


def flops_estimate(config: ModelConfig, schema: FeatureSchema) -> int:
    """Multiply-adds of every matrix product in one instance's forward pass."""
    d, nf, ns, nt = config.d, schema.n_groups, schema.n_scenarios, schema.n_tasks
    hid = config.ffn_ratio * d
    ffn_tok = 2 * d * hid
    total = sum(schema.group_dim(j) * d for j in range(nf))
    total += config.layers * nf * ffn_tok
    if config.arch == "shared_bottom":
        return total + d * nt * config.tower_hidden + nt * config.tower_hidden
    if config.arch == "mmoe":
        e, h, th = config.experts, config.expert_hidden, config.tower_hidden
        return total + d * e * h + e * h * h + d * nt * e + nt * e * h + nt * (h * th + th)

    def attention(n_query: int) -> int:
        # Q, K, V, scores, weighted values, output projection
        return n_query * d * d + 2 * nf * d * d + 2 * n_query * nf * d + n_query * d * d

    base = sum(f.dim for f in schema.important)
    if config.scenario_tokens:
        for _, prior in schema.scenarios:
            total += (base + schema.prior_dim(prior)) * hid + hid * d
        n_scn = ns
        if config.global_token:
            total += base * hid + hid * d
            n_scn += 1
        per_layer = n_scn * ffn_tok
        if not config.has("no_scenario_feature_attn"):
            per_layer += attention(n_scn)
        total += config.layers * per_layer
    if config.task_tokens:
        for _, prior in schema.tasks:
            total += (base + schema.prior_dim(prior)) * hid + hid * d
        per_layer = nt * ffn_tok
        if not config.has("no_task_feature_attn"):
            per_layer += attention(nt)
        total += config.layers * per_layer + nt * d
    else:
        total += d * nt * config.tower_hidden + nt * config.tower_hidden
    return total


def match_params(config: ModelConfig, schema: FeatureSchema, target: int) -> ModelConfig:
    """Pick the baseline's hidden width so its parameter count lands closest to ``target``."""
    best, best_gap = config, None
    for width in range(1, 4097):
        if config.arch == "mmoe":
            cand = ModelConfig(**{**config.to_dict(), "expert_hidden": width, "tower_hidden": width})
        else:
            cand = ModelConfig(**{**config.to_dict(), "tower_hidden": width})
        n = count_params(cand, schema)
        gap = abs(n - target)
        if best_gap is None or gap < best_gap:
            best, best_gap = cand, gap
        if n > target:
            break
    return best
