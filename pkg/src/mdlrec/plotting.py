"""Report figures written next to the CSV outputs."""

from __future__ import annotations

from collections import defaultdict
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .training import attention_matrix  # noqa: E402

_META = {"Software": None}


def _save(fig, path: str | Path) -> None:
    fig.tight_layout()
    fig.savefig(path, dpi=110, metadata=_META)
    plt.close(fig)


def plot_loss(history: list[dict], path: str | Path) -> None:
    fig, ax = plt.subplots(1, 2, figsize=(9, 3.4))
    steps = [r["step"] for r in history]
    ax[0].plot(steps, [r["loss"] for r in history], marker="o")
    ax[0].set_xlabel("step")
    ax[0].set_ylabel("training loss")
    keys = [k for k in history[0] if k.startswith("qauc_")] if history else []
    for k in keys:
        ax[1].plot(steps, [np.nan if r.get(k) is None else r[k] for r in history], label=k[5:], lw=1)
    ax[1].set_xlabel("step")
    ax[1].set_ylabel("eval QAUC")
    if keys:
        ax[1].legend(fontsize=6, ncol=2)
    _save(fig, path)


def plot_attention(rows: list[dict], path: str | Path, feature_names: list[str] | None = None,
                   token_names: dict[str, list[str]] | None = None) -> None:
    roles = [r for r in ("task", "scenario") if any(x["token_role"] == r for x in rows)]
    layers = sorted({x["layer"] for x in rows})
    fig, axes = plt.subplots(len(roles), len(layers), figsize=(3.6 * len(layers), 2.8 * len(roles)),
                             squeeze=False)
    for i, role in enumerate(roles):
        for j, layer in enumerate(layers):
            m = attention_matrix(rows, role, layer)
            ax = axes[i][j]
            im = ax.imshow(m, vmin=0.0, vmax=max(0.5, float(m.max())), cmap="viridis", aspect="auto")
            ax.set_title(f"{role} tokens, layer {layer}", fontsize=9)
            ax.set_xticks(range(m.shape[1]))
            ax.set_xticklabels(feature_names or range(m.shape[1]), fontsize=7)
            ax.set_yticks(range(m.shape[0]))
            names = (token_names or {}).get(role)
            ax.set_yticklabels(names or range(m.shape[0]), fontsize=7)
            for (a, b), w in np.ndenumerate(m):
                ax.text(b, a, f"{w:.2f}", ha="center", va="center", fontsize=6, color="w")
            fig.colorbar(im, ax=ax, fraction=0.046)
    _save(fig, path)


def plot_sweep(rows: list[dict], path: str | Path) -> None:
    by_cfg: dict[tuple, list[dict]] = defaultdict(list)
    for r in rows:
        by_cfg[(r["d"], r["layers"])].append(r)
    cfgs = sorted(by_cfg, key=lambda c: by_cfg[c][0]["params"])
    fig, axes = plt.subplots(1, 2, figsize=(9, 3.4))
    for ax, key, label in ((axes[0], "params", "parameters"), (axes[1], "flops", "multiply-adds / instance")):
        xs = [by_cfg[c][0][key] for c in cfgs]
        means = [np.mean([r["mean_qauc"] for r in by_cfg[c]]) for c in cfgs]
        for c in cfgs:
            ax.scatter([by_cfg[c][0][key]] * len(by_cfg[c]), [r["mean_qauc"] for r in by_cfg[c]],
                       s=12, color="0.6")
        ax.plot(xs, means, marker="o")
        for x, m, c in zip(xs, means, cfgs):
            ax.annotate(f"d={c[0]}, L={c[1]}", (x, m), fontsize=7, textcoords="offset points", xytext=(4, 4))
        ax.set_xscale("log")
        ax.set_xlabel(label)
        ax.set_ylabel("mean QAUC")
    _save(fig, path)
