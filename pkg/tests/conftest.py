import numpy as np
import pytest

from mdlrec.data import Batch, GenConfig, generate_batch
from mdlrec.schema import default_schema


def small_gen(**overrides) -> GenConfig:
    base = dict(users=30, queries=12, items=60, instances=200, latent_dim=4, seed=3)
    base.update(overrides)
    return GenConfig(**base)


def random_batch(n, K=3, N=3, latent=4, users=30, queries=12, items=60, seed=0, member=None) -> Batch:
    rng = np.random.default_rng(seed)
    if member is None:
        member = np.zeros((n, K))
        for i in range(n):
            member[i, rng.choice(K, size=int(rng.integers(1, K + 1)), replace=False)] = 1.0
    return Batch(
        rng.integers(users, size=n), rng.integers(queries, size=n), rng.integers(items, size=n),
        rng.normal(size=(n, latent)), rng.normal(size=(n, K, latent)),
        np.asarray(member, dtype=np.float64), (rng.random((n, N)) < 0.4).astype(np.float64),
    )


@pytest.fixture(scope="session")
def tiny_data():
    gen = small_gen()
    batch, _ = generate_batch(gen)
    return gen, default_schema(gen, emb_dim=4), batch
