import numpy as np
import pytest

from katrec import autodiff as ad
from katrec.config import toy_config
from katrec.data import KnowledgeGraph, build_collaborative_graph, build_kg, build_log
from katrec.toy import load_toy


def central_diff(f, arr, h=1e-5):
    """Central finite-difference gradient of scalar ``f()`` w.r.t. every entry of ``arr`` (in place)."""
    grad = np.zeros_like(arr)
    it = np.nditer(arr, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = arr[i]
        arr[i] = old + h
        up = f()
        arr[i] = old - h
        down = f()
        arr[i] = old
        grad[i] = (up - down) / (2 * h)
    return grad


def rel_error(a, b, floor=1e-10):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), floor))


def check_grads(loss_fn, params: dict, h=1e-5):
    """Worst relative error between backprop and finite differences over ``params``."""
    for p in params.values():
        p.grad = None
    loss = loss_fn()
    ad.backward(loss)
    analytic = {k: (np.zeros_like(p.data) if p.grad is None else p.grad.copy()) for k, p in params.items()}

    def value():
        with ad.no_grad():
            return loss_fn().item()

    worst = {}
    for k, p in params.items():
        worst[k] = rel_error(analytic[k], central_diff(value, p.data, h))
    return worst


def random_raw_log(rng, n_users, n_items, lo, hi, prefix="i"):
    """``user -> list of raw item ids`` with per-user distinct items."""
    out = {}
    for u in range(n_users):
        n = int(rng.integers(lo, hi + 1))
        items = rng.choice(n_items, size=min(n, n_items), replace=False)
        out[f"u{u}"] = [f"{prefix}{i}" for i in items]
    return out


def random_graph(rng, n_entities, n_items, n_rel, n_triplets, n_users=0, user_items=3):
    """Small item KG (plus optional user nodes) built straight from edge arrays."""
    seen = set()
    while len(seen) < n_triplets:
        h = int(rng.integers(n_entities))
        t = int(rng.integers(n_entities))
        if h != t:
            seen.add((h, int(rng.integers(n_rel)), t))
    trip = np.array(sorted(seen), dtype=np.int64)
    heads = [trip[:, 0], trip[:, 2]]
    rels = [trip[:, 1], trip[:, 1] + n_rel]
    tails = [trip[:, 2], trip[:, 0]]
    if n_users:
        for u in range(n_users):
            items = rng.choice(n_items, size=user_items, replace=False)
            node = n_entities + u
            heads += [np.full(user_items, node), items]
            rels += [np.full(user_items, 2 * n_rel), np.full(user_items, 2 * n_rel + 1)]
            tails += [items, np.full(user_items, node)]
    return KnowledgeGraph(
        num_entities=n_entities,
        num_items=n_items,
        num_kg_relations=n_rel,
        heads=np.concatenate(heads),
        rels=np.concatenate(rels),
        tails=np.concatenate(tails),
        num_users=n_users,
        num_kg_triplets=len(trip),
    )


def dataset_from_raw(raw, triplets=(), min_interactions=10, min_entity=1, min_relation=1):
    from katrec.data import Dataset

    log = build_log(raw, min_interactions)
    kg = build_kg(list(triplets), log, min_entity, min_relation)
    return Dataset(log, build_collaborative_graph(log, kg))


@pytest.fixture(scope="session")
def toy():
    return load_toy(toy_config())


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# criterion lines from the acceptance suite, echoed in the terminal summary
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
