"""Interaction logs, the collaborative knowledge graph, splits and samplers.

Id layout
---------
Items are entities ``0 .. num_items-1``; other KG entities follow.  User
nodes are appended after all entities in the collaborative graph.  For the
sequence model, token 0 is padding, item ``i`` is token ``i + 1`` and the
mask token is ``num_items + 1``.
"""

from __future__ import annotations

import logging
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

logger = logging.getLogger(__name__)

PAD = 0


class DataFormatError(ValueError):
    """Malformed input file or an empty dataset after filtering."""


class SamplingError(RuntimeError):
    """A sampler cannot satisfy its constraints."""


def item_token(item):
    return np.asarray(item) + 1


def mask_token(num_items: int) -> int:
    return num_items + 1


@dataclass(frozen=True)
class InteractionLog:
    """Chronological per-user item sequences after filtering and remapping.

    ``sequences[u]`` is the full ordered history of user ``u``.  The last
    item is the test target, the second to last the validation target and
    everything before it is training data.
    """

    sequences: tuple
    user_ids: tuple
    item_ids: tuple
    raw_item_ids: frozenset = frozenset()

    @property
    def num_users(self) -> int:
        return len(self.sequences)

    @property
    def num_items(self) -> int:
        return len(self.item_ids)

    @property
    def num_interactions(self) -> int:
        return int(np.sum([len(s) for s in self.sequences]))

    @property
    def density(self) -> float:
        return self.num_interactions / (self.num_users * self.num_items)

    @property
    def item_index(self) -> dict:
        return {raw: i for i, raw in enumerate(self.item_ids)}

    def train(self, u: int) -> np.ndarray:
        return self.sequences[u][:-2]

    def val(self, u: int) -> int:
        return int(self.sequences[u][-2])

    def test(self, u: int) -> int:
        return int(self.sequences[u][-1])

    def history(self, u: int, split: str) -> np.ndarray:
        """Items visible when predicting ``split`` for user ``u``."""
        if split == "val":
            return self.sequences[u][:-2]
        if split == "test":
            return self.sequences[u][:-1]
        if split == "train":
            return self.sequences[u][:-2]
        raise ValueError(f"unknown split {split!r}")

    def target(self, u: int, split: str) -> int:
        if split == "val":
            return self.val(u)
        if split == "test":
            return self.test(u)
        raise ValueError(f"unknown split {split!r}")

    def train_sequences(self) -> list:
        return [self.train(u) for u in range(self.num_users)]


def parse_interactions(lines) -> dict:
    raw = {}
    for lineno, line in enumerate(lines, start=1):
        line = line.strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) < 2:
            raise DataFormatError(f"line {lineno}: expected 'user item [item ...]', got {line!r}")
        if parts[0] in raw:
            raise DataFormatError(f"line {lineno}: duplicate user {parts[0]!r}")
        raw[parts[0]] = parts[1:]
    return raw


def filter_core(raw: dict, min_interactions: int = 10) -> dict:
    """Drop users and items with fewer than ``min_interactions`` until nothing changes."""
    seqs = {u: list(items) for u, items in raw.items()}
    while True:
        counts = Counter(i for items in seqs.values() for i in items)
        rare = {i for i, c in counts.items() if c < min_interactions}
        if rare:
            seqs = {u: [i for i in items if i not in rare] for u, items in seqs.items()}
        short = [u for u, items in seqs.items() if len(items) < min_interactions]
        for u in short:
            del seqs[u]
        if not rare and not short:
            return seqs


def build_log(raw: dict, min_interactions: int = 10) -> InteractionLog:
    kept = filter_core(raw, min_interactions)
    if not kept:
        raise DataFormatError("no users left after filtering")
    item_ids, index = [], {}
    for items in kept.values():
        for i in items:
            if i not in index:
                index[i] = len(item_ids)
                item_ids.append(i)
    sequences = tuple(np.array([index[i] for i in items], dtype=np.int64) for items in kept.values())
    all_items = frozenset(i for items in raw.values() for i in items)
    return InteractionLog(sequences, tuple(kept), tuple(item_ids), all_items)


def load_interactions(path, min_interactions: int = 10) -> InteractionLog:
    """Read ``user item item ...`` lines (items in chronological order)."""
    with open(path, encoding="utf-8") as fh:
        raw = parse_interactions(fh)
    return build_log(raw, min_interactions)


@dataclass
class KnowledgeGraph:
    """Directed multi-relational graph stored as parallel edge arrays sorted by head.

    ``num_nodes`` covers entities and, once users are attached, user nodes.
    Relations ``0 .. num_kg_relations-1`` are the KG relations, the next
    ``num_kg_relations`` are their inverses; the collaborative graph adds the
    interaction relation and its inverse at the end.
    """

    num_entities: int
    num_items: int
    num_kg_relations: int
    heads: np.ndarray
    rels: np.ndarray
    tails: np.ndarray
    entity_ids: tuple = ()
    relation_ids: tuple = ()
    num_users: int = 0
    num_kg_triplets: int = 0
    num_train_interactions: int = 0
    skipped_triplets: int = 0
    _index: dict = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        order = np.lexsort((self.tails, self.rels, self.heads))
        self.heads = np.asarray(self.heads, dtype=np.int64)[order]
        self.rels = np.asarray(self.rels, dtype=np.int64)[order]
        self.tails = np.asarray(self.tails, dtype=np.int64)[order]
        n = self.num_nodes
        if len(self.heads) and (
            self.heads.min() < 0 or self.heads.max() >= n or self.tails.min() < 0 or self.tails.max() >= n
        ):
            raise DataFormatError("edge endpoint out of node range")
        if len(self.rels) and (self.rels.min() < 0 or self.rels.max() >= self.num_relations):
            raise DataFormatError("relation id out of range")

    @property
    def collaborative(self) -> bool:
        return self.num_users > 0

    @property
    def num_nodes(self) -> int:
        return self.num_entities + self.num_users

    @property
    def num_relations(self) -> int:
        return 2 * self.num_kg_relations + (2 if self.collaborative else 0)

    @property
    def interact_relation(self) -> int:
        return 2 * self.num_kg_relations

    @property
    def num_edges(self) -> int:
        return len(self.heads)

    def user_node(self, u):
        return self.num_entities + np.asarray(u)

    @property
    def observed(self) -> dict:
        """(head, relation) -> set of observed tails."""
        if self._index is None:
            idx = defaultdict(set)
            for h, r, t in zip(self.heads.tolist(), self.rels.tolist(), self.tails.tolist()):
                idx[(h, r)].add(t)
            self._index = dict(idx)
        return self._index

    def has_edge(self, h, r, t) -> bool:
        return t in self.observed.get((h, r), ())

    def neighbors(self, h: int) -> list:
        lo, hi = np.searchsorted(self.heads, [h, h + 1])
        return list(zip(self.rels[lo:hi].tolist(), self.tails[lo:hi].tolist()))

    def degree(self) -> np.ndarray:
        return np.bincount(self.heads, minlength=self.num_nodes)

    def tail_domain(self, r: int) -> tuple:
        """Half-open node range a corrupted tail is drawn from for relation ``r``."""
        if not self.collaborative or r < self.interact_relation:
            return 0, self.num_entities
        if r == self.interact_relation:
            return 0, self.num_items
        return self.num_entities, self.num_nodes

    def capped_edges(self, max_neighbors, rng) -> np.ndarray:
        """Indices of edges kept when each head keeps at most ``max_neighbors``."""
        if not max_neighbors:
            return np.arange(self.num_edges)
        keep = []
        starts = np.searchsorted(self.heads, np.arange(self.num_nodes + 1))
        for h in range(self.num_nodes):
            lo, hi = starts[h], starts[h + 1]
            if hi - lo <= max_neighbors:
                keep.append(np.arange(lo, hi))
            else:
                keep.append(np.sort(rng.choice(np.arange(lo, hi), max_neighbors, replace=False)))
        return np.concatenate(keep) if keep else np.arange(0)


def load_triplets(
    path,
    log: InteractionLog,
    min_entity_occurrences: int = 10,
    min_relation_occurrences: int = 50,
) -> KnowledgeGraph:
    """Read ``head<TAB>relation<TAB>tail`` lines and build the item KG with inverse edges.

    Raw ids equal to a retained item's raw id denote that item.  Triplets
    touching an item that was filtered out of the log are skipped.  Non-item
    entities seen fewer than ``min_entity_occurrences`` times are dropped,
    then relations seen fewer than ``min_relation_occurrences`` times.
    """
    triplets = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n").rstrip("\r")
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 3 or not all(p.strip() for p in parts):
                raise DataFormatError(f"line {lineno}: expected 'head<TAB>relation<TAB>tail', got {line!r}")
            triplets.append(tuple(p.strip() for p in parts))
    return build_kg(triplets, log, min_entity_occurrences, min_relation_occurrences)


def build_kg(triplets, log, min_entity_occurrences=10, min_relation_occurrences=50) -> KnowledgeGraph:
    items = log.item_index
    dropped_items = log.raw_item_ids - items.keys()
    kept, skipped = [], 0
    for h, r, t in triplets:
        if h in dropped_items or t in dropped_items:
            skipped += 1
            continue
        kept.append((h, r, t))
    if skipped:
        logger.warning("skipped %d triplets referencing items filtered out of the log", skipped)

    ent_counts = Counter(x for h, _, t in kept for x in (h, t) if x not in items)
    kept = [
        (h, r, t)
        for h, r, t in kept
        if (h in items or ent_counts[h] >= min_entity_occurrences)
        and (t in items or ent_counts[t] >= min_entity_occurrences)
    ]
    rel_counts = Counter(r for _, r, _ in kept)
    kept = [(h, r, t) for h, r, t in kept if rel_counts[r] >= min_relation_occurrences]
    kept = list(dict.fromkeys(kept))

    entity_ids = list(log.item_ids)
    ent_index = dict(items)
    relation_ids, rel_index = [], {}
    for h, r, t in kept:
        for x in (h, t):
            if x not in ent_index:
                ent_index[x] = len(entity_ids)
                entity_ids.append(x)
        if r not in rel_index:
            rel_index[r] = len(relation_ids)
            relation_ids.append(r)
    R = len(relation_ids)
    h = np.array([ent_index[x] for x, _, _ in kept], dtype=np.int64)
    r = np.array([rel_index[x] for _, x, _ in kept], dtype=np.int64)
    t = np.array([ent_index[x] for _, _, x in kept], dtype=np.int64)
    return KnowledgeGraph(
        num_entities=len(entity_ids),
        num_items=log.num_items,
        num_kg_relations=R,
        heads=np.concatenate([h, t]),
        rels=np.concatenate([r, r + R]),
        tails=np.concatenate([t, h]),
        entity_ids=tuple(entity_ids),
        relation_ids=tuple(relation_ids),
        num_kg_triplets=len(kept),
        skipped_triplets=skipped,
    )


def empty_kg(log: InteractionLog) -> KnowledgeGraph:
    return build_kg([], log)


def build_collaborative_graph(log: InteractionLog, kg: KnowledgeGraph) -> KnowledgeGraph:
    """Attach user nodes linked to their training items (both directions).

    Validation and test items never become edges.
    """
    if kg.collaborative:
        raise ValueError("graph already contains user nodes")
    if kg.num_items != log.num_items:
        raise ValueError("knowledge graph and interaction log disagree on the item set")
    users, items = [], []
    for u in range(log.num_users):
        train = np.unique(log.train(u))
        users.append(np.full(len(train), u, dtype=np.int64))
        items.append(train)
    users = kg.num_entities + np.concatenate(users)
    items = np.concatenate(items)
    R = kg.num_kg_relations
    return KnowledgeGraph(
        num_entities=kg.num_entities,
        num_items=kg.num_items,
        num_kg_relations=R,
        heads=np.concatenate([kg.heads, users, items]),
        rels=np.concatenate([kg.rels, np.full(len(users), 2 * R), np.full(len(items), 2 * R + 1)]),
        tails=np.concatenate([kg.tails, items, users]),
        entity_ids=kg.entity_ids,
        relation_ids=kg.relation_ids,
        num_users=log.num_users,
        num_kg_triplets=kg.num_kg_triplets,
        num_train_interactions=len(items),
        skipped_triplets=kg.skipped_triplets,
    )


@dataclass
class Dataset:
    """An interaction log together with its collaborative knowledge graph."""

    log: InteractionLog
    graph: KnowledgeGraph

    @property
    def num_items(self) -> int:
        return self.log.num_items

    def stats(self) -> dict:
        return {
            "Users": self.log.num_users,
            "Items": self.log.num_items,
            "Interactions": self.log.num_interactions,
            "Entities": self.graph.num_entities,
            "Relations": self.graph.num_kg_relations,
            "Triplets": self.graph.num_kg_triplets,
            "Density": self.log.density,
        }


def load_dataset(
    interactions_path,
    triplets_path=None,
    min_interactions=10,
    min_entity_occurrences=10,
    min_relation_occurrences=50,
) -> Dataset:
    log = load_interactions(interactions_path, min_interactions)
    if triplets_path is None:
        kg = empty_kg(log)
    else:
        kg = load_triplets(triplets_path, log, min_entity_occurrences, min_relation_occurrences)
    return Dataset(log, build_collaborative_graph(log, kg))


def id_map_rows(dataset: Dataset) -> list:
    """(kind, raw id, dense id) rows for the remap report."""
    rows = [("user", raw, i) for i, raw in enumerate(dataset.log.user_ids)]
    n_items = dataset.log.num_items
    for i, raw in enumerate(dataset.graph.entity_ids):
        rows.append(("item" if i < n_items else "entity", raw, i))
    rows += [("relation", raw, i) for i, raw in enumerate(dataset.graph.relation_ids)]
    return rows


# -- samplers ---------------------------------------------------------------

def sample_negative_triplet(graph: KnowledgeGraph, h: int, r: int, t: int, rng, max_attempts: int = 64) -> int:
    """Uniformly draw a tail ``t'`` from the relation's domain with ``(h, r, t')`` unobserved."""
    lo, hi = graph.tail_domain(r)
    observed = graph.observed.get((h, r), set())
    n_valid = (hi - lo) - sum(1 for x in observed if lo <= x < hi)
    if n_valid <= 0:
        raise SamplingError(f"no unobserved tail exists for head {h} under relation {r}")
    for _ in range(max_attempts):
        cand = int(rng.integers(lo, hi))
        if cand not in observed:
            return cand
    valid = np.setdiff1d(np.arange(lo, hi), np.fromiter(observed, dtype=np.int64))
    return int(valid[rng.integers(len(valid))])


@dataclass
class TripletBatch:
    heads: np.ndarray
    rels: np.ndarray
    tails: np.ndarray
    neg_tails: np.ndarray

    def __len__(self):
        return len(self.heads)


def sample_triplet_batch(graph: KnowledgeGraph, edge_index, rng) -> TripletBatch:
    h, r, t = graph.heads[edge_index], graph.rels[edge_index], graph.tails[edge_index]
    neg = np.array(
        [sample_negative_triplet(graph, a, b, c, rng) for a, b, c in zip(h.tolist(), r.tolist(), t.tolist())],
        dtype=np.int64,
    )
    return TripletBatch(h, r, t, neg)


def sample_eval_negatives(log: InteractionLog, user: int, n: int, rng) -> np.ndarray:
    """``n`` distinct items outside the user's whole history, uniformly without replacement."""
    seen = np.unique(log.sequences[user])
    eligible = np.setdiff1d(np.arange(log.num_items), seen)
    if len(eligible) < n:
        raise SamplingError(
            f"user {user}: only {len(eligible)} items outside the history, cannot draw {n} negatives"
        )
    return rng.choice(eligible, size=n, replace=False)


@dataclass
class MaskedBatch:
    """Left-padded token matrix with Cloze masks.

    ``targets`` holds the true item id (0-based) at masked positions and -1
    elsewhere.
    """

    tokens: np.ndarray
    masked: np.ndarray
    targets: np.ndarray
    padding: np.ndarray
    users: np.ndarray | None = None

    @property
    def num_masked(self) -> int:
        return int(self.masked.sum())


def build_masked_batch(sequences, mask_prob, max_len, num_items, rng, users=None) -> MaskedBatch:
    """Truncate to the last ``max_len`` items, left-pad and mask each real position with prob ``mask_prob``.

    A sequence that draws no mask gets one uniformly chosen position masked.
    """
    if not 0.0 < mask_prob <= 1.0:
        raise ValueError(f"mask probability must be in (0, 1], got {mask_prob}")
    rows, kept_users = [], []
    for k, seq in enumerate(sequences):
        if len(seq) == 0:
            logger.warning("skipping empty sequence at batch row %d", k)
            continue
        rows.append(np.asarray(seq[-max_len:], dtype=np.int64))
        if users is not None:
            kept_users.append(users[k])
    B = len(rows)
    tokens = np.zeros((B, max_len), dtype=np.int64)
    masked = np.zeros((B, max_len), dtype=bool)
    targets = np.full((B, max_len), -1, dtype=np.int64)
    mtok = mask_token(num_items)
    for b, seq in enumerate(rows):
        n = len(seq)
        off = max_len - n
        tokens[b, off:] = seq + 1
        pick = rng.random(n) < mask_prob
        if not pick.any():
            pick[rng.integers(n)] = True
        pos = off + np.flatnonzero(pick)
        masked[b, pos] = True
        targets[b, pos] = tokens[b, pos] - 1
        tokens[b, pos] = mtok
    padding = np.zeros_like(masked)
    for b, seq in enumerate(rows):
        padding[b, : max_len - len(seq)] = True
    return MaskedBatch(tokens, masked, targets, padding, np.asarray(kept_users) if users is not None else None)


def build_inference_input(sequence, max_len: int, num_items: int) -> np.ndarray:
    """Last ``max_len - 1`` items followed by the mask token, left-padded to ``max_len``."""
    seq = np.asarray(sequence, dtype=np.int64)
    if seq.size == 0:
        raise ValueError("cannot build an inference input from an empty sequence")
    keep = seq[-(max_len - 1):] if max_len > 1 else seq[:0]
    out = np.zeros(max_len, dtype=np.int64)
    out[max_len - 1 - len(keep): max_len - 1] = keep + 1
    out[-1] = mask_token(num_items)
    return out


def find_leakage(log: InteractionLog, graph: KnowledgeGraph, batches=()) -> list:
    """Every place a user's val/test item shows up in their graph edges or training batches.

    The user's val/test item only counts as leaked when it is not also part
    of their training history (repeat consumption is legitimate).
    """
    problems = []
    ri = graph.interact_relation
    for u in range(log.num_users):
        held = {log.val(u), log.test(u)} - set(log.train(u).tolist())
        node = int(graph.user_node(u))
        for r, t in graph.neighbors(node):
            if r == ri and t in held:
                problems.append(("graph", u, t))
    inv = ri + 1
    sel = graph.rels == inv
    for i, node in zip(graph.heads[sel].tolist(), graph.tails[sel].tolist()):
        u = node - graph.num_entities
        held = {log.val(u), log.test(u)} - set(log.train(u).tolist())
        if i in held:
            problems.append(("graph", u, i))
    for batch in batches:
        if batch.users is None:
            raise ValueError("batches must carry user ids to be scanned")
        for b, u in enumerate(batch.users.tolist()):
            held = {log.val(u), log.test(u)} - set(log.train(u).tolist())
            row = batch.tokens[b]
            seen = set((row[(row > 0) & (row <= log.num_items)] - 1).tolist())
            seen |= set(batch.targets[b][batch.targets[b] >= 0].tolist())
            for i in held & seen:
                problems.append(("batch", u, i))
    return problems


def write_interactions(path, sequences: dict) -> None:
    path = Path(path)
    with open(path, "w", encoding="utf-8") as fh:
        for u, items in sequences.items():
            fh.write(f"{u} {' '.join(map(str, items))}\n")
