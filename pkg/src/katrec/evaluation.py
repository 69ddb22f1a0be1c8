"""Sampled-negative ranking protocol, metrics and analysis exports."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field

import numpy as np

from .data import InteractionLog, sample_eval_negatives

logger = logging.getLogger(__name__)

KS = (1, 5, 10)
EVAL_STREAM = 2


@dataclass(frozen=True)
class RankResult:
    user: int
    rank: int
    num_candidates: int


def rank_ground_truth(scores, truth_index: int, user: int = -1) -> RankResult:
    """1-based rank of the truth; ties with the truth count against it."""
    scores = np.asarray(scores, dtype=np.float64)
    if np.isnan(scores).any():
        raise ValueError(f"user {user}: NaN in candidate scores")
    t = scores[truth_index]
    others = np.delete(scores, truth_index)
    rank = 1 + int(np.sum(others >= t))
    return RankResult(user, rank, len(scores))


@dataclass
class MetricReport:
    hit: dict
    ndcg: dict
    map: float
    num_users: int
    buckets: dict = field(default_factory=dict)

    def rows(self) -> list:
        out = [(f"Hit@{k}", v) for k, v in self.hit.items()]
        out += [(f"NDCG@{k}", v) for k, v in self.ndcg.items()]
        out += [("MAP", self.map), ("Users", self.num_users)]
        for label, rep in self.buckets.items():
            out += [(f"{label}/{name}", v) for name, v in rep.rows()]
        return out

    def to_dict(self) -> dict:
        return {
            "hit": {str(k): v for k, v in self.hit.items()},
            "ndcg": {str(k): v for k, v in self.ndcg.items()},
            "map": self.map,
            "num_users": self.num_users,
            "buckets": {label: rep.to_dict() for label, rep in self.buckets.items()},
        }

    def to_tsv(self) -> str:
        return "".join(f"{name}\t{value!r}\n" for name, value in self.rows())

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


def compute_metrics(ranks, ks=KS) -> MetricReport:
    """Average Hit@K, NDCG@K and MAP over users, each having one relevant item."""
    r = np.asarray([x.rank if isinstance(x, RankResult) else x for x in ranks], dtype=np.float64)
    if r.size == 0:
        raise ValueError("compute_metrics needs at least one rank")
    hit = {k: float(np.mean(r <= k)) for k in ks}
    ndcg = {k: float(np.mean(np.where(r <= k, 1.0 / np.log2(r + 1.0), 0.0))) for k in ks}
    return MetricReport(hit, ndcg, float(np.mean(1.0 / r)), int(r.size))


def default_bucket_edges(lengths) -> tuple:
    qs = np.quantile(np.asarray(lengths), [0.25, 0.5, 0.75])
    return tuple(sorted(set(int(np.ceil(x)) for x in qs)))


def bucket_label(lo, hi) -> str:
    return f"len[{lo},{hi})" if hi is not None else f"len[{lo},inf)"


def bucketed_metrics(ranks, lengths, edges, ks=KS) -> dict:
    ranks = np.asarray(ranks)
    lengths = np.asarray(lengths)
    bounds = [0, *edges, None]
    out = {}
    for lo, hi in zip(bounds[:-1], bounds[1:]):
        sel = lengths >= lo if hi is None else (lengths >= lo) & (lengths < hi)
        if sel.any():
            out[bucket_label(lo, hi)] = compute_metrics(ranks[sel], ks)
    return out


def eval_rng(seed: int, user: int, split: str) -> np.random.Generator:
    return np.random.default_rng([seed, EVAL_STREAM, user, 0 if split == "val" else 1])


def candidate_lists(log: InteractionLog, split: str, n_neg: int, seed: int, users=None) -> dict:
    """user -> candidate array with the ground truth first; fixed for a given seed."""
    users = range(log.num_users) if users is None else users
    return {
        u: np.concatenate([[log.target(u, split)], sample_eval_negatives(log, u, n_neg, eval_rng(seed, u, split))])
        for u in users
    }


def evaluate(scorer, log: InteractionLog, split: str = "test", n_neg: int = 100, seed: int = 0,
             batch_size: int = 256, bucket_edges=None, ks=KS) -> MetricReport:
    """Rank each user's held-out item against ``n_neg`` sampled negatives.

    ``scorer(histories, users)`` returns an ``(n, |I|)`` score matrix.  Users
    with empty history are skipped.  ``bucket_edges`` (``()`` for train
    length quartiles, ``None`` to disable) adds a per-history-length breakdown.
    """
    if split not in ("val", "test"):
        raise ValueError(f"split must be 'val' or 'test', got {split!r}")
    users = [u for u in range(log.num_users) if len(log.history(u, split))]
    skipped = log.num_users - len(users)
    if skipped:
        logger.warning("skipped %d users with empty history", skipped)
    cands = candidate_lists(log, split, n_neg, seed, users)
    ranks = []
    for start in range(0, len(users), batch_size):
        chunk = users[start:start + batch_size]
        scores = np.asarray(scorer([log.history(u, split) for u in chunk], np.asarray(chunk)))
        for row, u in zip(scores, chunk):
            ranks.append(rank_ground_truth(row[cands[u]], 0, u).rank)
    report = compute_metrics(ranks, ks)
    if bucket_edges is not None:
        lengths = [len(log.train(u)) for u in users]
        edges = tuple(bucket_edges) or default_bucket_edges(lengths)
        report.buckets = bucketed_metrics(ranks, lengths, edges, ks)
    return report


def export_attention(attn, tokens, window: int = 15) -> np.ndarray:
    """Average attention over the last ``window`` positions, ignoring padding.

    ``attn`` is ``(B, T, T)`` for one layer and head; ``tokens`` is the
    ``(B, T)`` left-padded input (0 = pad).  Each cell averages over the
    sequences whose query position is real; pad keys contribute zero.  The
    matrix side is ``min(window, longest real length)``.
    """
    attn = np.asarray(attn)
    tokens = np.asarray(tokens)
    B, T, _ = attn.shape
    if not 1 <= window <= T:
        raise ValueError(f"window must be in [1, {T}], got {window}")
    real = tokens != 0
    w = min(window, int(real.sum(axis=1).max()))
    sl = slice(T - w, T)
    a = attn[:, sl, sl] * real[:, None, sl]
    rows = real[:, sl]
    count = rows.sum(axis=0)
    total = np.einsum("bij,bi->ij", a, rows)
    return total / np.maximum(count, 1)[:, None]


def cooccurrence_matrix(sequences, items) -> np.ndarray:
    """(i, j) -> fraction of users whose sequence contains both ``items[i]`` and ``items[j]``."""
    items = list(items)
    if not items:
        raise ValueError("item subset must be nonempty")
    sets = [set(np.asarray(s).tolist()) for s in sequences]
    present = np.array([[it in seen for it in items] for seen in sets], dtype=float)
    return present.T @ present / len(sequences)


def matrix_to_tsv(matrix, labels=None) -> str:
    lines = []
    if labels is not None:
        lines.append("\t".join(["item", *map(str, labels)]))
        for lab, row in zip(labels, matrix):
            lines.append("\t".join([str(lab), *(repr(float(x)) for x in row)]))
    else:
        lines += ["\t".join(repr(float(x)) for x in row) for row in matrix]
    return "\n".join(lines) + "\n"


def masked_position_probes(sequences, max_len: int, num_items: int):
    """Every real position of every sequence masked one at a time.

    Returns ``(tokens, rows, cols, targets, seq_index)`` with one probe row
    per masked position.
    """
    tokens, cols, targets, owner = [], [], [], []
    mtok = num_items + 1
    for s_idx, seq in enumerate(sequences):
        seq = np.asarray(seq[-max_len:], dtype=np.int64)
        base = np.zeros(max_len, dtype=np.int64)
        base[max_len - len(seq):] = seq + 1
        for p in range(max_len - len(seq), max_len):
            row = base.copy()
            targets.append(row[p] - 1)
            row[p] = mtok
            tokens.append(row)
            cols.append(p)
            owner.append(s_idx)
    tokens = np.asarray(tokens).reshape(-1, max_len)
    return tokens, np.arange(len(tokens)), np.asarray(cols), np.asarray(targets), np.asarray(owner)


def masked_hit_rate(model, sequences, k: int = 1, users=None) -> float:
    """Fraction of single-position Cloze probes whose true item ranks in the top ``k``."""
    from . import autodiff as ad
    from .autodiff import Tensor
    from .seq import encode, gather_positions

    tokens, rows, cols, targets, owner = masked_position_probes(sequences, model.config.max_len, model.num_items)
    with ad.no_grad():
        hidden, _ = encode(model.seq, tokens)
        probe_users = None if users is None else np.asarray(users)[owner]
        scores = model.item_scores(Tensor(gather_positions(hidden, rows, cols).data), probe_users).data
    hits = [rank_ground_truth(s, t).rank <= k for s, t in zip(scores, targets)]
    return float(np.mean(hits))


def masked_probe_loss(model, sequences, users=None) -> float:
    """Mean Cloze loss over all single-position probes (no dropout, fixed masks)."""
    from . import autodiff as ad
    from .autodiff import Tensor
    from .seq import cloze_loss, encode, gather_positions

    tokens, rows, cols, targets, owner = masked_position_probes(sequences, model.config.max_len, model.num_items)
    with ad.no_grad():
        hidden, _ = encode(model.seq, tokens)
        probe_users = None if users is None else np.asarray(users)[owner]
        logits = model.item_scores(Tensor(gather_positions(hidden, rows, cols).data), probe_users)
        return cloze_loss(ad.softmax(logits), targets).item()
