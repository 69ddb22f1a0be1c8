"""TransR scoring and attentive embedding propagation over the collaborative graph."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import KnowledgeGraph, TripletBatch, sample_triplet_batch

logger = logging.getLogger(__name__)


class DivergenceError(RuntimeError):
    pass


@dataclass
class KgParams:
    """Node/relation embeddings, per-relation projections and aggregator weights.

    ``proj[r]`` has shape ``(d_r, d)``; ``w1[l]`` and ``w2[l]`` map layer
    ``l`` inputs of width ``dims[l]`` to width ``dims[l + 1]`` and are stored
    as ``(out, in)`` matrices.
    """

    entity: Tensor
    relation: Tensor
    proj: Tensor
    w1: list
    w2: list

    @classmethod
    def init(cls, num_nodes, num_relations, d, d_r, layer_dims, rng, dtype=np.float64,
             std=0.02, low=-0.02, high=0.02):
        def p(shape, name):
            return Tensor(ad.trunc_normal_init(shape, low, high, std, rng, dtype), requires_grad=True, name=name)

        dims = (d,) + tuple(layer_dims)
        return cls(
            entity=p((num_nodes, d), "kg.entity"),
            relation=p((num_relations, d_r), "kg.relation"),
            proj=p((num_relations, d_r, d), "kg.proj"),
            w1=[p((dims[l + 1], dims[l]), f"kg.w1.{l}") for l in range(len(layer_dims))],
            w2=[p((dims[l + 1], dims[l]), f"kg.w2.{l}") for l in range(len(layer_dims))],
        )

    @property
    def dims(self) -> tuple:
        return (self.entity.shape[1],) + tuple(w.shape[0] for w in self.w1)

    def transr_tensors(self) -> dict:
        """Parameters that the triplet ranking loss depends on."""
        return {"kg.entity": self.entity, "kg.relation": self.relation, "kg.proj": self.proj}

    def tensors(self) -> dict:
        out = self.transr_tensors()
        for l, (a, b) in enumerate(zip(self.w1, self.w2)):
            out[f"kg.w1.{l}"] = a
            out[f"kg.w2.{l}"] = b
        return out


def project(params: KgParams, emb: Tensor, nodes, rels) -> Tensor:
    """``W^r e`` for each (node, relation) pair, shape ``(n, d_r)``.

    Pairs are grouped by relation so that each group needs one matmul.
    """
    nodes = np.asarray(nodes, dtype=np.int64)
    rels = np.asarray(rels, dtype=np.int64)
    order = np.argsort(rels, kind="stable")
    pieces = []
    for r in np.unique(rels):
        sel = order[rels[order] == r]
        w = ad.reshape(ad.take(params.proj, [r]), params.proj.shape[1:])
        pieces.append(ad.matmul(ad.take(emb, nodes[sel]), ad.transpose(w)))
    stacked = ad.concat(pieces, axis=0)
    return ad.take(stacked, np.argsort(order, kind="stable"))


def transr_scores(params: KgParams, heads, rels, tails) -> Tensor:
    """``||W^r e_h + e_r - W^r e_t||^2`` per triplet; lower is more plausible."""
    wh = project(params, params.entity, heads, rels)
    wt = project(params, params.entity, tails, rels)
    diff = wh + ad.take(params.relation, rels) - wt
    return ad.sum(diff * diff, axis=-1)


def transr_score(params: KgParams, h: int, r: int, t: int) -> Tensor:
    return ad.reshape(transr_scores(params, [h], [r], [t]), ())


def raw_attention(params: KgParams, heads, rels, tails) -> Tensor:
    """Unnormalized ``(W^r e_t)^T tanh(W^r e_h + e_r)`` per edge, from layer-0 embeddings."""
    wh = project(params, params.entity, heads, rels)
    wt = project(params, params.entity, tails, rels)
    return ad.sum(wt * ad.tanh(wh + ad.take(params.relation, rels)), axis=-1)


def attention_coeffs(params: KgParams, graph: KnowledgeGraph, mode: str = "attentive", edges=None) -> Tensor:
    """Per-edge weights normalized over each head's ego network."""
    idx = np.arange(graph.num_edges) if edges is None else np.asarray(edges)
    heads, rels, tails = graph.heads[idx], graph.rels[idx], graph.tails[idx]
    if mode == "uniform":
        deg = np.bincount(heads, minlength=graph.num_nodes)
        return Tensor((1.0 / deg[heads]).astype(params.entity.dtype))
    if mode != "attentive":
        raise ValueError(f"unknown attention mode {mode!r}")
    if len(idx) == 0:
        return Tensor(np.zeros(0, dtype=params.entity.dtype))
    scores = raw_attention(params, heads, rels, tails)
    return ad.segment_softmax(scores, heads, graph.num_nodes)


def ego_attention(params: KgParams, graph: KnowledgeGraph, h: int, mode: str = "attentive") -> list:
    """``[(relation, tail, weight), ...]`` for node ``h``; empty when ``h`` has no neighbours."""
    lo, hi = np.searchsorted(graph.heads, [h, h + 1])
    if lo == hi:
        return []
    edges = np.arange(lo, hi)
    with ad.no_grad():
        w = attention_coeffs(params, graph, mode, edges).data
    return list(zip(graph.rels[edges].tolist(), graph.tails[edges].tolist(), w.tolist()))


def propagate_layer(prev: Tensor, w1: Tensor, w2: Tensor, graph: KnowledgeGraph, weights: Tensor,
                    edges=None, slope: float = 0.2) -> Tensor:
    """One bi-interaction aggregation step.

    ``e_N = sum_t weight * e_t``;
    ``out = LeakyReLU(W1 (e_h + e_N)) + LeakyReLU(W2 (e_h * e_N))``.
    """
    if prev.shape[1] != w1.shape[1] or prev.shape[1] != w2.shape[1]:
        raise ad.ShapeError("propagate_layer", prev.shape, w1.shape, w2.shape)
    idx = np.arange(graph.num_edges) if edges is None else np.asarray(edges)
    msgs = ad.take(prev, graph.tails[idx]) * ad.reshape(weights, (-1, 1))
    ego = ad.segment_sum(msgs, graph.heads[idx], graph.num_nodes)
    a = ad.leaky_relu(ad.matmul(prev + ego, ad.transpose(w1)), slope)
    b = ad.leaky_relu(ad.matmul(prev * ego, ad.transpose(w2)), slope)
    return a + b


def entity_representation(params: KgParams, graph: KnowledgeGraph, num_layers: int | None = None,
                          mode: str = "attentive", edges=None, slope: float = 0.2) -> Tensor:
    """Concatenation ``[e^(0) || ... || e^(L)]`` for every node.

    Attention weights come from layer-0 embeddings and are reused at every
    layer.
    """
    L = len(params.w1) if num_layers is None else num_layers
    if L > len(params.w1):
        raise ValueError(f"requested {L} propagation layers but only {len(params.w1)} are configured")
    outs = [params.entity]
    if L == 0:
        return params.entity
    weights = attention_coeffs(params, graph, mode, edges)
    cur = params.entity
    for l in range(L):
        cur = propagate_layer(cur, params.w1[l], params.w2[l], graph, weights, edges, slope)
        outs.append(cur)
    return ad.concat(outs, axis=-1)


def kg_loss(params: KgParams, batch: TripletBatch, lam: float = 1e-5) -> Tensor:
    """Mean of ``-ln sigmoid(s(h,r,t') - s(h,r,t))`` plus an L2 penalty.

    The penalty is ``lam`` times the batch-mean of
    ``||e_h||^2 + ||e_r||^2 + ||e_t||^2 + ||e_t'||^2`` over the rows.
    """
    if len(batch) == 0:
        raise ValueError("kg_loss needs a nonempty batch")
    pos = transr_scores(params, batch.heads, batch.rels, batch.tails)
    neg = transr_scores(params, batch.heads, batch.rels, batch.neg_tails)
    rank = ad.mean(-ad.log_sigmoid(neg - pos))
    if lam == 0:
        return rank
    reg = (
        ad.sq_norm(ad.take(params.entity, batch.heads))
        + ad.sq_norm(ad.take(params.relation, batch.rels))
        + ad.sq_norm(ad.take(params.entity, batch.tails))
        + ad.sq_norm(ad.take(params.entity, batch.neg_tails))
    )
    return rank + reg * (lam / len(batch))


def kg_epoch(params: KgParams, graph: KnowledgeGraph, optimizer: ad.Adam, batch_size: int, lam: float,
             rng, step_offset: int = 0, history=None) -> list:
    """One pass over every graph edge in shuffled mini-batches; returns the batch losses."""
    losses = []
    perm = rng.permutation(graph.num_edges)
    for start in range(0, len(perm), batch_size):
        batch = sample_triplet_batch(graph, perm[start:start + batch_size], rng)
        optimizer.zero_grad()
        loss = kg_loss(params, batch, lam)
        value = loss.item()
        if not np.isfinite(value):
            raise DivergenceError(f"KG loss became {value} at step {step_offset + len(losses)}")
        ad.backward(loss)
        optimizer.step()
        losses.append(value)
        if history is not None:
            history.append(("kg", value))
    return losses


def pretrain_kg(config, graph: KnowledgeGraph, rng, params: KgParams | None = None,
                init_rng=None) -> KgParams:
    """Optimize the triplet ranking loss alone for ``config.pretrain_epochs`` epochs."""
    dtype = np.dtype(config.dtype)
    if params is None:
        params = KgParams.init(
            graph.num_nodes, graph.num_relations, config.d, config.relation_dim, config.layer_dims,
            init_rng if init_rng is not None else rng, dtype,
            config.init_std, config.init_low, config.init_high,
        )
    if not config.pretrain or config.pretrain_epochs == 0 or graph.num_edges == 0:
        return params
    steps = config.pretrain_epochs * -(-graph.num_edges // config.triplet_batch)
    opt = ad.Adam(
        params.transr_tensors(), lr=config.kg_learning_rate, betas=(config.beta1, config.beta2),
        eps=config.adam_eps, weight_decay=config.weight_decay,
        total_steps=steps if config.lr_decay else None,
    )
    for epoch in range(config.pretrain_epochs):
        losses = kg_epoch(params, graph, opt, config.triplet_batch, config.kg_lambda, rng,
                          step_offset=opt.step_count)
        logger.debug("pretrain epoch %d loss %.6f", epoch, float(np.mean(losses)))
    return params
