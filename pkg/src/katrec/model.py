"""The assembled KATRec network: KG encoder feeding the sequential encoder."""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .config import RunConfig
from .data import KnowledgeGraph, MaskedBatch, build_inference_input
from .kg import KgParams, entity_representation
from .seq import (
    SeqParams,
    cloze_loss,
    encode,
    fuse_item_embeddings,
    gather_positions,
    next_item_logits,
)


class KATRecModel:
    """Holds both parameter sets plus the cached KG representation table E*.

    ``kg_table`` is recomputed by :meth:`refresh_kg_table`; sequential
    training reads it as a constant.
    """

    def __init__(self, config: RunConfig, graph: KnowledgeGraph, kg: KgParams, seq: SeqParams | None = None,
                 edges=None):
        self.config = config
        self.graph = graph
        self.kg = kg
        self.seq = seq
        self.edges = edges
        self.kg_table = None

    @property
    def num_items(self) -> int:
        return self.graph.num_items

    @property
    def num_layers(self) -> int:
        return len(self.config.layer_dims)

    def kg_representation(self) -> Tensor:
        return entity_representation(self.kg, self.graph, self.num_layers, self.config.attention_mode,
                                     self.edges, self.config.leaky_slope)

    def refresh_kg_table(self) -> np.ndarray:
        with ad.no_grad():
            self.kg_table = self.kg_representation().data.copy()
        return self.kg_table

    def init_seq(self, rng) -> SeqParams:
        """Create the sequential parameters; connected mode seeds V* from E*'s item rows."""
        c = self.config
        if self.kg_table is None:
            self.refresh_kg_table()
        table = self.kg_table[: self.num_items] if c.connected else None
        self.seq = SeqParams.init(
            self.num_items, c.q, c.max_len, c.num_blocks, c.n_heads, rng, np.dtype(c.dtype),
            c.init_std, c.init_low, c.init_high, c.positional, c.explicit_user, item_table=table,
        )
        return self.seq

    def seq_tensors(self) -> dict:
        return self.seq.tensors(include_fusion=self.config.fuse)

    def _kg_views(self, live: bool):
        if live:
            full = self.kg_representation()
        else:
            full = Tensor(self.kg_table)
        return full

    def item_scores(self, hidden: Tensor, users=None, live: bool = False) -> Tensor:
        """Logits over items for hidden states ``(n, q)``; ``users`` only for the explicit-user head."""
        full = self._kg_views(live)
        kg_items = ad.take(full, np.arange(self.num_items)) if self.config.fuse else None
        items = fuse_item_embeddings(self.seq.item, kg_items, self.seq.fuse_w, self.seq.fuse_b,
                                     bypass=not self.config.fuse)
        user = None
        if self.config.explicit_user:
            if users is None:
                raise ValueError("explicit-user head needs user ids")
            user = ad.take(full, self.graph.user_node(np.asarray(users)))
        return next_item_logits(hidden, items, self.seq.head_w, self.seq.head_b, self.seq.out_b, user)

    def cloze_forward(self, batch: MaskedBatch, train: bool = True, rng=None, live: bool = False) -> Tensor:
        """Cloze loss of one masked batch; ``live`` backpropagates into the KG encoder too."""
        c = self.config
        hidden, _ = encode(self.seq, batch.tokens, c.dropout, train, rng)
        rows, cols = np.nonzero(batch.masked)
        users = None if batch.users is None else batch.users[rows]
        logits = self.item_scores(gather_positions(hidden, rows, cols), users, live)
        return cloze_loss(ad.softmax(logits), batch.targets[rows, cols])

    def inference_tokens(self, histories) -> np.ndarray:
        return np.stack([build_inference_input(h, self.config.max_len, self.num_items) for h in histories])

    def encode_histories(self, histories):
        with ad.no_grad():
            tokens = self.inference_tokens(histories)
            hidden, attns = encode(self.seq, tokens)
        return hidden, attns, tokens

    def score(self, histories, users=None) -> np.ndarray:
        """Next-item logits ``(n, |I|)`` for each history (no dropout, no graph)."""
        with ad.no_grad():
            hidden, _, _ = self.encode_histories(histories)
            last = Tensor(hidden.data[:, -1, :])
            return self.item_scores(last, users).data

    def tensors(self) -> dict:
        out = dict(self.kg.tensors())
        if self.seq is not None:
            out.update(self.seq.tensors())
        return out
