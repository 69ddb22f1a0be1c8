"""Bidirectional transformer encoder, item-embedding fusion and Cloze loss."""

from __future__ import annotations

import logging
import math
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

logger = logging.getLogger(__name__)

CLOZE_EPS = 1e-12
clamp_counter = Counter()


def sinusoid_table(max_len: int, q: int, dtype=np.float64) -> np.ndarray:
    pos = np.arange(max_len)[:, None]
    i = np.arange(q)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / q)
    return np.where(i % 2 == 0, np.sin(angle), np.cos(angle)).astype(dtype)


@dataclass
class Block:
    wq: Tensor
    wk: Tensor
    wv: Tensor
    wo: Tensor
    ln1_g: Tensor
    ln1_b: Tensor
    w_ff1: Tensor
    b_ff1: Tensor
    w_ff2: Tensor
    b_ff2: Tensor
    ln2_g: Tensor
    ln2_b: Tensor

    def tensors(self, prefix):
        return {f"{prefix}.{k}": v for k, v in vars(self).items()}


@dataclass
class SeqParams:
    """Parameters of the sequential module.

    ``item`` is the sequential item table V* (one row per item).  Head
    projections are stored as column blocks of the ``q x q`` matrices
    ``wq``/``wk``/``wv``; block ``j`` is head ``j``'s ``q x q/n_heads`` map.
    """

    item: Tensor
    mask: Tensor
    position: Tensor
    blocks: list
    fuse_w: Tensor
    fuse_b: Tensor
    head_w: Tensor
    head_b: Tensor
    out_b: Tensor
    n_heads: int
    learned_position: bool = True
    extra: dict = field(default_factory=dict)

    @classmethod
    def init(cls, num_items, q, max_len, num_blocks, n_heads, rng, dtype=np.float64, std=0.02,
             low=-0.02, high=0.02, positional="learned", explicit_user=False, item_table=None):
        def p(shape, name):
            return Tensor(ad.trunc_normal_init(shape, low, high, std, rng, dtype), requires_grad=True, name=name)

        def const(value, name):
            return Tensor(np.full(value[0], value[1], dtype=dtype), requires_grad=True, name=name)

        if q % n_heads:
            raise ValueError(f"q={q} not divisible by n_heads={n_heads}")
        blocks = []
        for m in range(num_blocks):
            blocks.append(Block(
                wq=p((q, q), f"seq.{m}.wq"), wk=p((q, q), f"seq.{m}.wk"), wv=p((q, q), f"seq.{m}.wv"),
                wo=p((q, q), f"seq.{m}.wo"),
                ln1_g=const(((q,), 1.0), f"seq.{m}.ln1_g"), ln1_b=const(((q,), 0.0), f"seq.{m}.ln1_b"),
                w_ff1=p((q, 4 * q), f"seq.{m}.w_ff1"), b_ff1=const(((4 * q,), 0.0), f"seq.{m}.b_ff1"),
                w_ff2=p((4 * q, q), f"seq.{m}.w_ff2"), b_ff2=const(((q,), 0.0), f"seq.{m}.b_ff2"),
                ln2_g=const(((q,), 1.0), f"seq.{m}.ln2_g"), ln2_b=const(((q,), 0.0), f"seq.{m}.ln2_b"),
            ))
        if positional == "learned":
            position = p((max_len, q), "seq.position")
        elif positional == "sinusoid":
            position = Tensor(sinusoid_table(max_len, q, dtype), name="seq.position")
        else:
            position = Tensor(np.zeros((max_len, q), dtype=dtype), name="seq.position")
        if item_table is None:
            item = p((num_items, q), "seq.item")
        else:
            item = Tensor(np.array(item_table, dtype=dtype), requires_grad=True, name="seq.item")
            if item.shape != (num_items, q):
                raise ad.ShapeError("seq.item", item.shape, (num_items, q))
        return cls(
            item=item,
            mask=p((1, q), "seq.mask"),
            position=position,
            blocks=blocks,
            fuse_w=p((2 * q, q), "seq.fuse_w"),
            fuse_b=const(((q,), 0.0), "seq.fuse_b"),
            head_w=p(((2 if explicit_user else 1) * q, q), "seq.head_w"),
            head_b=const(((q,), 0.0), "seq.head_b"),
            out_b=const(((num_items,), 0.0), "seq.out_b"),
            n_heads=n_heads,
            learned_position=positional == "learned",
        )

    @property
    def q(self) -> int:
        return self.item.shape[1]

    @property
    def num_items(self) -> int:
        return self.item.shape[0]

    @property
    def max_len(self) -> int:
        return self.position.shape[0]

    def tensors(self, include_fusion=True) -> dict:
        out = {"seq.item": self.item, "seq.mask": self.mask}
        if self.learned_position:
            out["seq.position"] = self.position
        for m, blk in enumerate(self.blocks):
            out.update(blk.tensors(f"seq.{m}"))
        if include_fusion:
            out["seq.fuse_w"] = self.fuse_w
            out["seq.fuse_b"] = self.fuse_b
        out.update({"seq.head_w": self.head_w, "seq.head_b": self.head_b, "seq.out_b": self.out_b})
        return out


def token_table(params: SeqParams) -> Tensor:
    """Rows: padding (zeros), items ``1..|I|``, mask token."""
    pad = Tensor(np.zeros((1, params.q), dtype=params.item.dtype))
    return ad.concat([pad, params.item, params.mask], axis=0)


def embed_sequence(tokens, table: Tensor, position: Tensor) -> Tensor:
    """``v_i = table[token_i] + p_i`` for a ``(B, T)`` token matrix."""
    tokens = np.asarray(tokens)
    if tokens.shape[-1] != position.shape[0]:
        raise ad.ShapeError("embed_sequence", tokens.shape, position.shape)
    if tokens.min() < 0 or tokens.max() >= table.shape[0]:
        raise IndexError(f"token id out of vocabulary of size {table.shape[0]}")
    return ad.take(table, tokens) + position


def transformer_layer(V: Tensor, blk: Block, n_heads: int, key_mask, dropout: float = 0.0,
                      train: bool = False, rng=None):
    """One encoder block on ``V`` of shape ``(B, T, q)``.

    ``key_mask`` is a ``(B, T)`` boolean array, True at real (non-pad)
    positions; pad keys get zero attention.  Returns the new hidden states and
    the ``(B, n_heads, T, T)`` attention probabilities.
    """
    if V.ndim != 3 or V.shape[-1] != blk.wq.shape[0]:
        raise ad.ShapeError("transformer_layer", V.shape, blk.wq.shape)
    B, T, q = V.shape
    dh = q // n_heads

    def heads(x):
        return ad.transpose(ad.reshape(x, (B, T, n_heads, dh)), (0, 2, 1, 3))

    Q, K, Vh = heads(V @ blk.wq), heads(V @ blk.wk), heads(V @ blk.wv)
    logits = ad.matmul(Q, ad.transpose(K)) * (1.0 / math.sqrt(dh))
    attn = ad.softmax(logits, mask=np.asarray(key_mask, dtype=bool)[:, None, None, :])
    ctx = ad.reshape(ad.transpose(ad.matmul(attn, Vh), (0, 2, 1, 3)), (B, T, q))
    mh = ctx @ blk.wo
    x = ad.layer_norm(V + ad.dropout(mh, dropout, rng, train), blk.ln1_g, blk.ln1_b)
    ff = ad.gelu(x @ blk.w_ff1 + blk.b_ff1) @ blk.w_ff2 + blk.b_ff2
    out = ad.layer_norm(x + ad.dropout(ff, dropout, rng, train), blk.ln2_g, blk.ln2_b)
    return out, attn


def encode(params: SeqParams, tokens, dropout: float = 0.0, train: bool = False, rng=None,
           table: Tensor | None = None):
    """Run all blocks; returns final hidden states and per-block attention arrays."""
    tokens = np.atleast_2d(np.asarray(tokens, dtype=np.int64))
    table = token_table(params) if table is None else table
    V = embed_sequence(tokens, table, params.position)
    key_mask = tokens != 0
    attns = []
    for blk in params.blocks:
        V, a = transformer_layer(V, blk, params.n_heads, key_mask, dropout, train, rng)
        attns.append(a.data)
    return V, attns


def fuse_item_embeddings(seq_items: Tensor, kg_items: Tensor | None, fuse_w: Tensor, fuse_b: Tensor,
                         bypass: bool = False) -> Tensor:
    """``sigmoid([V* || E*] W + b)``, or ``V*`` unchanged when ``bypass`` is set."""
    if bypass:
        return seq_items
    if kg_items is None or seq_items.shape[0] != kg_items.shape[0]:
        raise ad.ShapeError("fuse_item_embeddings", seq_items.shape, None if kg_items is None else kg_items.shape)
    return ad.sigmoid(ad.concat([seq_items, kg_items], axis=-1) @ fuse_w + fuse_b)


def next_item_logits(hidden: Tensor, items: Tensor, head_w: Tensor, head_b: Tensor, out_b: Tensor,
                     user: Tensor | None = None) -> Tensor:
    """Unnormalized scores over the item vocabulary for rows of ``hidden``.

    With ``user`` given, the input to the projection is ``[e*_u || v]`` and
    ``head_w`` must have ``2q`` rows.
    """
    x = hidden if user is None else ad.concat([user, hidden], axis=-1)
    if x.shape[-1] != head_w.shape[0]:
        raise ad.ShapeError("next_item_logits", x.shape, head_w.shape)
    return ad.gelu(x @ head_w + head_b) @ ad.transpose(items) + out_b


def next_item_probs(hidden, items, head_w, head_b, out_b, user=None) -> Tensor:
    return ad.softmax(next_item_logits(hidden, items, head_w, head_b, out_b, user))


def cloze_loss(probs: Tensor, targets) -> Tensor:
    """Mean ``-log P(true item)`` over rows; probabilities below 1e-12 are clamped."""
    targets = np.asarray(targets, dtype=np.int64)
    n, V = probs.shape
    if n == 0:
        raise ValueError("cloze_loss needs at least one masked position")
    if targets.shape != (n,):
        raise ad.ShapeError("cloze_loss", probs.shape, targets.shape)
    picked = ad.take(ad.reshape(probs, (n * V,)), np.arange(n) * V + targets)
    low = int(np.sum(picked.data < CLOZE_EPS))
    if low:
        clamp_counter["cloze"] += low
        logger.warning("clamped %d target probabilities below %g", low, CLOZE_EPS)
    return ad.mean(-ad.log(picked, eps=CLOZE_EPS))


def gather_positions(hidden: Tensor, rows, cols) -> Tensor:
    """Pick ``hidden[rows[k], cols[k]]`` into an ``(n, q)`` tensor."""
    B, T, q = hidden.shape
    flat = ad.reshape(hidden, (B * T, q))
    return ad.take(flat, np.asarray(rows) * T + np.asarray(cols))
