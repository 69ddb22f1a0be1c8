"""Joint training schedule, checkpoints and seeded RNG streams."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import tomli_w

from . import autodiff as ad
from .config import RunConfig, load_config
from .data import Dataset, build_masked_batch
from .evaluation import evaluate, masked_probe_loss
from .fileio import atomic_write_bytes, atomic_write_text
from .kg import DivergenceError, KgParams, kg_epoch, pretrain_kg
from .model import KATRecModel

logger = logging.getLogger(__name__)

# Stream 2 is reserved for evaluation negatives (see evaluation.eval_rng).
STREAMS = {"init": 0, "triplet": 1, "mask": 3, "dropout": 4, "graph": 5}


class CheckpointError(ValueError):
    pass


def make_streams(seed: int) -> dict:
    return {name: np.random.default_rng([seed, idx]) for name, idx in STREAMS.items()}


@dataclass
class Checkpoint:
    config: RunConfig
    tensors: dict
    state: dict = field(default_factory=dict)


class Trainer:
    """Owns the model, both optimizers and all RNG streams for one run.

    Each epoch runs phase A (every graph edge once, triplet loss, KG
    optimizer) then phase B (every user once, Cloze loss, sequential
    optimizer), then refreshes the cached KG table and, when ``patience`` is
    positive, checks validation NDCG@10 for early stopping.
    """

    def __init__(self, config: RunConfig, dataset: Dataset):
        self.config = config
        self.dataset = dataset
        self.streams = make_streams(config.seed)
        self.model: KATRecModel | None = None
        self.kg_opt = None
        self.seq_opt = None
        self.epoch = 0
        self.history: list = []
        self.epoch_losses: list = []
        self.val_history: list = []
        self.best_metric = -np.inf
        self.best_epoch = -1
        self.best_state: dict | None = None
        self.bad_epochs = 0
        self.stopped = False

    @property
    def graph(self):
        return self.dataset.graph

    @property
    def log(self):
        return self.dataset.log

    def steps_per_epoch(self) -> tuple:
        c = self.config
        a = -(-self.graph.num_edges // c.triplet_batch)
        b = -(-self.log.num_users // c.seq_batch)
        return a, b

    def _build_model(self, kg: KgParams) -> KATRecModel:
        edges = self.graph.capped_edges(self.config.max_neighbors, self.streams["graph"])
        return KATRecModel(self.config, self.graph, kg, edges=edges)

    def _make_optimizers(self):
        c = self.config
        a, b = self.steps_per_epoch()
        common = dict(betas=(c.beta1, c.beta2), eps=c.adam_eps, weight_decay=c.weight_decay)
        self.kg_opt = ad.Adam(self.model.kg.transr_tensors(), lr=c.kg_learning_rate,
                              total_steps=c.epochs * a if c.lr_decay else None, **common)
        self.seq_opt = ad.Adam(self.model.seq_tensors(), lr=c.lr,
                               total_steps=c.epochs * b if c.lr_decay else None, **common)

    def setup(self, kg: KgParams | None = None) -> "Trainer":
        """Initialize parameters, pretrain the KG encoder (unless disabled), seed V*."""
        c = self.config
        g = self.graph
        if kg is None:
            kg = KgParams.init(g.num_nodes, g.num_relations, c.d, c.relation_dim, c.layer_dims,
                               self.streams["init"], np.dtype(c.dtype), c.init_std, c.init_low, c.init_high)
        self.model = self._build_model(kg)
        pretrain_kg(c, g, self.streams["triplet"], params=kg)
        self.model.refresh_kg_table()
        self.model.init_seq(self.streams["init"])
        self._make_optimizers()
        return self

    def scorer(self, histories, users=None):
        return self.model.score(histories, users)

    def phase_a(self) -> list:
        if self.graph.num_edges == 0:
            return []
        return kg_epoch(self.model.kg, self.graph, self.kg_opt, self.config.triplet_batch,
                        self.config.kg_lambda, self.streams["triplet"], step_offset=len(self.history),
                        history=self.history)

    def phase_b(self) -> list:
        c = self.config
        losses = []
        rng = self.streams["mask"]
        perm = rng.permutation(self.log.num_users)
        for start in range(0, len(perm), c.seq_batch):
            users = perm[start:start + c.seq_batch]
            batch = build_masked_batch([self.log.train(u) for u in users], c.mask_prob, c.max_len,
                                       self.dataset.num_items, rng, users=users)
            if batch.num_masked == 0:
                continue
            self.seq_opt.zero_grad()
            loss = self.model.cloze_forward(batch, train=True, rng=self.streams["dropout"])
            value = loss.item()
            if not np.isfinite(value):
                raise DivergenceError(f"Cloze loss became {value} at step {len(self.history)}")
            ad.backward(loss)
            self.seq_opt.step()
            losses.append(value)
            self.history.append(("seq", value))
        return losses

    def validate(self) -> float:
        c = self.config
        rep = evaluate(self.scorer, self.log, "val", c.eval_negatives, c.seed)
        return rep.ndcg[10]

    def snapshot(self) -> dict:
        return {k: t.data.copy() for k, t in self.model.tensors().items()}

    def restore(self, state: dict) -> None:
        for k, t in self.model.tensors().items():
            t.data = state[k].copy()
        self.model.refresh_kg_table()

    def run_epoch(self) -> dict:
        a = self.phase_a()
        b = self.phase_b()
        self.model.refresh_kg_table()
        self.epoch += 1
        record = {"epoch": self.epoch, "kg_loss": float(np.mean(a)) if a else float("nan"),
                  "cloze_loss": float(np.mean(b)) if b else float("nan")}
        if self.config.track_train_cloze:
            record["train_cloze"] = masked_probe_loss(self.model, self.log.train_sequences(),
                                                      np.arange(self.log.num_users))
        self.epoch_losses.append(record)
        if self.config.patience > 0:
            metric = self.validate()
            self.val_history.append((self.epoch, metric))
            record["val_ndcg10"] = metric
            if metric > self.best_metric:
                self.best_metric, self.best_epoch = metric, self.epoch
                self.best_state = self.snapshot()
                self.bad_epochs = 0
            else:
                self.bad_epochs += 1
                if self.bad_epochs >= self.config.patience:
                    self.stopped = True
        logger.info("epoch %d %s", self.epoch, record)
        return record

    def fit(self, max_epochs: int | None = None) -> "Trainer":
        """Train until ``config.epochs`` or early stop; ``max_epochs`` caps this call only."""
        target = self.config.epochs if max_epochs is None else min(self.config.epochs, self.epoch + max_epochs)
        while self.epoch < target and not self.stopped:
            self.run_epoch()
        return self

    def finalize(self) -> KATRecModel:
        """Load the best validation snapshot (if early stopping was tracked)."""
        if self.best_state is not None:
            self.restore(self.best_state)
        return self.model

    # -- checkpointing ----------------------------------------------------

    def checkpoint(self) -> Checkpoint:
        tensors = self.snapshot()
        for prefix, opt in (("opt.kg", self.kg_opt), ("opt.seq", self.seq_opt)):
            st = opt.state_dict()
            for name in opt.params:
                tensors[f"{prefix}.m.{name}"] = st["m"][name]
                tensors[f"{prefix}.v.{name}"] = st["v"][name]
        if self.best_state is not None:
            tensors.update({f"best.{k}": v for k, v in self.best_state.items()})
        state = {
            "epoch": self.epoch,
            "kg_opt_steps": self.kg_opt.step_count,
            "seq_opt_steps": self.seq_opt.step_count,
            "history": [list(h) for h in self.history],
            "epoch_losses": self.epoch_losses,
            "val_history": [list(v) for v in self.val_history],
            "best_metric": None if not np.isfinite(self.best_metric) else self.best_metric,
            "best_epoch": self.best_epoch,
            "bad_epochs": self.bad_epochs,
            "stopped": self.stopped,
            "rng": {k: g.bit_generator.state for k, g in self.streams.items()},
        }
        return Checkpoint(self.config, tensors, state)

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint, dataset: Dataset) -> "Trainer":
        c = ckpt.config
        tr = cls(c, dataset)
        g = dataset.graph
        kg = KgParams.init(g.num_nodes, g.num_relations, c.d, c.relation_dim, c.layer_dims,
                           np.random.default_rng(0), np.dtype(c.dtype))
        tr.model = tr._build_model(kg)
        tr.model.kg_table = np.zeros((g.num_nodes, c.q), dtype=c.dtype)
        tr.model.init_seq(np.random.default_rng(0))
        _assign(tr.model.tensors(), ckpt.tensors)
        tr.model.refresh_kg_table()
        tr._make_optimizers()
        st = ckpt.state
        if st:
            for prefix, opt, steps in (("opt.kg", tr.kg_opt, "kg_opt_steps"), ("opt.seq", tr.seq_opt, "seq_opt_steps")):
                opt.load_state_dict({
                    "step_count": st[steps],
                    "m": {n: ckpt.tensors[f"{prefix}.m.{n}"] for n in opt.params},
                    "v": {n: ckpt.tensors[f"{prefix}.v.{n}"] for n in opt.params},
                })
            tr.epoch = st["epoch"]
            tr.history = [tuple(h) for h in st["history"]]
            tr.epoch_losses = list(st["epoch_losses"])
            tr.val_history = [tuple(v) for v in st["val_history"]]
            tr.best_metric = -np.inf if st["best_metric"] is None else st["best_metric"]
            tr.best_epoch = st["best_epoch"]
            tr.bad_epochs = st["bad_epochs"]
            tr.stopped = st["stopped"]
            for k, s in st["rng"].items():
                tr.streams[k].bit_generator.state = s
            best = {k[5:]: v for k, v in ckpt.tensors.items() if k.startswith("best.")}
            tr.best_state = best or None
        return tr


def _assign(targets: dict, arrays: dict) -> None:
    for name, t in targets.items():
        if name not in arrays:
            raise CheckpointError(f"checkpoint is missing tensor {name!r}")
        arr = arrays[name]
        if arr.shape != t.shape:
            raise CheckpointError(f"tensor {name!r}: checkpoint shape {arr.shape} != model shape {t.shape}")
        t.data = np.array(arr, dtype=t.dtype)


def joint_train(config: RunConfig, dataset: Dataset, max_epochs: int | None = None) -> Checkpoint:
    """Pretrain (unless disabled), run the alternating schedule and return the final state."""
    tr = Trainer(config, dataset).setup().fit(max_epochs)
    tr.finalize()
    return tr.checkpoint()


def model_from_checkpoint(ckpt: Checkpoint, dataset: Dataset) -> KATRecModel:
    return Trainer.from_checkpoint(ckpt, dataset).model


# -- on-disk format -------------------------------------------------------------

_DTYPES = {"float32": "<f4", "float64": "<f8"}


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    """Directory with ``manifest.tsv``, one little-endian binary per tensor, config and state."""
    path = Path(path)
    (path / "tensors").mkdir(parents=True, exist_ok=True)
    lines = []
    for name in sorted(ckpt.tensors):
        arr = np.asarray(ckpt.tensors[name])
        dtype = str(arr.dtype)
        if dtype not in _DTYPES:
            raise CheckpointError(f"tensor {name!r}: unsupported dtype {dtype}")
        atomic_write_bytes(path / "tensors" / f"{name}.bin", arr.astype(_DTYPES[dtype]).tobytes())
        lines.append(f"{name}\t{dtype}\t{','.join(map(str, arr.shape))}")
    atomic_write_text(path / "manifest.tsv", "name\tdtype\tshape\n" + "\n".join(lines) + "\n")
    atomic_write_text(path / "config.toml", tomli_w.dumps(ckpt.config.to_dict()))
    atomic_write_text(path / "state.json", json.dumps(ckpt.state, sort_keys=True) + "\n")


def load_checkpoint(path, config: RunConfig | None = None) -> Checkpoint:
    """Read a checkpoint directory; with ``config`` given, reject incompatible dimensions."""
    path = Path(path)
    stored = load_config(path / "config.toml")
    if config is not None:
        for key in ("d", "layer_dims", "d_r", "num_blocks", "n_heads", "max_len", "explicit_user"):
            if getattr(config, key) != getattr(stored, key):
                raise CheckpointError(
                    f"config mismatch on {key!r}: checkpoint has {getattr(stored, key)!r}, "
                    f"requested {getattr(config, key)!r}"
                )
        if config.q != stored.q:
            raise CheckpointError(f"config mismatch on 'q': checkpoint has {stored.q}, requested {config.q}")
    tensors = {}
    with open(path / "manifest.tsv", encoding="utf-8") as fh:
        header = fh.readline().rstrip("\n").split("\t")
        if header != ["name", "dtype", "shape"]:
            raise CheckpointError("manifest.tsv has an unexpected header")
        for line in fh:
            if not line.strip():
                continue
            name, dtype, shape = line.rstrip("\n").split("\t")
            if dtype not in _DTYPES:
                raise CheckpointError(f"tensor {name!r}: unsupported dtype {dtype}")
            dims = tuple(int(x) for x in shape.split(",")) if shape else ()
            raw = (path / "tensors" / f"{name}.bin").read_bytes()
            arr = np.frombuffer(raw, dtype=_DTYPES[dtype])
            if arr.size != int(np.prod(dims)):
                raise CheckpointError(f"tensor {name!r}: {arr.size} values on disk, manifest says {dims}")
            tensors[name] = arr.reshape(dims).astype(dtype)
    state_path = path / "state.json"
    state = json.loads(state_path.read_text()) if state_path.exists() else {}
    return Checkpoint(stored, tensors, state)
