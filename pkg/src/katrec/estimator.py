"""scikit-learn style front end.

>>> from katrec.estimator import KATRecRecommender
>>> from katrec.config import toy_config
>>> from katrec.toy import load_toy
>>> ds = load_toy()
>>> rec = KATRecRecommender(config=toy_config(epochs=5)).fit(ds)   # doctest: +SKIP
>>> rec.predict([[0, 1, 2]], k=3)                                  # doctest: +SKIP
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from . import autodiff as ad
from .autodiff import Tensor
from .config import RunConfig
from .data import Dataset
from .evaluation import evaluate
from .trainer import Trainer


def check_histories(histories, num_items: int) -> list:
    """Validate a batch of item-id histories and return them as int64 arrays."""
    if isinstance(histories, np.ndarray) and histories.ndim == 1 and histories.dtype != object:
        histories = [histories]
    out = []
    for k, h in enumerate(histories):
        arr = np.asarray(h)
        if arr.ndim != 1 or arr.size == 0:
            raise ValueError(f"history {k} must be a nonempty 1-D sequence of item ids")
        if not np.issubdtype(arr.dtype, np.integer):
            raise ValueError(f"history {k} must contain integer item ids, got dtype {arr.dtype}")
        if arr.min() < 0 or arr.max() >= num_items:
            raise ValueError(f"history {k} has item ids outside [0, {num_items})")
        out.append(arr.astype(np.int64))
    if not out:
        raise ValueError("expected at least one history")
    return out


def check_dataset(X) -> Dataset:
    if not isinstance(X, Dataset):
        raise TypeError(f"expected a katrec Dataset, got {type(X).__name__}")
    return X


class KATRecRecommender(BaseEstimator):
    """Next-item recommender over a :class:`~katrec.data.Dataset`.

    Parameters
    ----------
    config : RunConfig, optional
        Full run configuration.  Nested keys are reachable through
        ``set_params(config__lr=...)``.
    """

    def __init__(self, config: RunConfig | None = None):
        self.config = config

    def _config(self) -> RunConfig:
        return self.config if self.config is not None else RunConfig()

    def fit(self, X, y=None):
        ds = check_dataset(X)
        trainer = Trainer(self._config(), ds).setup().fit()
        self.model_ = trainer.finalize()
        self.history_ = list(trainer.epoch_losses)
        self.n_items_ = ds.num_items
        self.dataset_ = ds
        return self

    def transform(self, histories):
        """Hidden state at the next-item slot for each history, shape ``(n, q)``."""
        check_is_fitted(self, "model_")
        hs = check_histories(histories, self.n_items_)
        hidden, _, _ = self.model_.encode_histories(hs)
        return hidden.data[:, -1, :].copy()

    def decision_function(self, histories, users=None):
        check_is_fitted(self, "model_")
        return self.model_.score(check_histories(histories, self.n_items_), users)

    def predict_proba(self, histories, users=None):
        """Next-item distribution over the item vocabulary, shape ``(n, n_items)``."""
        logits = self.decision_function(histories, users)
        with ad.no_grad():
            return ad.softmax(Tensor(logits)).data

    def predict(self, histories, k: int = 10, users=None):
        """Top-``k`` item ids per history, best first."""
        scores = self.decision_function(histories, users)
        return np.argsort(-scores, axis=1, kind="stable")[:, :k]

    def evaluate(self, X=None, split: str = "test", bucket_edges=None):
        check_is_fitted(self, "model_")
        ds = self.dataset_ if X is None else check_dataset(X)
        c = self._config()
        return evaluate(self.model_.score, ds.log, split, c.eval_negatives, c.seed, bucket_edges=bucket_edges)

    def score(self, X=None, y=None):
        """Test-split NDCG@10 under the sampled-negative protocol."""
        return self.evaluate(X, "test").ndcg[10]
