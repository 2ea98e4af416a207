"""scikit-learn style front end for client index generation."""

from __future__ import annotations

from typing import Sequence

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.exceptions import NotFittedError

from .embeddings import ClientShard
from .index_gen import (
    ClientIndex,
    IndexGenConfig,
    compute_client_indices,
    decompose,
    index_similarity_matrix,
    init_params,
    train,
)


def check_shards(shards) -> list[ClientShard]:
    """Validate a client list: non-empty shards, shared d_emb, unique ids, finite unit-ish data."""
    if isinstance(shards, ClientShard):
        shards = [shards]
    shards = list(shards)
    if not shards:
        raise ValueError("expected at least one ClientShard")
    for s in shards:
        if not isinstance(s, ClientShard):
            raise TypeError(f"expected ClientShard, got {type(s).__name__}")
        if s.n_samples == 0:
            raise ValueError(f"client {s.client_id} has no samples")
        if not np.isfinite(s.image_emb).all():
            raise ValueError(f"client {s.client_id} has non-finite embeddings")
    dims = {s.d_emb for s in shards}
    if len(dims) != 1:
        raise ValueError(f"shards disagree on embedding dimension: {sorted(dims)}")
    ids = [s.client_id for s in shards]
    if len(set(ids)) != len(ids):
        raise ValueError("duplicate client ids")
    return shards


def check_embeddings(X, d_emb: int | None = None) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[None, :]
    if X.ndim != 2:
        raise ValueError(f"expected a 2-d embedding batch, got shape {X.shape}")
    if d_emb is not None and X.shape[1] != d_emb:
        raise ValueError(f"expected {d_emb} embedding columns, got {X.shape[1]}")
    if not np.isfinite(X).all():
        raise ValueError("embeddings contain NaN or inf")
    return X


class ClientIndexer(TransformerMixin, BaseEstimator):
    """Learn the decomposition network on client shards and map shards to client indices.

    ``fit`` takes a list of :class:`ClientShard`; ``transform`` returns an
    (n_clients, 2 * d_i) array of [beta_f, beta_l] rows in ascending client
    id order.  Hyperparameters mirror :class:`IndexGenConfig`.
    """

    def __init__(self, strategy="global", epochs=200, batch_size=128, learning_rate=1e-2,
                 momentum=0.9, w_sim=1.0, w_orth=1.0, w_recon=1.0, w_div=1.0, rounds=100,
                 fraction=0.1, local_epochs=10, d_i=None, hidden_layers=2, decoder="linear",
                 normalize_orth=True, seed=0):
        self.strategy = strategy
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.momentum = momentum
        self.w_sim = w_sim
        self.w_orth = w_orth
        self.w_recon = w_recon
        self.w_div = w_div
        self.rounds = rounds
        self.fraction = fraction
        self.local_epochs = local_epochs
        self.d_i = d_i
        self.hidden_layers = hidden_layers
        self.decoder = decoder
        self.normalize_orth = normalize_orth
        self.seed = seed

    def _config(self) -> IndexGenConfig:
        return IndexGenConfig(**self.get_params())

    def fit(self, X, y=None):
        shards = check_shards(X)
        config = self._config()
        if config.strategy == "global" and config.epochs == 0:
            self.params_ = init_params(shards[0].d_emb, config)
        else:
            self.params_ = train(shards, config)
        self.n_features_in_ = shards[0].d_emb
        self.d_i_ = self.params_.d_i
        return self

    def _check_fitted(self):
        if not hasattr(self, "params_"):
            raise NotFittedError("ClientIndexer is not fitted yet; call fit first")

    def client_indices(self, X) -> list[ClientIndex]:
        self._check_fitted()
        shards = check_shards(X)
        if shards[0].d_emb != self.n_features_in_:
            raise ValueError(f"fitted on d_emb={self.n_features_in_}, got {shards[0].d_emb}")
        return compute_client_indices(self.params_, shards)

    def transform(self, X) -> np.ndarray:
        return np.array([idx.beta for idx in self.client_indices(X)])

    def sample_indices(self, embeddings) -> tuple[np.ndarray, np.ndarray]:
        """(Z, U) for a raw embedding batch."""
        self._check_fitted()
        batch = decompose(self.params_, check_embeddings(embeddings, self.n_features_in_))
        return batch.Z, batch.U

    def similarity(self, X, part: str = "feature") -> np.ndarray:
        return index_similarity_matrix(self.client_indices(X), part)


def fit_indices(shards: Sequence[ClientShard], **params) -> list[ClientIndex]:
    """Convenience: fit a :class:`ClientIndexer` and return the shards' indices."""
    return ClientIndexer(**params).fit(shards).client_indices(shards)
