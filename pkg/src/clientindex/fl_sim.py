"""Federated training of an MLP classifier over client embeddings.

Round loop: pick clients, train locally with momentum SGD, weight and
average the returned parameters, apply a FedAvg or FedAvgM server step and
evaluate every client's test split.  Client indices can switch on the three
enhancements from :mod:`clientindex.enhancements`.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import enhancements as enh
from .embeddings import ClientShard, derive_rng
from .index_gen import ClientIndex, NumericalError, average_params
from .smallnet import (
    DenseParams,
    MlpParams,
    Tensor,
    cross_entropy,
    dense,
    glorot_dense,
    init_mlp,
    mlp_apply,
    sgd_init,
    sgd_step,
    tree_allfinite,
    tree_map,
    value_and_grad,
)

logger = logging.getLogger(__name__)

# stream ids for derive_rng
_INIT, _SELECT, _LOCAL = 20, 21, 22


@dataclass
class GlobalModel:
    backbone: MlpParams
    head: DenseParams
    local_reg: enh.LocalRegParams | None = None

    @property
    def feature_dim(self) -> int:
        return self.backbone.out_dim


def init_model(d_emb: int, n_classes: int, hidden: int = 64,
               rng: np.random.Generator | None = None) -> GlobalModel:
    rng = rng if rng is not None else np.random.default_rng(0)
    backbone = init_mlp([d_emb, hidden], ["tanh"], rng)
    return GlobalModel(backbone, glorot_dense(hidden, n_classes, rng))


def forward(model: GlobalModel, X) -> tuple[Tensor, Tensor]:
    """(features z, class logits) for a batch."""
    z = mlp_apply(model.backbone, X)
    return z, dense(model.head, z)


def predict(model: GlobalModel, X: np.ndarray) -> np.ndarray:
    _, logits = forward(model, np.asarray(X, dtype=np.float64))
    return logits.value.argmax(axis=1)


@dataclass
class FlConfig:
    rounds: int = 100
    fraction: float = 0.1
    local_epochs: int = 5
    batch_size: int = 32
    lr: float = 1e-2
    momentum: float = 0.9
    weight_decay: float = 5e-5
    hidden: int = 64
    server: str = "fedavg"
    server_momentum: float = 0.5
    seed: int = 0
    workers: int = 1
    sampling: bool = False
    tau: float = 1.0
    aggregation: bool = False
    gamma: float = 0.5
    lambda1: float = 1.0
    local_reg: bool = False
    reg_weight: float = 1.0
    kl_direction: str = "main_proj"
    stop_grad_main: bool = True

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if not 0.0 < self.fraction <= 1.0:
            raise ValueError("fraction must lie in (0, 1]")
        if self.rounds < 1:
            raise ValueError("rounds must be >= 1")
        if self.local_epochs < 0 or self.batch_size < 1:
            raise ValueError("local_epochs must be >= 0 and batch_size >= 1")
        if self.server not in ("fedavg", "fedavgm"):
            raise ValueError("server must be 'fedavg' or 'fedavgm'")
        if self.server_momentum < 0:
            raise ValueError("server_momentum must be >= 0")
        if self.tau <= 0 or self.lambda1 <= 0:
            raise ValueError("tau and lambda1 must be > 0")
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError("gamma must lie in [0, 1]")
        if self.reg_weight < 0:
            raise ValueError("reg_weight must be >= 0")
        if self.workers < 1:
            raise ValueError("workers must be >= 1")

    @property
    def enhanced(self) -> bool:
        return self.sampling or self.aggregation or self.local_reg

    def without_enhancements(self) -> FlConfig:
        return dataclasses.replace(self, sampling=False, aggregation=False, local_reg=False)


@dataclass
class ClientUpdate:
    client_id: int
    params: GlobalModel
    n_samples: int
    train_loss: float


@dataclass
class RoundLog:
    round: int
    client_ids: list[int]
    probs: list[float]
    agg_weights: list[float]
    mean_acc: float
    client_accs: dict[int, float] = field(default_factory=dict)


@dataclass
class ExperimentResult:
    rounds: list[RoundLog]
    model: GlobalModel | None = None

    @property
    def accuracies(self) -> list[float]:
        return [r.mean_acc for r in self.rounds]

    @property
    def best_accuracy(self) -> float:
        return max(self.accuracies)

    @property
    def best_round(self) -> int:
        accs = self.accuracies
        return self.rounds[accs.index(max(accs))].round

    @property
    def final_accuracy(self) -> float:
        return self.rounds[-1].mean_acc


# --------------------------------------------------------------------------
# local training


def _local_loss(model: GlobalModel, X: np.ndarray, y: np.ndarray) -> Tensor:
    z, logits = forward(model, X)
    loss = cross_entropy(logits, y)
    if model.local_reg is not None:
        loss = loss + enh.local_reg_term(z, logits, model.local_reg)
    return loss


def local_train(model: GlobalModel, shard: ClientShard, config: FlConfig,
                rng: np.random.Generator) -> ClientUpdate:
    """``local_epochs`` of shuffled minibatch SGD on the shard's training split.

    The regulariser is active whenever ``model.local_reg`` is set.  The
    input model is left untouched.
    """
    X, y = shard.split("train")
    if len(y) == 0:
        raise ValueError(f"client {shard.client_id} has no training samples")
    params = model
    state = sgd_init(params, config.lr, config.momentum, config.weight_decay)
    losses = []
    for _ in range(config.local_epochs):
        order = rng.permutation(len(y))
        for start in range(0, len(y), config.batch_size):
            idx = order[start:start + config.batch_size]
            loss, grads = value_and_grad(lambda p: _local_loss(p, X[idx], y[idx]), params)
            if not math.isfinite(loss):
                raise NumericalError(f"client {shard.client_id}: non-finite loss {loss}")
            losses.append(loss)
            params, state = sgd_step(params, grads, state)
    if not losses:
        params = tree_map(lambda _, x: x.copy(), model)
        losses.append(float(_local_loss(model, X, y).value))
    return ClientUpdate(shard.client_id, params, len(y), float(np.mean(losses)))


# --------------------------------------------------------------------------
# aggregation and server steps


def aggregate(updates: Sequence[ClientUpdate], weights: Sequence[float]) -> GlobalModel:
    """Parameter-wise weighted mean, summed in ascending client_id order."""
    if len(updates) != len(weights) or not updates:
        raise ValueError("need one weight per update and at least one update")
    w = np.asarray(weights, dtype=np.float64)
    if abs(w.sum() - 1.0) > 1e-9 or np.any(w < 0):
        raise ValueError(f"aggregation weights must be a probability vector (sum={w.sum()!r})")
    order = sorted(range(len(updates)), key=lambda k: updates[k].client_id)
    return average_params([updates[k].params for k in order], [float(w[k]) for k in order])


def server_step_fedavg(prev: GlobalModel, aggregated: GlobalModel) -> GlobalModel:
    return aggregated


def server_step_fedavgm(prev: GlobalModel, aggregated: GlobalModel, buffer,
                        server_momentum: float):
    """Server momentum on the pseudo-gradient prev - aggregated.

    buffer <- m * buffer + (prev - aggregated);  new = prev - buffer,
    evaluated as aggregated - m * old_buffer so that m = 0 is exactly FedAvg.
    """
    if buffer is None:
        buffer = tree_map(lambda _, x: np.zeros_like(x), prev)
    new_buffer = tree_map(lambda _, b, p, a: server_momentum * b + (p - a), buffer, prev, aggregated)
    new_model = tree_map(lambda _, a, b: a - server_momentum * b, aggregated, buffer)
    return new_model, new_buffer


# --------------------------------------------------------------------------
# evaluation


def evaluate(model: GlobalModel, shards: Sequence[ClientShard],
             split: str = "test") -> tuple[float, dict[int, float]]:
    """Unweighted mean over clients of per-client accuracy on ``split``."""
    accs: dict[int, float] = {}
    for s in sorted(shards, key=lambda s: s.client_id):
        X, y = s.split(split)
        if len(y) == 0:
            warnings.warn(f"client {s.client_id} has an empty {split} split; excluded", stacklevel=2)
            continue
        accs[s.client_id] = float(np.mean(predict(model, X) == y))
    if not accs:
        raise ValueError(f"no client has a non-empty {split} split")
    return float(np.mean(list(accs.values()))), accs


# --------------------------------------------------------------------------
# experiment loop


def _num_selected(n_clients: int, fraction: float) -> int:
    return max(1, math.ceil(fraction * n_clients - 1e-12))


def initial_model(shards: Sequence[ClientShard], indices: Sequence[ClientIndex] | None,
                  config: FlConfig) -> GlobalModel:
    """The round-0 global model; ``indices`` must follow ascending client id when local_reg is on."""
    first = min(shards, key=lambda s: s.client_id)
    model = init_model(first.d_emb, first.n_classes, config.hidden, derive_rng(config.seed, _INIT))
    if config.local_reg:
        if not indices:
            raise ValueError("the local regulariser needs client indices")
        indices = sorted(indices, key=lambda i: i.client_id)
        model.local_reg = enh.init_local_reg(config.hidden, first.n_classes, indices,
                                             derive_rng(config.seed, _INIT, 1), config.reg_weight,
                                             kl_direction=config.kl_direction,
                                             stop_grad_main=config.stop_grad_main)
    return model


def run_experiment(shards: Sequence[ClientShard], indices: Sequence[ClientIndex] | None,
                   config: FlConfig) -> ExperimentResult:
    if config.enhanced and not indices:
        raise ValueError("enhancements need client indices")
    shards = sorted(shards, key=lambda s: s.client_id)
    M = len(shards)
    if M == 0:
        raise ValueError("no client shards")
    if indices is not None and config.enhanced:
        by_id = {i.client_id: i for i in indices}
        missing = [s.client_id for s in shards if s.client_id not in by_id]
        if missing:
            raise ValueError(f"no client index for clients {missing}")
        indices = [by_id[s.client_id] for s in shards]
    sizes = [s.n_train for s in shards]
    K = _num_selected(M, config.fraction)

    model = initial_model(shards, indices, config)
    sampler = enh.SamplerState(M, config.tau) if config.sampling else None
    agg_state = enh.AggregatorState.zeros(M, config.gamma, config.lambda1) if config.aggregation else None
    server_buffer = None
    logs: list[RoundLog] = []
    pool = ThreadPoolExecutor(config.workers) if config.workers > 1 else None

    try:
        for t in range(1, config.rounds + 1):
            rng = derive_rng(config.seed, _SELECT, t)
            if sampler is not None:
                chosen, probs = enh.sample_clients(sampler, indices, K, t, rng, sizes)
                chosen = sorted(chosen)
            else:
                chosen = sorted(int(c) for c in rng.choice(M, size=K, replace=False))
                probs = np.full(M, 1.0 / M)

            def train_one(pos: int) -> ClientUpdate:
                s = shards[pos]
                return local_train(model, s, config, derive_rng(config.seed, _LOCAL, t, s.client_id))

            updates = list(pool.map(train_one, chosen)) if pool else [train_one(c) for c in chosen]

            selected = [(c, sizes[c]) for c in chosen]
            if agg_state is not None:
                agg_state = enh.update_accumulator(agg_state, indices, selected)
                weights = enh.aggregation_weights(agg_state, selected)
            else:
                n = np.array([u.n_samples for u in updates], dtype=np.float64)
                weights = n / n.sum()

            aggregated = aggregate(updates, weights)
            if config.server == "fedavgm":
                model, server_buffer = server_step_fedavgm(model, aggregated, server_buffer,
                                                           config.server_momentum)
            else:
                model = server_step_fedavg(model, aggregated)
            if not tree_allfinite(model):
                raise NumericalError(f"non-finite global model after round {t}")

            mean_acc, accs = evaluate(model, shards)
            logs.append(RoundLog(t, [shards[c].client_id for c in chosen],
                                 [float(p) for p in probs], [float(w) for w in weights],
                                 mean_acc, accs))
            logger.debug("round %d clients %s acc %.4f", t, logs[-1].client_ids, mean_acc)
    finally:
        if pool is not None:
            pool.shutdown()
    return ExperimentResult(logs, model)


# --------------------------------------------------------------------------
# output files


def _fmt(values) -> str:
    return ";".join(repr(float(v)) for v in values)


def write_round_csv(result: ExperimentResult, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["round", "client_ids", "probs", "agg_weights", "mean_acc"])
        for r in result.rounds:
            w.writerow([r.round, ";".join(str(c) for c in r.client_ids), _fmt(r.probs),
                        _fmt(r.agg_weights), repr(float(r.mean_acc))])


def summary_dict(result: ExperimentResult, config: FlConfig) -> dict:
    return {
        "best_accuracy": result.best_accuracy,
        "best_round": result.best_round,
        "final_accuracy": result.final_accuracy,
        "rounds": len(result.rounds),
        "config": dataclasses.asdict(config),
    }


def write_summary_json(result: ExperimentResult, config: FlConfig, path) -> None:
    with open(path, "w") as fh:
        json.dump(summary_dict(result, config), fh, indent=2, sort_keys=True)
        fh.write("\n")
