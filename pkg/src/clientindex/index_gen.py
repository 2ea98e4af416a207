"""Client index generation by embedding decomposition.

Each image embedding D is fed (as [D, D]) through a decomposition network
whose output splits into a data encoding z and a sample feature index u.
Training pulls z toward the label embedding, keeps z and u orthogonal,
reconstructs D from [z, u] and spreads the u's apart within a batch.  A
client's index is the mean u over its samples together with the mean label
embedding.
"""

from __future__ import annotations

import csv
import dataclasses
import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .embeddings import ClientShard, derive_rng
from .smallnet import (
    DenseParams,
    MlpParams,
    Tensor,
    as_tensor,
    concat,
    cosine_rows,
    init_mlp,
    mlp_apply,
    normalize_rows,
    sgd_init,
    sgd_step,
    tree_allfinite,
    tree_map,
    value_and_grad,
)

STRATEGIES = ("global", "federated")
PARAMS_MAGIC = b"DSAI"
PARAMS_VERSION = 1
_ACT_CODES = {"identity": 0, "tanh": 1, "relu": 2}


class NumericalError(FloatingPointError):
    """Raised when training produces a non-finite loss."""


@dataclass
class DsaIgnParams:
    decomposition: MlpParams
    reconstruction: MlpParams

    @property
    def d_emb(self) -> int:
        return self.reconstruction.out_dim

    @property
    def d_i(self) -> int:
        return self.decomposition.out_dim // 2


@dataclass
class SampleIndexBatch:
    Z: np.ndarray
    U: np.ndarray


@dataclass
class ClientIndex:
    client_id: int
    beta_f: np.ndarray
    beta_l: np.ndarray
    n_samples: int = 0
    domain_id: int = -1

    @property
    def beta(self) -> np.ndarray:
        return np.concatenate([self.beta_f, self.beta_l])


@dataclass
class IndexGenConfig:
    epochs: int = 200
    batch_size: int = 128
    learning_rate: float = 1e-2
    momentum: float = 0.9
    w_sim: float = 1.0
    w_orth: float = 1.0
    w_recon: float = 1.0
    w_div: float = 1.0
    strategy: str = "global"
    rounds: int = 100
    fraction: float = 0.1
    local_epochs: int = 10
    d_i: int | None = None
    hidden_layers: int = 2
    decoder: str = "linear"
    normalize_orth: bool = True
    seed: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        for name in ("w_sim", "w_orth", "w_recon", "w_div"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if not 0.0 < self.fraction <= 1.0:
            raise ValueError("fraction must lie in (0, 1]")
        if self.strategy not in STRATEGIES:
            raise ValueError(f"strategy must be one of {STRATEGIES}")
        if self.decoder not in ("linear", "mlp"):
            raise ValueError("decoder must be 'linear' or 'mlp'")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if min(self.epochs, self.rounds, self.local_epochs) < 0:
            raise ValueError("epochs, rounds and local_epochs must be >= 0")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")


def init_params(d_emb: int, config: IndexGenConfig | None = None,
                rng: np.random.Generator | None = None) -> DsaIgnParams:
    """Decomposition MLP 2*d_emb -> (2*d_emb tanh)^h -> 2*d_i plus a reconstruction head."""
    config = config or IndexGenConfig()
    rng = rng if rng is not None else derive_rng(config.seed, 10)
    d_i = config.d_i or d_emb
    width = 2 * d_emb
    dims = [2 * d_emb] + [width] * config.hidden_layers + [2 * d_i]
    acts = ["tanh"] * config.hidden_layers + ["identity"]
    decomposition = init_mlp(dims, acts, rng)
    if config.decoder == "linear":
        reconstruction = init_mlp([2 * d_i, d_emb], ["identity"], rng)
    else:
        reconstruction = init_mlp([2 * d_i, 2 * d_i, d_emb], ["tanh", "identity"], rng)
    return DsaIgnParams(decomposition, reconstruction)


# --------------------------------------------------------------------------
# forward pieces (accept arrays or Tensors)


def _decompose(params: DsaIgnParams, D) -> tuple[Tensor, Tensor]:
    D = as_tensor(D)
    if D.value.ndim != 2 or D.shape[1] * 2 != params.decomposition.in_dim:
        raise ValueError(
            f"embedding batch has {D.shape[-1]} columns; network expects "
            f"{params.decomposition.in_dim // 2}"
        )
    out = mlp_apply(params.decomposition, concat([D, D], axis=1))
    d_i = out.shape[1] // 2
    return out[:, :d_i], out[:, d_i:]


def _reconstruct(params: DsaIgnParams, Z, U) -> Tensor:
    Z, U = as_tensor(Z), as_tensor(U)
    if Z.shape != U.shape:
        raise ValueError(f"Z {Z.shape} and U {U.shape} differ in shape")
    if 2 * Z.shape[1] != params.reconstruction.in_dim:
        raise ValueError(
            f"reconstruction expects {params.reconstruction.in_dim} inputs, got {2 * Z.shape[1]}"
        )
    return mlp_apply(params.reconstruction, concat([Z, U], axis=1))


def decompose(params: DsaIgnParams, D_batch: np.ndarray) -> SampleIndexBatch:
    Z, U = _decompose(params, np.asarray(D_batch, dtype=np.float64))
    return SampleIndexBatch(Z.value, U.value)


def reconstruct(params: DsaIgnParams, batch: SampleIndexBatch) -> np.ndarray:
    return _reconstruct(params, batch.Z, batch.U).value


# --------------------------------------------------------------------------
# losses


def _scalar_out(fn):
    """Return a float when no argument is a Tensor, else the Tensor itself."""
    def wrapper(*args, **kwargs):
        out = fn(*args, **kwargs)
        if any(isinstance(a, Tensor) for a in list(args) + list(kwargs.values())):
            return out
        return float(out.value)

    wrapper.__name__ = fn.__name__
    wrapper.__doc__ = fn.__doc__
    return wrapper


@_scalar_out
def loss_sim(Z, L_batch):
    """Mean of 1 - cos(z_j, L_j)."""
    return (1.0 - cosine_rows(Z, L_batch)).mean()


@_scalar_out
def loss_orth(Z, U, normalize: bool = True):
    """Entrywise L1 norm of Z U^T, divided by B^2 when ``normalize``."""
    Z, U = as_tensor(Z), as_tensor(U)
    total = (Z @ U.T).abs().sum()
    if normalize:
        total = total * (1.0 / Z.shape[0] ** 2)
    return total


@_scalar_out
def loss_recon(D_tilde, D):
    diff = as_tensor(D_tilde) - as_tensor(D)
    return diff.square().mean()


@_scalar_out
def loss_div(U):
    """(1/B) sum_j log sum_{k != j} exp(cos(u_j, u_k))."""
    U = as_tensor(U)
    B = U.shape[0]
    if B < 2:
        raise ValueError("loss_div needs a batch of at least 2 samples")
    Un = normalize_rows(U)
    cos = Un @ Un.T
    return cos.logsumexp(axis=1, mask=~np.eye(B, dtype=bool)).mean()


def _total_loss(params: DsaIgnParams, D, L, config: IndexGenConfig) -> Tensor:
    Z, U = _decompose(params, D)
    total = as_tensor(0.0)
    if config.w_sim:
        total = total + config.w_sim * loss_sim(Z, as_tensor(L))
    if config.w_orth:
        total = total + config.w_orth * loss_orth(Z, U, config.normalize_orth)
    if config.w_recon:
        total = total + config.w_recon * loss_recon(_reconstruct(params, Z, U), as_tensor(D))
    # a single-sample batch has no negatives; the diversity term is skipped
    if config.w_div and Z.shape[0] >= 2:
        total = total + config.w_div * loss_div(U)
    return total


def total_loss(params: DsaIgnParams, D_batch, L_batch, config: IndexGenConfig | None = None):
    """Weighted sum w_div*L_div + w_sim*L_sim + w_orth*L_orth + w_recon*L_recon."""
    config = config or IndexGenConfig()
    out = _total_loss(params, D_batch, L_batch, config)
    if isinstance(D_batch, Tensor) or not isinstance(params.reconstruction.layers[0].weight, np.ndarray):
        return out
    return float(out.value)


# --------------------------------------------------------------------------
# training


def _sgd_epochs(params: DsaIgnParams, D: np.ndarray, L: np.ndarray, epochs: int,
                config: IndexGenConfig, rng: np.random.Generator) -> DsaIgnParams:
    """Minibatch momentum SGD over (D, L), reshuffling every epoch."""
    state = sgd_init(params, config.learning_rate, config.momentum)
    n = D.shape[0]
    for _ in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            loss, grads = value_and_grad(
                lambda p: _total_loss(p, D[idx], L[idx], config), params)
            if not math.isfinite(loss):
                raise NumericalError(f"non-finite index-generation loss {loss}")
            params, state = sgd_step(params, grads, state)
    return params


def _check_shards(shards: Sequence[ClientShard]) -> None:
    if len(shards) == 0:
        raise ValueError("no client shards given")
    for s in shards:
        if s.n_samples < 1:
            raise ValueError(f"client {s.client_id} has no samples")


def server_pool(shards: Sequence[ClientShard], batch_size: int, seed: int):
    """Each client uploads min(batch_size, N_i) samples drawn without replacement."""
    D, L = [], []
    for s in sorted(shards, key=lambda s: s.client_id):
        rng = derive_rng(seed, 11, s.client_id)
        k = min(batch_size, s.n_samples)
        idx = np.sort(rng.choice(s.n_samples, size=k, replace=False))
        D.append(s.image_emb[idx])
        L.append(s.label_emb[idx])
    return np.concatenate(D), np.concatenate(L)


def train_global(shards: Sequence[ClientShard], config: IndexGenConfig,
                 params: DsaIgnParams | None = None) -> DsaIgnParams:
    _check_shards(shards)
    params = params if params is not None else init_params(shards[0].d_emb, config)
    D, L = server_pool(shards, config.batch_size, config.seed)
    return _sgd_epochs(params, D, L, config.epochs, config, derive_rng(config.seed, 12))


def average_params(params_list: Sequence, weights: Sequence[float]):
    """Weighted parameter average, accumulated in the given order."""
    acc = tree_map(lambda _, x: weights[0] * x, params_list[0])
    for w, p in zip(weights[1:], params_list[1:]):
        acc = tree_map(lambda _, a, x: a + w * x, acc, p)
    return acc


def select_uniform(n_clients: int, fraction: float, rng: np.random.Generator) -> np.ndarray:
    k = max(1, math.ceil(fraction * n_clients - 1e-12))
    return np.sort(rng.choice(n_clients, size=k, replace=False))


def train_federated(shards: Sequence[ClientShard], config: IndexGenConfig,
                    params: DsaIgnParams | None = None) -> DsaIgnParams:
    """FedAvg over the index-generation network using each client's full data."""
    _check_shards(shards)
    ordered = sorted(shards, key=lambda s: s.client_id)
    params = params if params is not None else init_params(ordered[0].d_emb, config)
    for t in range(config.rounds):
        chosen = select_uniform(len(ordered), config.fraction, derive_rng(config.seed, 13, t))
        local, sizes = [], []
        for k in chosen:
            s = ordered[k]
            rng = derive_rng(config.seed, 14, t, s.client_id)
            local.append(_sgd_epochs(params, s.image_emb, s.label_emb, config.local_epochs,
                                     config, rng))
            sizes.append(s.n_samples)
        total = float(sum(sizes))
        params = average_params(local, [n / total for n in sizes])
        if not tree_allfinite(params):
            raise NumericalError("non-finite parameters after federated averaging")
    return params


def train(shards: Sequence[ClientShard], config: IndexGenConfig) -> DsaIgnParams:
    if config.strategy == "global":
        return train_global(shards, config)
    return train_federated(shards, config)


# --------------------------------------------------------------------------
# client indices


def _exact_mean(X: np.ndarray) -> np.ndarray:
    # fsum is exactly rounded, so the mean does not depend on sample order
    return np.array([math.fsum(col) for col in X.T]) / X.shape[0]


def compute_client_index(params: DsaIgnParams, shard: ClientShard) -> ClientIndex:
    if shard.n_samples == 0:
        raise ValueError(f"client {shard.client_id} has no samples")
    U = decompose(params, shard.image_emb).U
    return ClientIndex(shard.client_id, _exact_mean(U), _label_mean(shard),
                       shard.n_samples, shard.domain_id)


def _label_mean(shard: ClientShard) -> np.ndarray:
    # mean of the label embeddings as class frequencies times table rows;
    # a single-class client gets its class embedding back exactly
    freq = np.bincount(shard.labels, minlength=shard.n_classes) / shard.n_samples
    present = np.flatnonzero(freq)
    table = shard.label_table
    return np.array([math.fsum(freq[c] * table[c, k] for c in present)
                     for k in range(table.shape[1])])


def compute_client_indices(params: DsaIgnParams, shards: Sequence[ClientShard]) -> list[ClientIndex]:
    return [compute_client_index(params, s) for s in sorted(shards, key=lambda s: s.client_id)]


def _index_part(idx: ClientIndex, part: str) -> np.ndarray:
    if part == "feature":
        return idx.beta_f
    if part == "label":
        return idx.beta_l
    if part == "full":
        return idx.beta
    raise ValueError(f"part must be 'feature', 'label' or 'full', not {part!r}")


def index_similarity_matrix(indices: Sequence[ClientIndex], part: str = "feature") -> np.ndarray:
    X = np.array([_index_part(i, part) for i in indices], dtype=np.float64)
    norms = np.linalg.norm(X, axis=1)
    if np.any(norms == 0):
        raise ValueError("zero-norm client index")
    Xn = X / norms[:, None]
    S = np.clip(Xn @ Xn.T, -1.0, 1.0)
    S = np.triu(S, 1)
    S = S + S.T
    np.fill_diagonal(S, 1.0)
    return S


def block_similarity(S: np.ndarray, groups: Sequence[int]) -> tuple[float, float]:
    """(mean within-group, mean cross-group) off-diagonal similarity."""
    g = np.asarray(groups)
    same = g[:, None] == g[None, :]
    off = ~np.eye(len(g), dtype=bool)
    within = S[same & off]
    cross = S[~same]
    return (float(within.mean()) if within.size else float("nan"),
            float(cross.mean()) if cross.size else float("nan"))


def mean_pairwise_cosine(U: np.ndarray) -> float:
    Un = U / np.linalg.norm(U, axis=1, keepdims=True)
    C = Un @ Un.T
    B = len(U)
    return float((C.sum() - np.trace(C)) / (B * (B - 1)))


# --------------------------------------------------------------------------
# persistence


def save_params(params: DsaIgnParams, path) -> None:
    chunks = [PARAMS_MAGIC, struct.pack("<I", PARAMS_VERSION)]
    for mlp in (params.decomposition, params.reconstruction):
        chunks.append(struct.pack("<I", len(mlp.layers)))
        for layer, act in zip(mlp.layers, mlp.activations):
            chunks.append(struct.pack("<III", layer.in_dim, layer.out_dim, _ACT_CODES[act]))
            chunks.append(layer.weight.astype("<f8").tobytes())
            chunks.append(layer.bias.astype("<f8").tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_params(path) -> DsaIgnParams:
    buf = Path(path).read_bytes()
    pos = 0
    codes = {v: k for k, v in _ACT_CODES.items()}

    def take(n: int, what: str) -> bytes:
        nonlocal pos
        if pos + n > len(buf):
            raise ValueError(f"{path}: truncated at byte {pos} reading {what}")
        out = buf[pos:pos + n]
        pos += n
        return out

    if take(4, "magic") != PARAMS_MAGIC:
        raise ValueError(f"{path}: not a DSAI parameter file")
    (version,) = struct.unpack("<I", take(4, "version"))
    if version != PARAMS_VERSION:
        raise ValueError(f"{path}: unsupported version {version}")
    mlps = []
    for name in ("decomposition", "reconstruction"):
        (n_layers,) = struct.unpack("<I", take(4, f"{name} layer count"))
        layers, acts = [], []
        for k in range(n_layers):
            i, o, a = struct.unpack("<III", take(12, f"{name} layer {k} header"))
            if a not in codes:
                raise ValueError(f"{path}: unknown activation code {a} at byte {pos - 4}")
            w = np.frombuffer(take(8 * i * o, f"{name} layer {k} weight"), "<f8").reshape(i, o)
            b = np.frombuffer(take(8 * o, f"{name} layer {k} bias"), "<f8")
            layers.append(DenseParams(w.astype(np.float64), b.astype(np.float64)))
            acts.append(codes[a])
        mlps.append(MlpParams(layers, acts))
    if pos != len(buf):
        raise ValueError(f"{path}: trailing bytes at {pos}")
    return DsaIgnParams(*mlps)


def write_index_csv(indices: Sequence[ClientIndex], path) -> None:
    d = len(indices[0].beta_f) if indices else 0
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["client_id", "domain_id", "part"] + [f"dim_{k}" for k in range(d)])
        for idx in indices:
            w.writerow([idx.client_id, idx.domain_id, "f"] + [repr(float(v)) for v in idx.beta_f])
            w.writerow([idx.client_id, idx.domain_id, "l"] + [repr(float(v)) for v in idx.beta_l])


def read_index_csv(path) -> list[ClientIndex]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0][:3] != ["client_id", "domain_id", "part"]:
        raise ValueError(f"{path}: missing client_id,domain_id,part header")
    d = len(rows[0]) - 3
    parts: dict[int, dict] = {}
    for line, row in enumerate(rows[1:], start=2):
        if len(row) != d + 3:
            raise ValueError(f"{path}:{line}: expected {d + 3} fields, got {len(row)}")
        try:
            cid, dom = int(row[0]), int(row[1])
            vec = np.array([float(v) for v in row[3:]])
        except ValueError as exc:
            raise ValueError(f"{path}:{line}: {exc}") from None
        if row[2] not in ("f", "l"):
            raise ValueError(f"{path}:{line}: part must be 'f' or 'l'")
        entry = parts.setdefault(cid, {"domain": dom})
        entry[row[2]] = vec
    out = []
    for cid in sorted(parts):
        entry = parts[cid]
        if "f" not in entry or "l" not in entry:
            raise ValueError(f"{path}: client {cid} lacks a feature or label row")
        out.append(ClientIndex(cid, entry["f"], entry["l"], 0, entry["domain"]))
    return out


def replace_config(config: IndexGenConfig, **changes) -> IndexGenConfig:
    return dataclasses.replace(config, **changes)
