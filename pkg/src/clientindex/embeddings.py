"""Synthetic CLIP-like (image, label) embedding data and client shard storage."""

from __future__ import annotations

import math
import struct
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

SHARD_MAGIC = b"FIDX"
SHARD_VERSION = 1
TRAIN_FRACTION = 0.8


def derive_rng(seed: int, *keys: int) -> np.random.Generator:
    """Independent generator for the stream identified by ``(seed, *keys)``."""
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in keys)))


@dataclass(frozen=True)
class EmbeddingPair:
    image_emb: np.ndarray
    label_emb: np.ndarray
    label: int


@dataclass
class ClientShard:
    """One client's embeddings, stored as arrays.

    ``image_emb`` is (N, d_emb), ``labels`` is (N,), and ``label_table`` holds
    the (n_classes, d_emb) label embeddings shared by every client.  Samples
    are stored in a seeded random order; the first ``n_train`` rows form the
    training split and the rest the test split.
    """

    client_id: int
    domain_id: int
    image_emb: np.ndarray
    labels: np.ndarray
    label_table: np.ndarray

    def __post_init__(self):
        self.image_emb = np.asarray(self.image_emb, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.label_table = np.asarray(self.label_table, dtype=np.float64)
        if self.image_emb.ndim != 2 or self.image_emb.shape[0] != self.labels.shape[0]:
            raise ValueError(f"client {self.client_id}: image_emb rows must match labels")
        if self.image_emb.shape[1] != self.label_table.shape[1]:
            raise ValueError(f"client {self.client_id}: image and label dims differ")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.n_classes):
            raise ValueError(f"client {self.client_id}: label out of range")

    @property
    def n_samples(self) -> int:
        return int(self.labels.shape[0])

    @property
    def n_classes(self) -> int:
        return int(self.label_table.shape[0])

    @property
    def d_emb(self) -> int:
        return int(self.image_emb.shape[1])

    @property
    def label_emb(self) -> np.ndarray:
        return self.label_table[self.labels]

    @property
    def n_train(self) -> int:
        return train_size(self.n_samples)

    @property
    def pairs(self) -> list[EmbeddingPair]:
        return list(self.iter_pairs())

    def iter_pairs(self) -> Iterator[EmbeddingPair]:
        for d, y in zip(self.image_emb, self.labels):
            yield EmbeddingPair(d, self.label_table[y], int(y))

    def split(self, part: str) -> tuple[np.ndarray, np.ndarray]:
        """(embeddings, labels) of the ``"train"``, ``"test"`` or ``"all"`` split."""
        k = self.n_train
        if part == "train":
            return self.image_emb[:k], self.labels[:k]
        if part == "test":
            return self.image_emb[k:], self.labels[k:]
        if part == "all":
            return self.image_emb, self.labels
        raise ValueError(f"unknown split {part!r}")


def train_size(n: int) -> int:
    if n <= 1:
        return n
    return min(n - 1, max(1, int(math.floor(TRAIN_FRACTION * n))))


@dataclass
class SynthesisSpec:
    n_classes: int = 5
    n_domains: int = 1
    clients_per_domain: int = 10
    samples_per_client: tuple[int, int] = (100, 100)
    d_emb: int = 32
    label_align: float = 1.0
    domain_strength: float = 0.5
    noise_sigma: float = 0.2
    dirichlet_alpha: float | None = None
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.samples_per_client, int):
            self.samples_per_client = (self.samples_per_client, self.samples_per_client)
        self.samples_per_client = tuple(int(v) for v in self.samples_per_client)
        self.validate()

    def validate(self) -> None:
        for name in ("n_classes", "n_domains", "clients_per_domain", "d_emb"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be >= 1")
        lo, hi = self.samples_per_client
        if lo < 1 or hi < lo:
            raise ValueError("samples_per_client must be a range (lo, hi) with 1 <= lo <= hi")
        if self.d_emb < self.n_classes + self.n_domains:
            raise ValueError(
                f"d_emb={self.d_emb} must be >= n_classes + n_domains "
                f"= {self.n_classes + self.n_domains}"
            )
        if not 0.0 <= self.label_align <= 1.0:
            raise ValueError("label_align must lie in [0, 1]")
        if self.domain_strength < 0 or self.noise_sigma < 0:
            raise ValueError("domain_strength and noise_sigma must be >= 0")
        if self.dirichlet_alpha is not None and self.dirichlet_alpha <= 0:
            raise ValueError("dirichlet_alpha must be > 0")
        if self.label_align == 0 and self.domain_strength == 0 and self.noise_sigma == 0:
            raise ValueError("all embedding components are zero")

    @property
    def n_clients(self) -> int:
        return self.n_domains * self.clients_per_domain

    def to_dict(self) -> dict:
        d = asdict(self)
        d["samples_per_client"] = list(self.samples_per_client)
        return d


def _orthonormal_rows(draws: np.ndarray, basis: np.ndarray | None = None) -> np.ndarray:
    """Modified Gram-Schmidt (two passes) of ``draws`` against ``basis`` and each other."""
    d = draws.shape[1]
    out = [] if basis is None else [b for b in basis]
    n_fixed = len(out)
    for v in draws:
        w = v.copy()
        for _ in range(2):
            for b in out:
                w -= (w @ b) * b
        norm = np.linalg.norm(w)
        if norm < 1e-10:
            raise ValueError("degenerate draw during orthonormalisation")
        out.append(w / norm)
    return np.array(out[n_fixed:]).reshape(-1, d)


def synth_label_embeddings(n_classes: int, d_emb: int, seed: int) -> np.ndarray:
    """``n_classes`` orthonormal unit vectors in R^d_emb, deterministic per seed."""
    if n_classes < 1:
        raise ValueError("n_classes must be >= 1")
    if n_classes > d_emb:
        raise ValueError(f"cannot fit {n_classes} orthonormal label embeddings in {d_emb} dims")
    rng = derive_rng(seed, 0)
    return _orthonormal_rows(rng.standard_normal((n_classes, d_emb)))


def synth_domain_directions(label_table: np.ndarray, n_domains: int, seed: int) -> np.ndarray:
    """Unit domain directions orthogonal to every label embedding and to each other."""
    rng = derive_rng(seed, 1)
    return _orthonormal_rows(rng.standard_normal((n_domains, label_table.shape[1])), label_table)


def sample_dirichlet(alpha: float, k: int, rng: np.random.Generator) -> np.ndarray:
    """Dirichlet(alpha, ..., alpha) via normalised Gamma draws."""
    g = rng.standard_gamma(alpha, size=k)
    total = g.sum()
    if total == 0.0:  # every Gamma draw underflowed; pick one coordinate
        g = np.zeros(k)
        g[rng.integers(k)] = 1.0
        total = 1.0
    return g / total


def client_class_proportions(spec: SynthesisSpec) -> np.ndarray:
    """Per-client class proportions (n_clients, n_classes), in client order."""
    if spec.dirichlet_alpha is None:
        return np.full((spec.n_clients, spec.n_classes), 1.0 / spec.n_classes)
    rng = derive_rng(spec.seed, 2)
    return np.array([sample_dirichlet(spec.dirichlet_alpha, spec.n_classes, rng)
                     for _ in range(spec.n_clients)])


def synth_client_shards(spec: SynthesisSpec) -> list[ClientShard]:
    """Generate ``n_domains * clients_per_domain`` shards; domain k owns a contiguous id block."""
    spec.validate()
    labels_table = synth_label_embeddings(spec.n_classes, spec.d_emb, spec.seed)
    domains = synth_domain_directions(labels_table, spec.n_domains, spec.seed)
    props = client_class_proportions(spec)
    lo, hi = spec.samples_per_client
    shards = []
    for cid in range(spec.n_clients):
        domain = cid // spec.clients_per_domain
        rng = derive_rng(spec.seed, 3, cid)
        n = int(rng.integers(lo, hi + 1))
        if spec.dirichlet_alpha is None:
            y = np.arange(n) % spec.n_classes
            rng.shuffle(y)
        else:
            y = rng.choice(spec.n_classes, size=n, p=props[cid])
        noise = rng.standard_normal((n, spec.d_emb))
        raw = (spec.label_align * labels_table[y]
               + spec.domain_strength * domains[domain]
               + spec.noise_sigma * noise)
        norms = np.linalg.norm(raw, axis=1, keepdims=True)
        if np.any(norms == 0):
            raise ValueError("generated a zero image embedding")
        shards.append(ClientShard(cid, domain, raw / norms, y, labels_table))
    return shards


def dirichlet_partition(labels: Sequence[int], alpha: float, n_clients: int, seed: int,
                        max_redraws: int = 100) -> list[np.ndarray]:
    """Split sample indices over clients with per-class Dirichlet(alpha) proportions.

    Every sample goes to exactly one client.  If a draw leaves a client empty
    the whole set of class proportions is redrawn, up to ``max_redraws``
    times; after that, single samples are moved from the largest client.
    """
    labels = np.asarray(labels, dtype=np.int64)
    if alpha <= 0:
        raise ValueError("alpha must be > 0")
    if n_clients < 1:
        raise ValueError("n_clients must be >= 1")
    if labels.size < n_clients:
        raise ValueError(f"{labels.size} samples cannot fill {n_clients} clients")
    rng = derive_rng(seed, 4)
    classes = np.unique(labels)
    by_class = {c: rng.permutation(np.flatnonzero(labels == c)) for c in classes}

    parts: list[list[int]] = []
    for _ in range(max_redraws + 1):
        parts = [[] for _ in range(n_clients)]
        for c in classes:
            idx = by_class[c]
            p = sample_dirichlet(alpha, n_clients, rng)
            cuts = (np.cumsum(p)[:-1] * idx.size).astype(int)
            for k, chunk in enumerate(np.split(idx, cuts)):
                parts[k].extend(chunk.tolist())
        if all(parts):
            break
    else:
        for k in range(n_clients):
            if not parts[k]:
                donor = max(range(n_clients), key=lambda j: (len(parts[j]), -j))
                parts[k].append(parts[donor].pop())
    return [np.sort(np.array(p, dtype=np.int64)) for p in parts]


# --------------------------------------------------------------------------
# binary shard files


class ShardFormatError(ValueError):
    pass


def save_shards(shards: Sequence[ClientShard], path) -> None:
    chunks = [SHARD_MAGIC, struct.pack("<II", SHARD_VERSION, len(shards))]
    for s in shards:
        chunks.append(struct.pack("<IIIII", s.client_id, s.domain_id, s.n_samples,
                                  s.d_emb, s.n_classes))
        rec = np.empty(s.n_samples, dtype=[("label", "<u4"), ("emb", "<f8", (s.d_emb,))])
        rec["label"] = s.labels
        rec["emb"] = s.image_emb
        chunks.append(rec.tobytes())
        chunks.append(s.label_table.astype("<f8").tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_shards(path) -> list[ClientShard]:
    buf = Path(path).read_bytes()
    pos = 0

    def take(n: int, what: str) -> bytes:
        nonlocal pos
        if pos + n > len(buf):
            raise ShardFormatError(
                f"{path}: truncated at byte {pos} reading {what} "
                f"(need {n} bytes, {len(buf) - pos} left)"
            )
        out = buf[pos:pos + n]
        pos += n
        return out

    if take(4, "magic") != SHARD_MAGIC:
        raise ShardFormatError(f"{path}: bad magic at byte 0")
    version, n_clients = struct.unpack("<II", take(8, "header"))
    if version != SHARD_VERSION:
        raise ShardFormatError(f"{path}: unsupported version {version} at byte 4")
    shards = []
    for k in range(n_clients):
        cid, dom, n, d, c = struct.unpack("<IIIII", take(20, f"client {k} header"))
        if d == 0 or c == 0:
            raise ShardFormatError(f"{path}: client {k} header at byte {pos - 20} has zero dims")
        dtype = np.dtype([("label", "<u4"), ("emb", "<f8", (d,))])
        rec = np.frombuffer(take(n * dtype.itemsize, f"client {k} samples"), dtype=dtype)
        table = np.frombuffer(take(c * d * 8, f"client {k} label table"), dtype="<f8")
        labels = rec["label"].astype(np.int64)
        if labels.size and labels.max() >= c:
            raise ShardFormatError(f"{path}: client {k} has label >= n_classes={c}")
        shards.append(ClientShard(cid, dom, rec["emb"].astype(np.float64), labels,
                                  table.reshape(c, d).astype(np.float64)))
    if pos != len(buf):
        raise ShardFormatError(f"{path}: {len(buf) - pos} trailing bytes at byte {pos}")
    return shards
