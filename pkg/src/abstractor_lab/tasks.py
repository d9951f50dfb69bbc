"""Synthetic relational tasks: object sorting, pairwise order, SET, and corruptions."""

from __future__ import annotations

import dataclasses
import itertools
import json
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np

from .errors import CapacityError, CheckpointError, ContractError
from .rng import Rng

N_A, N_B = 4, 12
DIM_A, DIM_B = 4, 8


# object sorting ---------------------------------------------------------------
@dataclass
class ObjectUniverse:
    """48 objects formed as (a, b) attribute pairs, ordered by A then B.

    Object ``i`` is ``(a_{i // 12}, b_{i % 12})``. ``a_order[k]`` is the rank
    of attribute value a_k in the primary order, ``b_order[k]`` the rank of
    b_k in the secondary order.
    """

    objects: np.ndarray
    a_order: np.ndarray
    b_order: np.ndarray
    seed: int

    @property
    def n_objects(self) -> int:
        return self.objects.shape[0]

    def attribute_index(self, i):
        return np.divmod(np.asarray(i), N_B)

    def rank(self, i) -> np.ndarray:
        """Position of object(s) ``i`` in the total order."""
        alpha, beta = self.attribute_index(i)
        return self.a_order[alpha] * N_B + self.b_order[beta]

    def precedes(self, i: int, j: int) -> bool:
        ai, bi = divmod(int(i), N_B)
        aj, bj = divmod(int(j), N_B)
        if self.a_order[ai] != self.a_order[aj]:
            return bool(self.a_order[ai] < self.a_order[aj])
        return bool(self.b_order[bi] < self.b_order[bj])


def gen_object_universe(seed: int) -> ObjectUniverse:
    rng = Rng(seed)
    a = rng.normal((N_A, DIM_A))
    b = rng.normal((N_B, DIM_B))
    objects = np.concatenate([np.repeat(a, N_B, axis=0), np.tile(b, (N_A, 1))], axis=1).astype(np.float32)
    return ObjectUniverse(objects, np.arange(N_A), np.arange(N_B), seed)


def reshuffle_primary_order(u: ObjectUniverse, seed: int) -> ObjectUniverse:
    """Same objects and B order; the A order is replaced by a random permutation."""
    perm = Rng(seed).permutation(N_A)
    return ObjectUniverse(u.objects.copy(), perm, u.b_order.copy(), u.seed)


@dataclass
class SortingSplit:
    indices: np.ndarray  # (n, seq_len) object ids
    inputs: np.ndarray  # (n, seq_len, 12)
    targets: np.ndarray  # (n, seq_len) argsort

    def __len__(self) -> int:
        return len(self.indices)

    def subset(self, rows) -> "SortingSplit":
        return SortingSplit(self.indices[rows], self.inputs[rows], self.targets[rows])


@dataclass
class SortingDataset:
    train: SortingSplit
    val: SortingSplit
    test: SortingSplit
    seed: int
    universe_seed: int

    def splits(self):
        return {"train": self.train, "val": self.val, "test": self.test}


def argsort_targets(u: ObjectUniverse, indices: np.ndarray) -> np.ndarray:
    return np.argsort(u.rank(indices), axis=-1, kind="stable")


def make_sorting_split(u: ObjectUniverse, indices: np.ndarray) -> SortingSplit:
    indices = np.asarray(indices, dtype=np.int64)
    return SortingSplit(indices, u.objects[indices], argsort_targets(u, indices))


def gen_sorting_dataset(
    u: ObjectUniverse, n_train: int, n_val: int, n_test: int, seq_len: int = 10, seed: int = 0
) -> SortingDataset:
    """Uniform sequences of distinct objects; no sequence appears in two splits."""
    if seq_len > u.n_objects:
        raise CapacityError(f"cannot draw {seq_len} distinct objects from {u.n_objects}")
    total = n_train + n_val + n_test
    available = 1
    for k in range(seq_len):
        available *= u.n_objects - k
    if total > available:
        raise CapacityError(f"requested {total} distinct sequences, only {available} exist")
    rng = Rng(seed)
    seen: set[bytes] = set()
    rows = []
    while len(rows) < total:
        batch = np.argsort(rng.random((total - len(rows), u.n_objects)), axis=1)[:, :seq_len]
        for row in batch:
            key = row.tobytes()
            if key not in seen:
                seen.add(key)
                rows.append(row)
    idx = np.array(rows, dtype=np.int64)
    return SortingDataset(
        make_sorting_split(u, idx[:n_train]),
        make_sorting_split(u, idx[n_train : n_train + n_val]),
        make_sorting_split(u, idx[n_train + n_val :]),
        seed,
        u.seed,
    )


def relabel(dataset: SortingDataset, u: ObjectUniverse) -> SortingDataset:
    """Same sequences, targets recomputed under universe ``u``'s order."""
    return SortingDataset(
        *(make_sorting_split(u, s.indices) for s in (dataset.train, dataset.val, dataset.test)),
        dataset.seed,
        u.seed,
    )


# pairwise order -----------------------------------------------------------------
@dataclass
class OrderPairDataset:
    objects: np.ndarray  # (N, d)
    pairs: np.ndarray  # (N*N, 2)
    labels: np.ndarray  # (N*N,)
    split: np.ndarray  # (N*N,) 0 train, 1 val, 2 test
    seed: int

    def part(self, name: str):
        code = {"train": 0, "val": 1, "test": 2}[name]
        sel = self.split == code
        return self.objects[self.pairs[sel]], self.labels[sel]


def split_sizes(n: int, fracs) -> tuple[int, int, int]:
    """Round train and val to nearest; the remainder goes to test."""
    fracs = tuple(float(f) for f in fracs)
    if abs(sum(fracs) - 1.0) > 1e-9:
        raise ContractError(f"split fractions must sum to 1, got {fracs}")
    n_train = int(np.floor(n * fracs[0] + 0.5))
    n_val = int(np.floor(n * fracs[1] + 0.5))
    return n_train, n_val, n - n_train - n_val


def gen_order_pairs(N: int = 32, d: int = 8, split_fracs=(0.50, 0.15, 0.35), seed: int = 0) -> OrderPairDataset:
    """N Gaussian objects with planted order o_0 < o_1 < ...; label(i, j) = [i < j]."""
    rng = Rng(seed)
    objects = rng.normal((N, d)).astype(np.float32)
    i, j = np.meshgrid(np.arange(N), np.arange(N), indexing="ij")
    pairs = np.stack([i.ravel(), j.ravel()], axis=1)
    labels = (pairs[:, 0] < pairs[:, 1]).astype(np.int64)
    n_train, n_val, _ = split_sizes(len(pairs), split_fracs)
    perm = rng.permutation(len(pairs))
    split = np.full(len(pairs), 2, dtype=np.int64)
    split[perm[:n_train]] = 0
    split[perm[n_train : n_train + n_val]] = 1
    return OrderPairDataset(objects, pairs, labels, split, seed)


# SET ------------------------------------------------------------------------------
N_ATTRIBUTES = 4
N_VALUES = 3
PAIRS = ((0, 1), (0, 2), (1, 2))


def _check_cards(cards) -> np.ndarray:
    cards = np.asarray(cards)
    if cards.shape[-2:] != (3, N_ATTRIBUTES):
        raise ContractError(f"a triple is 3 x {N_ATTRIBUTES}, got shape {cards.shape}")
    if np.any((cards < 0) | (cards > 2)):
        raise ContractError("card attributes must lie in {0, 1, 2}")
    return cards


def is_set(cards) -> bool:
    """Every attribute is all-equal or all-distinct across the three cards."""
    cards = _check_cards(cards)
    for col in cards.T:
        if len(set(col.tolist())) == 2:
            return False
    return True


def is_set_mod3(cards) -> bool:
    """Equivalent test: every attribute column sums to 0 mod 3."""
    cards = _check_cards(cards)
    return bool(np.all(cards.sum(axis=0) % 3 == 0))


@lru_cache(maxsize=1)
def all_cards() -> np.ndarray:
    return np.array(list(itertools.product(range(N_VALUES), repeat=N_ATTRIBUTES)), dtype=np.int64)


def card_id(card) -> int:
    card = np.asarray(card)
    return int(((card[..., 0] * 3 + card[..., 1]) * 3 + card[..., 2]) * 3 + card[..., 3])


def one_hot_cards(cards: np.ndarray) -> np.ndarray:
    """(..., 4) attribute values -> (..., 12) one-hot, attribute k in slots 3k..3k+2."""
    cards = np.asarray(cards)
    out = np.zeros(cards.shape[:-1] + (N_ATTRIBUTES * N_VALUES,), dtype=np.float32)
    for k in range(N_ATTRIBUTES):
        np.put_along_axis(out, (3 * k + cards[..., k])[..., None], 1.0, axis=-1)
    return out


@dataclass
class SetTriple:
    cards: np.ndarray  # (3, 4)
    label: bool
    embedding: np.ndarray = field(default=None, repr=False)  # (3, 12)

    def __post_init__(self):
        if self.embedding is None:
            self.embedding = one_hot_cards(self.cards)


def symbolic_relations(triple) -> np.ndarray:
    """12 same/different bits: for attribute k and pair p, bit 3k+p is 1 when the pair agrees."""
    cards = triple.cards if isinstance(triple, SetTriple) else np.asarray(triple)
    cards = _check_cards(cards)
    bits = np.zeros(N_ATTRIBUTES * len(PAIRS), dtype=np.int64)
    for k in range(N_ATTRIBUTES):
        for p, (i, j) in enumerate(PAIRS):
            bits[3 * k + p] = int(cards[i, k] == cards[j, k])
    return bits


def symbolic_relations_batch(cards: np.ndarray) -> np.ndarray:
    cards = np.asarray(cards)
    cols = [cards[..., i, :] == cards[..., j, :] for i, j in PAIRS]  # each (..., 4)
    return np.stack(cols, axis=-1).reshape(*cards.shape[:-2], -1).astype(np.float32)


def _draw_triple(rng: Rng, want_set: bool) -> np.ndarray:
    deck = all_cards()
    while True:
        i, j = rng.choice(len(deck), size=2, replace=False)
        c1, c2 = deck[i], deck[j]
        if want_set:
            c3 = (-(c1 + c2)) % 3
            return np.stack([c1, c2, c3])
        k = int(rng.integers(0, len(deck)))
        if k in (i, j):
            continue
        triple = np.stack([c1, c2, deck[k]])
        if not is_set_mod3(triple):
            return triple


def gen_set_triples(n: int, rng: Rng, exclude: set | None = None) -> list[SetTriple]:
    """SET with probability 1/2, else a non-SET; card order shuffled. Ordered triples in ``exclude`` are skipped."""
    if n < 1:
        raise ContractError("need n >= 1")
    out = []
    taken = exclude if exclude is not None else None
    while len(out) < n:
        want = bool(rng.random() < 0.5)
        cards = _draw_triple(rng, want)[rng.permutation(3)]
        if taken is not None:
            key = tuple(card_id(c) for c in cards)
            if key in taken:
                continue
            taken.add(key)
        out.append(SetTriple(cards, want))
    return out


def gen_set_dataset(n: int, seed: int) -> list[SetTriple]:
    return gen_set_triples(n, Rng(seed))


@dataclass
class SetDataset:
    train: list[SetTriple]
    val: list[SetTriple]
    test: list[SetTriple]
    seed: int

    @staticmethod
    def arrays(triples: list[SetTriple]):
        cards = np.stack([t.cards for t in triples])
        return cards, np.array([t.label for t in triples], dtype=np.int64)


def gen_set_splits(n_train: int, n_val: int, n_test: int, seed: int) -> SetDataset:
    """Splits with no ordered triple shared between (or repeated within) them."""
    rng = Rng(seed)
    taken: set = set()
    return SetDataset(
        gen_set_triples(n_train, rng.spawn("train"), taken),
        gen_set_triples(n_val, rng.spawn("val"), taken),
        gen_set_triples(n_test, rng.spawn("test"), taken),
        seed,
    )


# corruptions -----------------------------------------------------------------------
def corrupt_additive(objects: np.ndarray, sigma: float, rng: Rng) -> np.ndarray:
    """o + eps with eps ~ N(0, sigma^2 I) drawn independently per object."""
    if sigma < 0:
        raise ContractError("sigma must be >= 0")
    objects = np.asarray(objects)
    if sigma == 0:
        return objects.copy()
    return (objects + rng.normal(objects.shape, scale=sigma)).astype(objects.dtype)


def corrupt_linear(objects: np.ndarray, sigma: float, rng: Rng) -> np.ndarray:
    """Phi o for one shared Phi with iid N(0, sigma^2) entries."""
    if sigma < 0:
        raise ContractError("sigma must be >= 0")
    objects = np.asarray(objects)
    d = objects.shape[-1]
    phi = rng.normal((d, d), scale=sigma)
    return (objects @ phi.T).astype(objects.dtype)


def corrupt_universe(u: ObjectUniverse, kind: str, sigma: float, rng: Rng) -> ObjectUniverse:
    fn = {"additive": corrupt_additive, "linear": corrupt_linear}.get(kind)
    if fn is None:
        raise ContractError(f"unknown corruption kind {kind!r}")
    return dataclasses.replace(u, objects=fn(u.objects, sigma, rng))


# dataset container ----------------------------------------------------------------
DATA_MAGIC = b"ABSLAB-DATA\n"
DATA_VERSION = 1


def save_arrays(path, kind: str, seed: int, arrays: dict[str, np.ndarray], meta: dict | None = None) -> None:
    """Write a header (task kind, seed, name -> dtype/shape/offset) then raw little-endian arrays."""
    table = []
    offset = 0
    blobs = []
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr)
        dt = "<f4" if arr.dtype.kind == "f" else "<i8"
        raw = arr.astype(dt).tobytes()
        table.append({"name": name, "dtype": dt, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = {"version": DATA_VERSION, "kind": kind, "seed": seed, "arrays": table, "meta": meta or {}}
    head = json.dumps(header, sort_keys=True, indent=1).encode()
    with open(path, "wb") as fh:
        fh.write(DATA_MAGIC)
        fh.write(f"{len(head)}\n".encode())
        fh.write(head)
        for raw in blobs:
            fh.write(raw)


def load_arrays(path) -> tuple[dict, dict[str, np.ndarray]]:
    raw = Path(path).read_bytes()
    if not raw.startswith(DATA_MAGIC):
        raise CheckpointError(f"{path}: not a dataset container")
    rest = raw[len(DATA_MAGIC) :]
    nl = rest.index(b"\n")
    n = int(rest[:nl])
    header = json.loads(rest[nl + 1 : nl + 1 + n])
    if header.get("version") != DATA_VERSION:
        raise CheckpointError(f"{path}: unsupported dataset version {header.get('version')}")
    body = rest[nl + 1 + n :]
    arrays = {}
    for entry in header["arrays"]:
        chunk = body[entry["offset"] : entry["offset"] + entry["nbytes"]]
        arrays[entry["name"]] = np.frombuffer(chunk, dtype=entry["dtype"]).reshape(entry["shape"]).copy()
    return header, arrays


def export_jsonl(path, records) -> None:
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
