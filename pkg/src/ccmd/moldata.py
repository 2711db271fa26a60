"""Synthetic molecules, JSONL persistence and padded batching."""
from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
from scipy.sparse.csgraph import minimum_spanning_tree
from scipy.spatial.distance import pdist, squareform

DATASET_VERSION = 1
N_MAX = 128
ATOM_VOCAB = 16
BOND_VOCAB = 4
BOND_CUTOFF = 0.35


class DatasetFormatError(ValueError):
    pass


@dataclass
class Molecule:
    atoms: np.ndarray                 # [N] int
    bonds: np.ndarray                 # [E, 3] int rows (i, j, bond_type), i < j
    label: float
    coords: np.ndarray | None = None  # [N, 3]

    @property
    def n_atoms(self) -> int:
        return len(self.atoms)

    def validate(self, n_max: int = N_MAX, bond_vocab: int = BOND_VOCAB):
        n = self.n_atoms
        if not 2 <= n <= n_max:
            raise ValueError(f"atom count {n} outside [2, {n_max}]")
        b = self.bonds
        if b.ndim != 2 or b.shape[1] != 3:
            raise ValueError("bonds must be rows of (i, j, type)")
        if len(b):
            if (b[:, 0] >= b[:, 1]).any() or b[:, 0].min() < 0 or b[:, 1].max() >= n:
                raise ValueError("bond endpoints must satisfy 0 <= i < j < N")
            if len({(int(i), int(j)) for i, j in b[:, :2]}) != len(b):
                raise ValueError("duplicate bond")
            if b[:, 2].min() < 0 or b[:, 2].max() >= bond_vocab:
                raise ValueError("bond type outside vocabulary")
        if not is_connected(n, b):
            raise ValueError("molecule graph is not connected")
        if self.coords is not None:
            if self.coords.shape != (n, 3) or not np.isfinite(self.coords).all():
                raise ValueError("coords must be N finite 3-vectors")

    def permuted(self, perm: Sequence[int]) -> "Molecule":
        """Relabel atoms so that new atom k is old atom ``perm[k]``."""
        perm = np.asarray(perm)
        inv = np.argsort(perm)
        bonds = self.bonds.copy()
        if len(bonds):
            i, j = inv[bonds[:, 0]], inv[bonds[:, 1]]
            bonds[:, 0], bonds[:, 1] = np.minimum(i, j), np.maximum(i, j)
        coords = None if self.coords is None else self.coords[perm]
        return Molecule(self.atoms[perm], bonds, self.label, coords)


def is_connected(n: int, bonds: np.ndarray) -> bool:
    adj: list[list[int]] = [[] for _ in range(n)]
    for i, j, _ in bonds:
        adj[i].append(int(j))
        adj[j].append(int(i))
    seen = {0}
    queue = deque([0])
    while queue:
        u = queue.popleft()
        for v in adj[u]:
            if v not in seen:
                seen.add(v)
                queue.append(v)
    return len(seen) == n


@dataclass
class Dataset:
    molecules: list[Molecule]
    label_mean: float = 0.0
    label_std: float = 1.0
    seed: int | None = None

    def __len__(self):
        return len(self.molecules)

    def __getitem__(self, i):
        return self.molecules[i]

    @property
    def has_coords(self) -> bool:
        return all(m.coords is not None for m in self.molecules)

    def subset(self, idx) -> "Dataset":
        return Dataset([self.molecules[i] for i in idx], self.label_mean, self.label_std, self.seed)

    def split(self, n_first: int) -> tuple["Dataset", "Dataset"]:
        return self.subset(range(n_first)), self.subset(range(n_first, len(self)))


def bond_bucket(d: float, cutoff: float = BOND_CUTOFF, n_buckets: int = BOND_VOCAB) -> int:
    # spanning-tree bonds longer than the cutoff land in the last bucket
    return min(int(d / cutoff * n_buckets), n_buckets - 1)


def molecule_from_coords(coords: np.ndarray, atoms: np.ndarray,
                         cutoff: float = BOND_CUTOFF, n_buckets: int = BOND_VOCAB) -> tuple[Molecule, float]:
    """Bond a point cloud (spanning tree + cutoff pairs); return molecule and raw label."""
    n = len(coords)
    dist = squareform(pdist(coords))
    tree = minimum_spanning_tree(dist).toarray()
    pairs = set()
    for i, j in zip(*np.nonzero(tree)):
        pairs.add((min(i, j), max(i, j)))
    ii, jj = np.triu_indices(n, k=1)
    close = dist[ii, jj] < cutoff
    pairs.update(zip(ii[close].tolist(), jj[close].tolist()))
    pairs = sorted((int(i), int(j)) for i, j in pairs)
    bonds = np.array([(i, j, bond_bucket(dist[i, j], cutoff, n_buckets)) for i, j in pairs],
                     dtype=np.int64).reshape(-1, 3)
    raw = float(sum(1.0 / dist[i, j] for i, j in pairs))
    return Molecule(np.asarray(atoms, dtype=np.int64), bonds, raw, np.asarray(coords, dtype=np.float64)), raw


def gen_synthetic(count: int, n_range: tuple[int, int] = (4, 64), seed: int = 0,
                  atom_vocab: int = ATOM_VOCAB, cutoff: float = BOND_CUTOFF,
                  n_buckets: int = BOND_VOCAB, n_max: int = N_MAX) -> Dataset:
    """Random point clouds in the unit cube; label is the sum of inverse bond lengths.

    Labels are standardized by the generated set's own mean and std, which are
    kept on the returned dataset.
    """
    lo, hi = n_range
    if not 2 <= lo <= hi <= n_max:
        raise ValueError(f"n_range {n_range} must lie within [2, {n_max}]")
    if count < 1:
        raise ValueError("count must be >= 1")
    rng = np.random.default_rng(seed)
    mols, raws = [], []
    for _ in range(count):
        n = int(rng.integers(lo, hi + 1))
        while True:
            coords = rng.random((n, 3))
            if pdist(coords).min() > 0:
                break
        atoms = rng.integers(0, atom_vocab, size=n)
        mol, raw = molecule_from_coords(coords, atoms, cutoff, n_buckets)
        mols.append(mol)
        raws.append(raw)
    raws = np.array(raws)
    mean = float(raws.mean())
    std = float(raws.std()) if count > 1 and raws.std() > 0 else 1.0
    for m, r in zip(mols, raws):
        m.label = float((r - mean) / std)
    return Dataset(mols, mean, std, seed)


# ------------------------------------------------------------------ JSONL

def save_jsonl(ds: Dataset, path) -> None:
    header = {"ccmd_dataset_version": DATASET_VERSION, "label_mean": ds.label_mean,
              "label_std": ds.label_std, "seed": ds.seed, "count": len(ds)}
    with open(path, "w") as fh:
        fh.write(json.dumps(header) + "\n")
        for m in ds.molecules:
            rec = {"atoms": m.atoms.tolist(), "bonds": m.bonds.tolist(), "label": m.label}
            if m.coords is not None:
                rec["coords"] = m.coords.tolist()
            fh.write(json.dumps(rec) + "\n")


def load_jsonl(path) -> Dataset:
    path = Path(path)
    with open(path) as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise DatasetFormatError(f"{path}: empty file")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as e:
        raise DatasetFormatError(f"{path}: line 1: bad header ({e.msg})") from None
    if not isinstance(header, dict) or "ccmd_dataset_version" not in header:
        raise DatasetFormatError(f"{path}: line 1: missing dataset header")
    if header["ccmd_dataset_version"] != DATASET_VERSION:
        raise DatasetFormatError(
            f"{path}: dataset version {header['ccmd_dataset_version']} != {DATASET_VERSION}")
    mols = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            for key in ("atoms", "bonds", "label"):
                if key not in rec:
                    raise KeyError(key)
            coords = rec.get("coords")
            mol = Molecule(np.asarray(rec["atoms"], dtype=np.int64),
                           np.asarray(rec["bonds"], dtype=np.int64).reshape(-1, 3),
                           float(rec["label"]),
                           None if coords is None else np.asarray(coords, dtype=np.float64))
            mol.validate()
        except KeyError as e:
            raise DatasetFormatError(f"{path}: line {lineno}: missing key {e.args[0]!r}") from None
        except (ValueError, TypeError) as e:
            raise DatasetFormatError(f"{path}: line {lineno}: {e}") from None
        mols.append(mol)
    return Dataset(mols, float(header["label_mean"]), float(header["label_std"]), header.get("seed"))


# --------------------------------------------------------------- batching

@dataclass
class GraphBatch:
    """Padded batch; slot 0 of every row is the virtual token."""
    atom_ids: np.ndarray     # [B, T] int; virtual and pad slots hold 0
    bond_type: np.ndarray    # [B, T, T] int; -1 where no bond
    dist: np.ndarray         # [B, T, T]; zeros without coords and on virtual/pad slots
    mask: np.ndarray         # [B, T] float 1/0
    atom_counts: np.ndarray  # [B]
    labels: np.ndarray       # [B]
    has_coords: bool = field(default=False)

    @property
    def size(self) -> int:
        return self.atom_ids.shape[0]

    @property
    def tokens(self) -> int:
        return self.atom_ids.shape[1]

    @property
    def bonded(self) -> np.ndarray:
        return self.bond_type >= 0

    def adjacency(self, virtual: bool = True) -> np.ndarray:
        """0/1 adjacency [B, T, T]; optionally links the virtual token to every atom."""
        adj = self.bonded.astype(np.float64)
        if virtual:
            atoms = self.mask.copy()
            atoms[:, 0] = 0.0
            adj[:, 0, :] = atoms
            adj[:, :, 0] = atoms
        return adj


def collate(mols: Sequence[Molecule]) -> GraphBatch:
    if not mols:
        raise ValueError("cannot collate an empty batch")
    b = len(mols)
    t = max(m.n_atoms for m in mols) + 1
    atom_ids = np.zeros((b, t), dtype=np.int64)
    bond_type = np.full((b, t, t), -1, dtype=np.int64)
    dist = np.zeros((b, t, t))
    mask = np.zeros((b, t))
    has_coords = all(m.coords is not None for m in mols)
    for k, m in enumerate(mols):
        n = m.n_atoms
        atom_ids[k, 1:n + 1] = m.atoms
        mask[k, :n + 1] = 1.0
        if len(m.bonds):
            i, j, bt = m.bonds[:, 0] + 1, m.bonds[:, 1] + 1, m.bonds[:, 2]
            bond_type[k, i, j] = bt
            bond_type[k, j, i] = bt
        if has_coords:
            dist[k, 1:n + 1, 1:n + 1] = squareform(pdist(m.coords))
    counts = np.array([m.n_atoms for m in mols])
    labels = np.array([m.label for m in mols], dtype=np.float64)
    return GraphBatch(atom_ids, bond_type, dist, mask, counts, labels, has_coords)


def batches(mols: Sequence[Molecule] | Dataset, batch_size: int,
            shuffle_seed: int | None = None) -> Iterator[GraphBatch]:
    """Yield padded batches; order is a deterministic function of ``shuffle_seed``."""
    mols = mols.molecules if isinstance(mols, Dataset) else list(mols)
    if not mols:
        raise ValueError("empty dataset")
    if batch_size < 1:
        raise ValueError("batch size must be >= 1")
    order = np.arange(len(mols))
    if shuffle_seed is not None:
        order = np.random.default_rng(shuffle_seed).permutation(len(mols))
    for s in range(0, len(mols), batch_size):
        yield collate([mols[i] for i in order[s:s + batch_size]])
