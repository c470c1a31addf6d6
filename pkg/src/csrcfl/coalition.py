"""Robust transfer losses and optimal partition of clients into coalitions.

The coalition objective for a partition ``S_1..S_K`` of the clients is

    sum_k (1 / |S_k|) * sum_{i in S_k} sum_{j in S_k} L[i, j]

where ``L[i, j]`` is the worst-case loss of client ``j``'s model on client
``i``'s ambiguity ball. Partitions are labelled 0..K-1 and kept canonical:
coalitions are numbered in order of their smallest member, which makes a
label vector a restricted-growth string.
"""

from __future__ import annotations

import csv
import enum
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import AmbiguitySpec, ModelFamily, ModelParams, TabularDataset
from .dro import robust_loss
from .errors import CapacityError, ParseError, SchemaError, ValidationError

EXACT_LIMIT = 12
_TIE_RTOL = 1e-12
_CHUNK = 1 << 17


class SolverStatus(str, enum.Enum):
    EXACT = "exact"
    HEURISTIC = "heuristic"


@dataclass(frozen=True, eq=False)
class TransferLossMatrix:
    """``entries[i, j]``: loss of model ``j`` evaluated on client ``i``'s ambiguity ball."""

    entries: np.ndarray
    client_ids: tuple = ()

    def __post_init__(self):
        L = np.array(self.entries, dtype=float)
        if L.ndim != 2 or L.shape[0] != L.shape[1] or L.shape[0] < 1:
            raise ValidationError(f"transfer matrix must be square and non-empty, got {L.shape}")
        if not np.all(np.isfinite(L)) or np.any(L < 0):
            raise ValidationError("transfer matrix entries must be finite and >= 0")
        ids = tuple(str(c) for c in self.client_ids) or tuple(str(i) for i in range(L.shape[0]))
        if len(ids) != L.shape[0]:
            raise ValidationError(f"{len(ids)} client ids for a {L.shape[0]}x{L.shape[0]} matrix")
        L.setflags(write=False)
        object.__setattr__(self, "entries", L)
        object.__setattr__(self, "client_ids", ids)

    @property
    def n_clients(self) -> int:
        return self.entries.shape[0]

    def to_csv(self, path):
        with Path(path).open("w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["evaluator", *self.client_ids])
            for cid, row in zip(self.client_ids, self.entries):
                writer.writerow([cid, *(f"{v:.17g}" for v in row)])

    @classmethod
    def from_csv(cls, path) -> "TransferLossMatrix":
        with Path(path).open(newline="", encoding="utf-8") as fh:
            rows = list(csv.reader(fh))
        if not rows or len(rows[0]) < 2:
            raise SchemaError(f"{path}: expected a header row of model-owner ids")
        owners = rows[0][1:]
        ids, values = [], []
        for r, row in enumerate(rows[1:]):
            if len(row) != len(owners) + 1:
                raise ParseError(f"{path}: row {r} has {len(row)} cells", row=r)
            ids.append(row[0])
            try:
                values.append([float(v) for v in row[1:]])
            except ValueError:
                raise ParseError(f"{path}: row {r} has a non-numeric cell", row=r) from None
        if ids != owners:
            raise SchemaError(f"{path}: row ids {ids} do not match column ids {owners}")
        return cls(np.array(values), tuple(ids))


def _as_array(matrix) -> np.ndarray:
    if isinstance(matrix, TransferLossMatrix):
        return matrix.entries
    return TransferLossMatrix(matrix).entries


@dataclass(frozen=True, eq=False)
class CoalitionStructure:
    assignment: np.ndarray
    objective: float
    solver_status: SolverStatus

    def __post_init__(self):
        a = np.asarray(self.assignment)
        if a.ndim != 1 or a.shape[0] < 1:
            raise ValidationError(f"assignment must be a non-empty 1-D array, got shape {a.shape}")
        a = _check_assignment(a.astype(int), a.shape[0]).copy()
        a.setflags(write=False)
        object.__setattr__(self, "assignment", a)
        object.__setattr__(self, "objective", float(self.objective))

    @property
    def n_coalitions(self) -> int:
        return int(self.assignment.max()) + 1

    def members(self, k: int) -> np.ndarray:
        return np.flatnonzero(self.assignment == k)

    def coalitions(self) -> list:
        return [self.members(k) for k in range(self.n_coalitions)]


def canonical_labels(labels) -> np.ndarray:
    """Renumber coalitions in order of first appearance."""
    labels = np.asarray(labels)
    out = np.empty(labels.shape[0], dtype=int)
    seen = {}
    for i, lab in enumerate(labels.tolist()):
        out[i] = seen.setdefault(lab, len(seen))
    return out


def _check_assignment(assignment, n_clients, n_coalitions=None) -> np.ndarray:
    if isinstance(assignment, CoalitionStructure):
        assignment = assignment.assignment
    a = np.asarray(assignment)
    if a.ndim != 1 or a.shape[0] != n_clients:
        raise ValidationError(f"assignment must have length {n_clients}, got shape {a.shape}")
    if not np.issubdtype(a.dtype, np.integer) or a.min() < 0:
        raise ValidationError("assignment labels must be non-negative integers")
    K = int(a.max()) + 1 if n_coalitions is None else int(n_coalitions)
    sizes = np.bincount(a, minlength=K)
    if sizes.shape[0] > K or np.any(sizes == 0):
        raise ValidationError(f"assignment leaves a coalition empty (sizes {sizes.tolist()})")
    return a


def objective_value(assignment, matrix, n_coalitions=None) -> float:
    L = _as_array(matrix)
    a = _check_assignment(assignment, L.shape[0], n_coalitions)
    total = 0.0
    for k in range(int(a.max()) + 1):
        idx = np.flatnonzero(a == k)
        total += L[np.ix_(idx, idx)].sum() / idx.shape[0]
    return float(total)


# -- transfer matrix ---------------------------------------------------------


def build_transfer_matrix(
    models: Sequence[ModelParams],
    datasets: Sequence[TabularDataset],
    specs: Sequence[AmbiguitySpec],
    family=None,
    threads: int = 1,
) -> TransferLossMatrix:
    """Evaluate every model on every client's ambiguity ball."""
    if not (len(models) == len(datasets) == len(specs)) or not models:
        raise ValidationError(
            f"need equally many models, datasets and specs, got "
            f"{len(models)}, {len(datasets)}, {len(specs)}"
        )
    if family is not None:
        family = ModelFamily.coerce(family)
        bad = [m.family.value for m in models if m.family is not family]
        if bad:
            raise ValidationError(f"models of family {bad[0]} in a {family.value} federation")
    n = len(models)

    def row(i):
        return [robust_loss(models[j], datasets[i], specs[i]).value for j in range(n)]

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            rows = list(pool.map(row, range(n)))
    else:
        rows = [row(i) for i in range(n)]
    return TransferLossMatrix(np.array(rows), tuple(d.client_id for d in datasets))


# -- exact solver ------------------------------------------------------------


def restricted_growth_strings(n: int, k: int) -> np.ndarray:
    """All length-``n`` restricted-growth strings with exactly ``k`` blocks, in lexicographic order."""
    if not 1 <= k <= n:
        raise ValidationError(f"need 1 <= k <= n, got k={k}, n={n}")
    seqs = np.zeros((1, 1), dtype=np.int8)
    top = np.zeros(1, dtype=np.int16)
    for pos in range(1, n):
        remaining = n - pos - 1
        n_opts = np.minimum(top + 1, k - 1) + 1
        parent = np.repeat(np.arange(seqs.shape[0]), n_opts)
        starts = np.cumsum(n_opts) - n_opts
        value = np.arange(parent.shape[0]) - np.repeat(starts, n_opts)
        new_top = np.maximum(top[parent], value)
        keep = new_top + 1 + remaining >= k
        parent, value, new_top = parent[keep], value[keep], new_top[keep]
        seqs = np.hstack([seqs[parent], value[:, None].astype(np.int8)])
        top = new_top.astype(np.int16)
    return seqs[top == k - 1]


def _batch_objective(labels: np.ndarray, L: np.ndarray, k: int) -> np.ndarray:
    out = np.zeros(labels.shape[0])
    for c in range(k):
        M = (labels == c).astype(float)
        out += ((M @ L) * M).sum(axis=1) / M.sum(axis=1)
    return out


def solve_exact(matrix, n_coalitions: int, exact_limit: int = EXACT_LIMIT) -> CoalitionStructure:
    """Global minimizer by enumerating every partition into exactly ``n_coalitions`` blocks.

    Near-ties (relative 1e-12) go to the lexicographically smallest label string.
    """
    L = _as_array(matrix)
    n, k = L.shape[0], int(n_coalitions)
    if not 1 <= k <= n:
        raise ValidationError(f"n_coalitions must lie in [1, {n}], got {k}")
    if n > exact_limit:
        raise CapacityError(
            f"{n} clients exceed the exact solver limit of {exact_limit}; use solve_heuristic"
        )
    labels = restricted_growth_strings(n, k)
    values = np.concatenate(
        [_batch_objective(labels[s:s + _CHUNK], L, k) for s in range(0, labels.shape[0], _CHUNK)]
    )
    best = values.min()
    first = int(np.flatnonzero(values <= best + _TIE_RTOL * max(1.0, abs(best)))[0])
    assignment = labels[first].astype(int)
    return CoalitionStructure(assignment, objective_value(assignment, L), SolverStatus.EXACT)


# -- heuristic solver --------------------------------------------------------


def _local_search(L, labels, k, history=None):
    """Best-improvement relocation and pairwise-swap descent from ``labels``."""
    n = L.shape[0]
    S = L + L.T
    diag = np.diag(L)
    labels = labels.copy()
    ii, jj = np.triu_indices(n, 1)
    while True:
        M = np.zeros((n, k))
        M[np.arange(n), labels] = 1.0
        sizes = M.sum(axis=0)
        B = np.einsum("ik,ij,jk->k", M, L, M)
        R = S @ M  # R[i, c] = sum_{j in c} L[i, j] + L[j, i]
        current = float((B / sizes).sum())
        scale = _TIE_RTOL * max(1.0, abs(current))

        # relocate i from a to c
        a = labels
        sa = sizes[a]
        removed = (B[a] - R[np.arange(n), a] + diag) / np.where(sa > 1, sa - 1, 1) - B[a] / sa
        added = (B[None, :] + R + diag[:, None]) / (sizes[None, :] + 1) - B[None, :] / sizes[None, :]
        move = removed[:, None] + added
        move[np.arange(n), a] = np.inf
        move[sa <= 1, :] = np.inf

        # swap i (in a) with j (in b)
        la, lb = labels[ii], labels[jj]
        cross = S[ii, jj]
        d_a = -R[ii, la] + diag[ii] + R[jj, la] - cross + diag[jj]
        d_b = -R[jj, lb] + diag[jj] + R[ii, lb] - cross + diag[ii]
        swap = np.where(la != lb, d_a / sizes[la] + d_b / sizes[lb], np.inf)

        best_move = np.unravel_index(np.argmin(move), move.shape)
        best_swap = int(np.argmin(swap)) if swap.size else 0
        m_delta = move[best_move]
        s_delta = swap[best_swap] if swap.size else np.inf
        if min(m_delta, s_delta) >= -scale:
            return labels, current
        if m_delta <= s_delta:
            labels[best_move[0]] = best_move[1]
        else:
            i, j = ii[best_swap], jj[best_swap]
            labels[i], labels[j] = labels[j], labels[i]
        if history is not None:
            history.append(objective_value(labels, L, k))


def _random_feasible(rng, n, k):
    labels = rng.integers(0, k, size=n)
    labels[rng.permutation(n)[:k]] = np.arange(k)
    return labels


def solve_heuristic(matrix, n_coalitions: int, restarts: int = 20, rng_seed=0, histories=None) -> CoalitionStructure:
    """Multi-start local search over feasible partitions.

    If ``histories`` is a list, one list of accepted-move objectives is
    appended per restart.
    """
    L = _as_array(matrix)
    n, k = L.shape[0], int(n_coalitions)
    if not 1 <= k <= n:
        raise ValidationError(f"n_coalitions must lie in [1, {n}], got {k}")
    if restarts < 1:
        raise ValidationError("restarts must be >= 1")
    if k == 1 or k == n:
        assignment = np.zeros(n, dtype=int) if k == 1 else np.arange(n)
        return CoalitionStructure(assignment, objective_value(assignment, L), SolverStatus.HEURISTIC)
    rng = np.random.default_rng(rng_seed)
    best_labels, best_value = None, np.inf
    for _ in range(restarts):
        trace = [] if histories is not None else None
        labels, _ = _local_search(L, _random_feasible(rng, n, k), k, trace)
        if histories is not None:
            histories.append(trace)
        value = objective_value(labels, L, k)
        if value < best_value:
            best_labels, best_value = labels, value
    assignment = canonical_labels(best_labels)
    return CoalitionStructure(assignment, objective_value(assignment, L), SolverStatus.HEURISTIC)


def solve(matrix, n_coalitions: int, exact_limit: int = EXACT_LIMIT, restarts: int = 20, rng_seed=0):
    """Exact enumeration when it fits under ``exact_limit``, local search otherwise."""
    if _as_array(matrix).shape[0] <= exact_limit:
        return solve_exact(matrix, n_coalitions, exact_limit)
    return solve_heuristic(matrix, n_coalitions, restarts, rng_seed)


# -- aggregation -------------------------------------------------------------


def aggregate(models: Sequence[ModelParams], structure: CoalitionStructure) -> dict:
    """Unweighted mean of member weights per coalition."""
    a = _check_assignment(structure, len(models))
    family = models[0].family
    out = {}
    for k in range(int(a.max()) + 1):
        members = np.flatnonzero(a == k)
        out[k] = ModelParams(np.mean([models[i].weights for i in members], axis=0), family)
    return out


def assigned_models(models: Sequence[ModelParams], structure: CoalitionStructure) -> list:
    """The aggregated model each client ends up with, in client order."""
    per_coalition = aggregate(models, structure)
    return [per_coalition[int(k)] for k in structure.assignment]
