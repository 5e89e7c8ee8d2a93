"""Build the primitive library from contrastive activation differences.

Pipeline: generate under positive/negative framing, keep pairs that pass the
quality filter, record last-token layer-``l`` hidden states, inspect the
geometry (PCA, cosine matrix), cluster with K-Means, and take normalised
cluster means as the primitives.
"""
from __future__ import annotations

import hashlib
import json
import math
import struct
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import model as M
from . import tasks as T


class ElicitationError(RuntimeError):
    pass


class LibraryFormatError(ValueError):
    pass


@dataclass(frozen=True)
class DifferencePair:
    h_plus: np.ndarray
    h_minus: np.ndarray
    skill_id: str
    instance_id: int
    variant: int = 0

    @property
    def diff(self) -> np.ndarray:
        return self.h_plus - self.h_minus


@dataclass
class FilterStats:
    total: int = 0
    accepted: int = 0
    reasons: Counter = field(default_factory=Counter)
    per_family: dict = field(default_factory=dict)

    @property
    def acceptance_rate(self) -> float:
        return self.accepted / self.total if self.total else 0.0


def filter_pairs(model: M.FrozenModel, pairs: list[T.ContrastPair], max_steps: int = 8,
                 band=(0.5, 2.0)) -> tuple[list[T.ContrastPair], FilterStats]:
    """Greedy generations under both framings, then the quality filter."""
    stats = FilterStats()
    kept = []
    pos_gen = M.greedy_many(model, [p.positive_prompt for p in pairs], max_steps=max_steps)
    neg_gen = M.greedy_many(model, [p.negative_prompt for p in pairs], max_steps=max_steps)
    for pair, pos, neg in zip(pairs, pos_gen, neg_gen):
        res = T.quality_filter(pos, neg, pair.base, band)
        stats.total += 1
        stats.reasons[res.reason] += 1
        fam = stats.per_family.setdefault(pair.base.skill_id, [0, 0])
        fam[1] += 1
        if res.accepted:
            stats.accepted += 1
            fam[0] += 1
            kept.append(pair)
    return kept, stats


def collect_pairs(model: M.FrozenModel, pairs: list[T.ContrastPair], layer: int,
                  stats: FilterStats | None = None) -> list[DifferencePair]:
    """Last-token layer-``layer`` hidden states of both framings per accepted pair."""
    if not pairs:
        detail = f" (filter: {dict(stats.reasons)})" if stats is not None else ""
        raise ElicitationError("no contrast pairs survived filtering" + detail)
    hp = M.last_hidden(model, [p.positive_prompt for p in pairs], layer)
    hn = M.last_hidden(model, [p.negative_prompt for p in pairs], layer)
    return [DifferencePair(hp[i], hn[i], p.base.skill_id, p.base.seed, p.variant) for i, p in enumerate(pairs)]


def difference_matrix(diffs) -> np.ndarray:
    if isinstance(diffs, np.ndarray):
        return np.asarray(diffs, dtype=np.float64)
    return np.stack([d.diff if isinstance(d, DifferencePair) else np.asarray(d, dtype=np.float64)
                     for d in diffs])


# -- geometry ------------------------------------------------------------------------
@dataclass
class PCAReport:
    fractions: np.ndarray
    components: np.ndarray
    projection: np.ndarray

    def top(self, k: int) -> float:
        return float(self.fractions[:k].sum())


def pca_report(diffs) -> PCAReport:
    """Explained-variance fractions of the centred vectors plus a 2-D projection."""
    X = difference_matrix(diffs)
    if X.ndim != 2 or X.shape[0] < 2 or X.shape[1] < 2:
        raise ValueError("PCA needs at least 2 vectors of dimension >= 2")
    Xc = X - X.mean(axis=0)
    cov = Xc.T @ Xc / (X.shape[0] - 1)
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(evals)[::-1]
    evals = np.clip(evals[order], 0.0, None)
    evecs = evecs[:, order]
    total = evals.sum()
    if total <= 1e-300:
        raise ValueError("rank-0 data: all vectors identical, variance fractions undefined")
    # deterministic sign: largest-magnitude loading positive
    flip = np.sign(evecs[np.argmax(np.abs(evecs), axis=0), np.arange(evecs.shape[1])])
    evecs = evecs * np.where(flip == 0, 1.0, flip)
    return PCAReport(evals / total, evecs.T, Xc @ evecs[:, :2])


@dataclass
class KMeansResult:
    assignments: np.ndarray
    centroids: np.ndarray
    inertia: float
    iterations: int
    history: list[float]
    reseeded: int = 0


def _kmeanspp(X: np.ndarray, K: int, rng: np.random.Generator) -> np.ndarray:
    n = X.shape[0]
    centers = [X[rng.integers(n)]]
    d2 = ((X - centers[0]) ** 2).sum(axis=1)
    for _ in range(1, K):
        total = d2.sum()
        idx = int(rng.integers(n)) if total <= 0 else int(rng.choice(n, p=d2 / total))
        centers.append(X[idx])
        d2 = np.minimum(d2, ((X - X[idx]) ** 2).sum(axis=1))
    return np.array(centers)


def _sq_dists(X, C):
    return (X * X).sum(1)[:, None] - 2 * X @ C.T + (C * C).sum(1)[None, :]


def _lloyd(X, C, max_iters, tol):
    history, reseeded, it = [], 0, 0
    for it in range(1, max_iters + 1):
        D = _sq_dists(X, C)
        assign = np.argmin(D, axis=1)
        history.append(float(np.maximum(D[np.arange(len(X)), assign], 0).sum()))
        newC = C.copy()
        for k in range(C.shape[0]):
            members = X[assign == k]
            if len(members):
                newC[k] = members.mean(axis=0)
            else:
                # empty cluster: move it onto the point farthest from its centroid
                far = int(np.argmax(D[np.arange(len(X)), assign]))
                newC[k] = X[far]
                assign[far] = k
                reseeded += 1
        shift = float(np.sqrt(((newC - C) ** 2).sum(axis=1)).max())
        C = newC
        if shift < tol:
            break
    D = _sq_dists(X, C)
    assign = np.argmin(D, axis=1)
    inertia = float(np.maximum(D[np.arange(len(X)), assign], 0).sum())
    history.append(inertia)
    return assign, C, inertia, it, history, reseeded


def kmeans(diffs, K: int, seed: int = 0, max_iters: int = 300, tol: float = 1e-6,
           restarts: int = 5) -> KMeansResult:
    """Lloyd iterations from k-means++ seeds; best of ``restarts`` by inertia."""
    X = difference_matrix(diffs)
    if K < 1 or K > X.shape[0]:
        raise ValueError(f"K={K} must lie in [1, {X.shape[0]}]")
    rng = np.random.default_rng(seed)
    best = None
    for _ in range(max(restarts, 1)):
        res = KMeansResult(*_lloyd(X, _kmeanspp(X, K, rng), max_iters, tol))
        if best is None or res.inertia < best.inertia:
            best = res
    return best


# -- the library ----------------------------------------------------------------------
def centroid_sum(X: np.ndarray, members: np.ndarray) -> np.ndarray:
    """Mean of ``X[members]`` accumulated row by row in index order."""
    acc = np.zeros(X.shape[1])
    for j in members:
        acc = acc + X[j]
    return acc / len(members)


def l2_norm(v: np.ndarray) -> float:
    s = 0.0
    for x in v:
        s += float(x) * float(x)
    return math.sqrt(s)


@dataclass
class PrimitiveLibrary:
    vectors: np.ndarray
    layer: int
    assignments: np.ndarray
    centroids: np.ndarray
    provenance: dict = field(default_factory=dict)
    rejected: list = field(default_factory=list)
    cluster_ids: list = field(default_factory=list)
    # float32 rows as read from disk; the hash is defined over these when present
    stored_rows: np.ndarray | None = field(default=None, repr=False, compare=False)

    @property
    def K(self) -> int:
        return self.vectors.shape[0]

    @property
    def d(self) -> int:
        return self.vectors.shape[1]

    def header_bytes(self) -> bytes:
        fp = bytes.fromhex(self.provenance.get("model_fingerprint", "00" * 32))
        return LIB_MAGIC + struct.pack("<I3i", LIB_VERSION, self.K, self.d, self.layer) + fp

    def body_bytes(self) -> bytes:
        rows = self.vectors if self.stored_rows is None else self.stored_rows
        return self.header_bytes() + np.ascontiguousarray(rows, dtype="<f4").tobytes()

    @property
    def hash(self) -> str:
        return hashlib.sha256(self.body_bytes()).hexdigest()


def build_library(diffs, assignments, layer: int, provenance: dict | None = None) -> PrimitiveLibrary:
    """Normalised cluster means; clusters whose mean vanishes are dropped and recorded."""
    X = difference_matrix(diffs)
    assignments = np.asarray(assignments, dtype=np.int64)
    if assignments.shape != (X.shape[0],) or assignments.min() < 0:
        raise ValueError("assignments must give one non-negative cluster index per vector")
    vectors, centroids, rejected, ids = [], [], [], []
    for k in range(int(assignments.max()) + 1):
        members = np.flatnonzero(assignments == k)
        if len(members) == 0:
            rejected.append({"cluster": k, "reason": "empty"})
            continue
        c = centroid_sum(X, members)
        n = l2_norm(c)
        if n <= 1e-12:
            rejected.append({"cluster": k, "reason": "zero-norm centroid", "size": int(len(members))})
            continue
        centroids.append(c)
        vectors.append(c / n)
        ids.append(k)
    if not vectors:
        raise ElicitationError(f"every primitive was rejected: {rejected}")
    return PrimitiveLibrary(np.array(vectors), layer, assignments, np.array(centroids),
                            dict(provenance or {}), rejected, ids)


def cosine_matrix(library) -> np.ndarray:
    V = np.asarray(getattr(library, "vectors", library), dtype=np.float64)
    norms = np.sqrt((V * V).sum(axis=1))
    U = V / norms[:, None]
    G = U @ U.T
    G = 0.5 * (G + G.T)
    return np.clip(G, -1.0, 1.0)


def mean_abs_offdiag(C: np.ndarray) -> float:
    K = C.shape[0]
    if K < 2:
        return 0.0
    return float(np.abs(C[~np.eye(K, dtype=bool)]).mean())


def cluster_purity(assignments, labels) -> float:
    """Fraction of points whose cluster's majority label matches their own."""
    assignments = np.asarray(assignments)
    labels = np.asarray(labels)
    hits = 0
    for k in np.unique(assignments):
        hits += Counter(labels[assignments == k].tolist()).most_common(1)[0][1]
    return hits / len(labels)


# -- static steering ----------------------------------------------------------------------
def static_sweep(model: M.FrozenModel, library: PrimitiveLibrary, eval_sets: dict[str, list[T.TaskInstance]],
                 alphas, max_steps: int = 8) -> list[dict]:
    """Accuracy per (primitive, alpha, family) with ``alpha * v_i`` injected."""
    fams = list(eval_sets)
    insts = [x for f in fams for x in eval_sets[f]]
    prompts = [x.prompt for x in insts]
    rows = []
    for i in range(library.K):
        for a in alphas:
            steers = np.tile(float(a) * library.vectors[i], (len(insts), 1))
            gens = M.greedy_many(model, prompts, steers, max_steps=max_steps, layer=library.layer)
            off = 0
            for fam in fams:
                n = len(eval_sets[fam])
                hits = [T.verify(gens[j], insts[j]) for j in range(off, off + n)]
                rows.append({"vector": i, "alpha": float(a), "family": fam, "accuracy": float(np.mean(hits))})
                off += n
    return rows


def best_alpha_by_family(rows: list[dict]) -> dict:
    out = {}
    for r in rows:
        key = (r["vector"], r["family"])
        if key not in out or r["accuracy"] > out[key][1]:
            out[key] = (r["alpha"], r["accuracy"])
    return out


# -- file format --------------------------------------------------------------------------
LIB_MAGIC = b"RSTL"
LIB_VERSION = 1
_LIB_HEAD = 4 + 4 + 12 + 32


def save_library(library: PrimitiveLibrary, path, pca: PCAReport | None = None) -> Path:
    """Binary rows plus a JSON sidecar with the cluster histogram, cosine matrix and PCA."""
    path = Path(path)
    body = library.body_bytes()
    path.write_bytes(body + hashlib.sha256(body).digest())
    sidecar = {
        "K": library.K,
        "d": library.d,
        "layer": library.layer,
        "provenance": library.provenance,
        "cluster_ids": [int(c) for c in library.cluster_ids],
        "assignments_histogram": {str(k): int(v) for k, v in sorted(Counter(library.assignments.tolist()).items())},
        "rejected": library.rejected,
        "cosine_matrix": np.round(cosine_matrix(library), 12).tolist(),
        "pca_fractions": None if pca is None else np.round(pca.fractions[:16], 12).tolist(),
        "library_hash": library.hash,
    }
    path.with_suffix(path.suffix + ".json").write_text(json.dumps(sidecar, indent=1, sort_keys=True) + "\n")
    return path


def load_library(path, model_fingerprint: str | None = None, allow_mismatch: bool = False) -> PrimitiveLibrary:
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < _LIB_HEAD + 32 or raw[:4] != LIB_MAGIC:
        raise LibraryFormatError(f"{path}: not a library file")
    body, digest = raw[:-32], raw[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise LibraryFormatError(f"{path}: content hash mismatch")
    version, K, d, layer = struct.unpack("<I3i", raw[4:20])
    if version != LIB_VERSION:
        raise LibraryFormatError(f"{path}: unsupported version {version}")
    fp = raw[20:52].hex()
    if len(body) != _LIB_HEAD + 4 * K * d:
        raise LibraryFormatError(f"{path}: truncated vector block")
    if model_fingerprint is not None and fp != model_fingerprint and not allow_mismatch:
        raise LibraryFormatError(f"{path}: library was elicited from model {fp[:12]}, not {model_fingerprint[:12]}")
    rows = np.frombuffer(body[_LIB_HEAD:], dtype="<f4").astype(np.float64).reshape(K, d)
    side_path = path.with_suffix(path.suffix + ".json")
    side = json.loads(side_path.read_text()) if side_path.exists() else {}
    prov = dict(side.get("provenance", {}))
    prov["model_fingerprint"] = fp
    hist = side.get("assignments_histogram", {})
    assignments = np.repeat([int(k) for k in hist], [int(v) for v in hist.values()]) if hist else np.zeros(0, int)
    # float32 storage perturbs unit norms at ~1e-8; restore exact normalisation
    vectors = rows / np.sqrt((rows * rows).sum(axis=1, keepdims=True))
    return PrimitiveLibrary(vectors, layer, assignments, rows.copy(), prov, side.get("rejected", []),
                            side.get("cluster_ids", list(range(K))), stored_rows=rows.copy())
