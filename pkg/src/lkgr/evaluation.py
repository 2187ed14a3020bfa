"""Dataset splits and Top-K ranking metrics."""

from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .graph import InteractionMatrix, UnifiedKnowledgeGraph, sample_khop
from .model import ModelConfig, tangent_representations

DEFAULT_K = (1, 5, 10, 20, 50, 100)
EVAL_STREAM = 0x5EED  # rng stream for the fixed evaluation neighborhoods


@dataclass
class Split:
    train: InteractionMatrix
    eval: InteractionMatrix
    test: InteractionMatrix
    seed: int


def split_dataset(interactions: InteractionMatrix, ratios=(0.6, 0.2, 0.2), seed: int = 0) -> Split:
    """Shuffle the positive pairs with ``seed`` and cut them by ``ratios``."""
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or any(r < 0 for r in ratios):
        raise ValueError(f"need three non-negative ratios, got {ratios}")
    if not math.isclose(sum(ratios), 1.0, abs_tol=1e-9):
        raise ValueError(f"ratios must sum to 1, got {sum(ratios)}")
    n = len(interactions)
    perm = np.random.default_rng(seed).permutation(n)
    n_train = int(round(n * ratios[0]))
    n_eval = min(int(round(n * ratios[1])), n - n_train)
    parts = np.split(perm, [n_train, n_train + n_eval])
    pairs = interactions.pairs
    sub = [InteractionMatrix(pairs[np.sort(p)], interactions.n_users, interactions.n_items) for p in parts]
    return Split(sub[0], sub[1], sub[2], seed)


def recall_at_k(ranked, relevant, K: int) -> float:
    relevant = set(int(r) for r in relevant)
    if not relevant:
        raise ValueError("relevant set is empty")
    hits = sum(1 for r in list(ranked)[:K] if int(r) in relevant)
    return hits / len(relevant)


def ndcg_at_k(ranked, relevant, K: int) -> float:
    relevant = set(int(r) for r in relevant)
    if not relevant:
        raise ValueError("relevant set is empty")
    dcg = math.fsum(1.0 / math.log2(p + 2) for p, r in enumerate(list(ranked)[:K]) if int(r) in relevant)
    idcg = math.fsum(1.0 / math.log2(p + 2) for p in range(min(K, len(relevant))))
    return dcg / idcg


def rank_items(scores, items, exclude=None, K=None) -> np.ndarray:
    """Items by descending score, ties by ascending id; ``exclude`` removed."""
    items = np.asarray(items)
    scores = np.asarray(scores, dtype=np.float64)
    if exclude is not None and len(exclude):
        keep = ~np.isin(items, np.asarray(exclude))
        items, scores = items[keep], scores[keep]
    order = np.lexsort((items, -scores))
    return items[order] if K is None else items[order[:K]]


def _user_metrics(ranked, relevant, ks):
    hit = np.isin(ranked, relevant).astype(np.float64)
    # the ideal list may be longer than the ranked one
    disc = 1.0 / np.log2(np.arange(2, max(len(ranked), max(ks)) + 2))
    out = []
    for K in ks:
        h = hit[:K]
        idcg = math.fsum(disc[: min(K, len(relevant))].tolist())
        dcg = math.fsum((h * disc[: len(h)]).tolist())
        out.append((math.fsum(h.tolist()) / len(relevant), dcg / idcg if idcg > 0 else 0.0))
    return out


def _groups(pairs, n_users):
    order = np.lexsort((pairs[:, 1], pairs[:, 0]))
    pairs = pairs[order]
    bounds = np.searchsorted(pairs[:, 0], np.arange(n_users + 1))
    return [pairs[bounds[u] : bounds[u + 1], 1] for u in range(n_users)]


def representations(params, ukg: UnifiedKnowledgeGraph, cfg: ModelConfig, sample_size: int, seed: int):
    """Origin-tangent factors of every user and every item under a fixed sampling."""
    rng = np.random.default_rng([seed, EVAL_STREAM])
    users = np.arange(ukg.n_users)
    sample = sample_khop(ukg, users, ukg.items, cfg.depth, sample_size, rng)
    return tangent_representations(params, sample, cfg, ukg.interaction_relation)


def topk_metrics(U, I, items, relevant_pairs, exclude_pairs, n_users, ks=DEFAULT_K, threads: int = 1):
    """Average Recall@K and NDCG@K over users with at least one relevant item.

    ``relevant_pairs``/``exclude_pairs`` hold ``(user, item)`` rows with item
    ids from ``items``.  Returns rows ``{K, recall, ndcg, users}``.
    """
    ks = sorted(set(int(k) for k in ks))
    if not ks or ks[0] < 1:
        raise ValueError("K values must be >= 1")
    rel = _groups(np.asarray(relevant_pairs).reshape(-1, 2), n_users)
    exc = _groups(np.asarray(exclude_pairs).reshape(-1, 2), n_users) if exclude_pairs is not None and len(exclude_pairs) else None
    users = [u for u in range(n_users) if len(rel[u])]
    kmax = max(ks)

    def one(u):
        ranked = rank_items(U[u] @ I.T, items, None if exc is None else exc[u], kmax)
        return _user_metrics(ranked, rel[u], ks)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            per_user = list(pool.map(one, users, chunksize=max(1, len(users) // (4 * threads))))
    else:
        per_user = [one(u) for u in users]
    rows = []
    for j, K in enumerate(ks):
        n = len(per_user)
        recall = math.fsum(m[j][0] for m in per_user) / n if n else 0.0
        ndcg = math.fsum(m[j][1] for m in per_user) / n if n else 0.0
        rows.append({"K": K, "recall": recall, "ndcg": ndcg, "users": n})
    return rows


def evaluate_topk(params, ukg: UnifiedKnowledgeGraph, cfg: ModelConfig, sample_size: int, relevant_pairs,
                  exclude_pairs=None, ks=DEFAULT_K, seed: int = 0, threads: int = 1):
    """Filtered Top-K evaluation; pairs use item entity ids."""
    U, I = representations(params, ukg, cfg, sample_size, seed)
    return topk_metrics(U, I, ukg.items, relevant_pairs, exclude_pairs, ukg.n_users, ks, threads)


def recommend(params, ukg: UnifiedKnowledgeGraph, cfg: ModelConfig, sample_size: int, user: int, K: int,
              exclude_items=(), seed: int = 0):
    """Top-K ``(item entity id, score)`` for one user."""
    if not 0 <= user < ukg.n_users:
        raise ValueError(f"unknown user {user}")
    U, I = representations(params, ukg, cfg, sample_size, seed)
    scores = U[user] @ I.T
    ranked = rank_items(scores, np.arange(len(ukg.items)), np.flatnonzero(np.isin(ukg.items, exclude_items)), K)
    return [(int(ukg.items[j]), float(scores[j])) for j in ranked]


# --------------------------------------------------------------------------
# output
# --------------------------------------------------------------------------


def write_jsonl(path, records):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def read_jsonl(path):
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


def write_metrics_csv(path, records):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("epoch,split,K,recall,ndcg\n")
        for r in records:
            fh.write(f"{r['epoch']},{r['split']},{r['K']},{r['recall']!r},{r['ndcg']!r}\n")
