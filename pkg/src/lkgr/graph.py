"""Unified user-item-entity graph: ingestion, adjacency, and neighbor sampling.

Node ids: KG entities (items are entities) occupy ``[0, n_entities)`` and
users are offset by ``n_entities``.  KG relations are densely re-indexed in
sorted order of their raw ids; the interaction relation gets the next id.
"""

from __future__ import annotations

import logging
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import _kernels

log = logging.getLogger(__name__)

INTERACTION = "interaction"
KG = "kg"


class InputError(ValueError):
    """Malformed or inconsistent dataset input."""


class ParseError(InputError):
    def __init__(self, path, line_no: int, message: str):
        self.path = str(path)
        self.line_no = line_no
        super().__init__(f"{path}:{line_no}: {message}")


# --------------------------------------------------------------------------
# ingestion
# --------------------------------------------------------------------------


def _read_rows(path, min_cols: int, max_cols: int):
    rows = []
    with open(path, encoding="utf-8") as fh:
        for line_no, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split("\t")
            if not min_cols <= len(parts) <= max_cols:
                raise ParseError(path, line_no, f"expected {min_cols}-{max_cols} tab-separated fields, got {len(parts)}")
            rows.append((line_no, parts))
    if not rows:
        raise InputError(f"{path}: no records")
    return rows


def _int(path, line_no, text):
    try:
        value = int(text)
    except ValueError:
        raise ParseError(path, line_no, f"not an integer id: {text!r}") from None
    if value < 0:
        raise ParseError(path, line_no, f"negative id: {value}")
    return value


@dataclass
class KnowledgeGraph:
    """KG triples with raw ids, in file order."""

    triples: np.ndarray  # (T, 3) int64: head, relation, tail
    relation_vocab: dict[int, int]  # raw relation id -> dense id

    def __len__(self):
        return len(self.triples)

    @classmethod
    def from_triples(cls, triples) -> "KnowledgeGraph":
        arr = np.asarray(triples, dtype=np.int64).reshape(-1, 3)
        vocab = {int(r): k for k, r in enumerate(np.unique(arr[:, 1]))}
        return cls(arr, vocab)


def load_kg_triples(path) -> KnowledgeGraph:
    """Read ``head<TAB>relation<TAB>tail`` lines."""
    triples = [
        tuple(_int(path, n, p) for p in parts) for n, parts in _read_rows(path, 3, 3)
    ]
    return KnowledgeGraph.from_triples(triples)


@dataclass
class InteractionMatrix:
    """Deduplicated positive ``(user, item)`` pairs, sorted."""

    pairs: np.ndarray  # (P, 2) int64
    n_users: int
    n_items: int = field(default=0)

    def __post_init__(self):
        pairs = np.asarray(self.pairs, dtype=np.int64).reshape(-1, 2)
        self.pairs = np.unique(pairs, axis=0) if len(pairs) else pairs
        if len(self.pairs):
            self.n_users = max(self.n_users, int(self.pairs[:, 0].max()) + 1)
            self.n_items = max(self.n_items, int(self.pairs[:, 1].max()) + 1)

    def __len__(self):
        return len(self.pairs)

    def user_items(self) -> list[np.ndarray]:
        """Item ids per user (sorted)."""
        order = np.searchsorted(self.pairs[:, 0], np.arange(self.n_users + 1))
        return [self.pairs[order[u] : order[u + 1], 1] for u in range(self.n_users)]

    def item_users(self) -> dict[int, np.ndarray]:
        out: dict[int, list] = {}
        for u, i in self.pairs:
            out.setdefault(int(i), []).append(int(u))
        return {i: np.asarray(us, dtype=np.int64) for i, us in out.items()}

    def subset(self, mask) -> "InteractionMatrix":
        return InteractionMatrix(self.pairs[mask], self.n_users, self.n_items)


def load_interactions(path, positive_threshold: float | None = None) -> InteractionMatrix:
    """Read ``user<TAB>item[<TAB>rating]`` lines.

    Rows rated below ``positive_threshold`` are dropped; a row without a rating
    is an implicit positive.  ``None`` keeps every observed pair.
    """
    pairs = []
    for n, parts in _read_rows(path, 2, 3):
        u, i = _int(path, n, parts[0]), _int(path, n, parts[1])
        if len(parts) == 3 and positive_threshold is not None:
            try:
                rating = float(parts[2])
            except ValueError:
                raise ParseError(path, n, f"not a rating: {parts[2]!r}") from None
            if rating < positive_threshold:
                continue
        pairs.append((u, i))
    return InteractionMatrix(np.asarray(pairs, dtype=np.int64).reshape(-1, 2), 0)


def load_alignment(path) -> dict[int, int]:
    """Read ``item_id<TAB>entity_id`` lines."""
    out = {}
    for n, parts in _read_rows(path, 2, 2):
        out[_int(path, n, parts[0])] = _int(path, n, parts[1])
    return out


# --------------------------------------------------------------------------
# unified graph
# --------------------------------------------------------------------------


def _csr(n_nodes: int, src, dst, rel):
    order = np.lexsort((dst, rel, src))  # per node, sorted by (relation, neighbor)
    src, dst, rel = src[order], dst[order], rel[order]
    indptr = np.zeros(n_nodes + 1, dtype=np.int64)
    np.add.at(indptr, src + 1, 1)
    return np.cumsum(indptr), np.ascontiguousarray(dst), np.ascontiguousarray(rel)


@dataclass
class UnifiedKnowledgeGraph:
    n_entities: int
    n_users: int
    n_relations: int  # KG relations; the interaction relation is ``n_relations``
    triples: np.ndarray  # (T, 3) dense ids
    interactions: np.ndarray  # (P, 2) user id, item entity id
    items: np.ndarray  # item universe as entity ids
    item_ids: np.ndarray  # original item ids, aligned with ``items``
    kg_indptr: np.ndarray
    kg_indices: np.ndarray
    kg_rel: np.ndarray
    ui_indptr: np.ndarray
    ui_indices: np.ndarray
    relation_vocab: dict[int, int] = field(default_factory=dict)

    @property
    def n_nodes(self) -> int:
        return self.n_entities + self.n_users

    @property
    def user_offset(self) -> int:
        return self.n_entities

    @property
    def interaction_relation(self) -> int:
        return self.n_relations

    @property
    def n_relation_types(self) -> int:
        """KG relations plus the interaction relation."""
        return self.n_relations + 1

    def user_node(self, u):
        return np.asarray(u, dtype=np.int64) + self.n_entities

    def node_user(self, node):
        return np.asarray(node, dtype=np.int64) - self.n_entities

    def _adj(self, relation_class):
        if relation_class == KG:
            return self.kg_indptr, self.kg_indices
        if relation_class == INTERACTION:
            return self.ui_indptr, self.ui_indices
        raise ValueError(f"unknown relation class {relation_class!r}")

    def neighbors(self, node: int, relation_class: str | None = None) -> list[tuple[int, int]]:
        """``(relation, neighbor)`` pairs of ``node``, sorted."""
        out = []
        if relation_class in (None, INTERACTION):
            a, b = self.ui_indptr[node], self.ui_indptr[node + 1]
            out += [(self.interaction_relation, int(n)) for n in self.ui_indices[a:b]]
        if relation_class in (None, KG):
            a, b = self.kg_indptr[node], self.kg_indptr[node + 1]
            out += [(int(r), int(n)) for r, n in zip(self.kg_rel[a:b], self.kg_indices[a:b])]
        return sorted(out)

    def entity_pairs(self, pairs) -> np.ndarray:
        """Map ``(user, item id)`` rows to ``(user, item entity id)``."""
        pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
        idx = np.searchsorted(self.item_ids, pairs[:, 1])
        idx = np.minimum(idx, max(len(self.item_ids) - 1, 0))
        if len(pairs) and (len(self.item_ids) == 0 or np.any(self.item_ids[idx] != pairs[:, 1])):
            raise InputError("pairs reference items outside the item universe")
        return np.column_stack([pairs[:, 0], self.items[idx] if len(pairs) else pairs[:, 1]])

    def item_id_of(self, entity: int) -> int:
        hit = np.flatnonzero(self.items == entity)
        if not hit.size:
            raise KeyError(entity)
        return int(self.item_ids[hit[0]])

    def degrees(self) -> np.ndarray:
        return np.diff(self.kg_indptr) + np.diff(self.ui_indptr)

    def summary(self) -> dict:
        return {
            "users": int(self.n_users),
            "items": int(len(self.items)),
            "entities": int(self.n_entities),
            "relations": int(self.n_relation_types),
            "interactions": int(len(self.interactions)),
            "kg_triples": int(len(self.triples)),
        }


def build_ukg(
    kg: KnowledgeGraph,
    interactions: InteractionMatrix,
    alignment: dict[int, int] | None = None,
    items=None,
    n_users: int | None = None,
) -> UnifiedKnowledgeGraph:
    """Merge KG triples and user-item interactions into one graph.

    ``alignment`` maps item ids to entity ids (identity when omitted).
    ``items`` fixes the item universe (defaults to the interacted items) so a
    graph built from a training split still ranks every item.
    """
    triples_raw = np.asarray(kg.triples, dtype=np.int64).reshape(-1, 3)
    rel_dense = np.array([kg.relation_vocab[int(r)] for r in triples_raw[:, 1]], dtype=np.int64)
    triples = np.column_stack([triples_raw[:, 0], rel_dense, triples_raw[:, 2]]) if len(triples_raw) else triples_raw
    n_rel = len(kg.relation_vocab)

    item_ids = np.unique(interactions.pairs[:, 1]) if items is None else np.unique(np.asarray(items, dtype=np.int64))
    align = alignment if alignment is not None else {}
    to_entity = (lambda i: align.get(int(i), -1)) if alignment is not None else int
    item_entities = np.array([to_entity(i) for i in item_ids], dtype=np.int64)

    known = set(np.unique(triples[:, [0, 2]]).tolist()) if len(triples) else set()
    offenders = [int(i) for i, e in zip(item_ids, item_entities) if e < 0 or e not in known]
    if offenders:
        shown = ", ".join(map(str, offenders[:20]))
        more = f" (+{len(offenders) - 20} more)" if len(offenders) > 20 else ""
        raise InputError(f"items without a KG entity: {shown}{more}")

    n_entities = 0
    if len(triples):
        n_entities = int(triples[:, [0, 2]].max()) + 1
    users_needed = int(interactions.pairs[:, 0].max()) + 1 if len(interactions) else 0
    n_users = max(users_needed, interactions.n_users, n_users or 0)
    n_nodes = n_entities + n_users

    item_map = dict(zip(item_ids.tolist(), item_entities.tolist()))
    pairs = interactions.pairs
    if len(pairs):
        missing = sorted({int(i) for i in pairs[:, 1]} - set(item_map))
        if missing:
            raise InputError(f"interactions reference items outside the item universe: {missing[:20]}")
        ent = np.array([item_map[int(i)] for i in pairs[:, 1]], dtype=np.int64)
        inter = np.column_stack([pairs[:, 0], ent])
    else:
        inter = np.zeros((0, 2), dtype=np.int64)

    h, r, t = triples[:, 0], triples[:, 1], triples[:, 2]
    kg_csr = _csr(n_nodes, np.concatenate([h, t]), np.concatenate([t, h]), np.concatenate([r, r]))
    u_nodes = inter[:, 0] + n_entities
    i_nodes = inter[:, 1]
    star = np.full(2 * len(inter), n_rel, dtype=np.int64)
    ui_csr = _csr(n_nodes, np.concatenate([u_nodes, i_nodes]), np.concatenate([i_nodes, u_nodes]), star)

    return UnifiedKnowledgeGraph(
        n_entities=n_entities,
        n_users=n_users,
        n_relations=n_rel,
        triples=triples,
        interactions=inter,
        items=item_entities,
        item_ids=item_ids,
        kg_indptr=kg_csr[0],
        kg_indices=kg_csr[1],
        kg_rel=kg_csr[2],
        ui_indptr=ui_csr[0],
        ui_indices=ui_csr[1],
        relation_vocab=dict(kg.relation_vocab),
    )


# --------------------------------------------------------------------------
# sampling
# --------------------------------------------------------------------------


def sample_batch(ukg: UnifiedKnowledgeGraph, nodes, relation_class: str, size: int, rng):
    """Sample ``size`` neighbors for each node.

    Returns ``(neighbors, relations, empty)`` with shapes ``(n, size)``,
    ``(n, size)`` and ``(n,)``.  Rows with no neighbor of the class are
    flagged in ``empty`` and filled with self-loops.
    """
    if size < 1:
        raise ValueError("sample size must be >= 1")
    nodes = np.ascontiguousarray(np.asarray(nodes, dtype=np.int64).reshape(-1))
    u = rng.random((len(nodes), size))
    indptr, indices = ukg._adj(relation_class)
    picked, pos, empty = _kernels.sample_rows(indptr, indices, nodes, u)
    if relation_class == KG:
        rel = np.where(pos >= 0, ukg.kg_rel[np.maximum(pos, 0)] if len(ukg.kg_rel) else 0, ukg.interaction_relation)
    else:
        rel = np.full(picked.shape, ukg.interaction_relation, dtype=np.int64)
    picked = np.where(empty[:, None], nodes[:, None], picked)
    return picked, rel.astype(np.int64), empty


def sample_neighbors(ukg: UnifiedKnowledgeGraph, node: int, relation_class: str, size: int, rng):
    """``size`` ``(relation, neighbor)`` draws for one node; ``[]`` marks an empty neighborhood."""
    picked, rel, empty = sample_batch(ukg, [node], relation_class, size, rng)
    if empty[0]:
        return []
    return list(zip(rel[0].tolist(), picked[0].tolist()))


@dataclass
class SampledNeighborhood:
    """Fixed-size sampled ego-networks for a batch of ``(user, item)`` pairs.

    All ids are node ids.  ``kg_nodes[l]`` has shape ``(B, size**l)``;
    ``kg_nodes[0]`` is the item itself.  ``kg_rels[l]`` and ``kg_empty[l]``
    (``l >= 1``) give the relation of each edge into layer ``l`` and which
    layer ``l-1`` parents had no KG neighbor.
    """

    users: np.ndarray
    items: np.ndarray
    size: int
    user_items: np.ndarray
    user_empty: np.ndarray
    item_users: np.ndarray
    item_users_empty: np.ndarray
    kg_nodes: list
    kg_rels: list
    kg_empty: list

    @property
    def depth(self) -> int:
        return len(self.kg_nodes) - 1

    def edge_count(self) -> int:
        """Sampled edges per pair: ``|N(u)| + |N_UI(i)| + sum_l size**l``."""
        return self.user_items.shape[1] + self.item_users.shape[1] + sum(
            k.shape[1] for k in self.kg_nodes[1:]
        )


def sample_khop(ukg: UnifiedKnowledgeGraph, users, items, L: int, size: int, rng) -> SampledNeighborhood:
    """Sample interaction neighborhoods of the users and items and ``L`` KG hops of the items.

    ``users`` are user ids (not node ids); ``items`` are item entity ids.
    """
    if L < 0:
        raise ValueError("depth must be >= 0")
    user_nodes = ukg.user_node(np.atleast_1d(users))
    items = np.atleast_1d(np.asarray(items, dtype=np.int64))
    B = len(items)
    ui, _, ue = sample_batch(ukg, user_nodes, INTERACTION, size, rng)
    iu, _, ie = sample_batch(ukg, items, INTERACTION, size, rng)
    kg_nodes, kg_rels, kg_empty = [items[:, None]], [None], [None]
    for _ in range(L):
        parents = kg_nodes[-1]
        nb, rel, em = sample_batch(ukg, parents.reshape(-1), KG, size, rng)
        kg_nodes.append(nb.reshape(B, -1))
        kg_rels.append(rel.reshape(B, -1))
        kg_empty.append(em.reshape(B, -1))
    return SampledNeighborhood(user_nodes, items, size, ui, ue, iu, ie, kg_nodes, kg_rels, kg_empty)


# --------------------------------------------------------------------------
# statistics and synthetic data
# --------------------------------------------------------------------------


def degree_histogram(ukg: UnifiedKnowledgeGraph) -> dict[int, int]:
    """Exact ``degree -> number of nodes`` over all nodes, sorted by degree."""
    counts = Counter(ukg.degrees().tolist())
    return dict(sorted(counts.items()))


def write_degree_csv(hist: dict[int, int], path):
    path = Path(path)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("degree,count\n")
        for deg, cnt in hist.items():
            fh.write(f"{deg},{cnt}\n")


def _zipf_weights(n: int, exponent: float, rng) -> np.ndarray:
    w = np.arange(1, n + 1, dtype=np.float64) ** (-exponent)
    w = w[rng.permutation(n)]
    return w / w.sum()


def _activity(n_users, total, cap, exponent, rng, floor=3):
    """Zipf-shaped per-user counts in ``[floor, cap]`` summing close to ``total``."""
    w = _zipf_weights(n_users, exponent * 0.6, rng)
    lo, hi = 0.0, float(total) * 4
    for _ in range(60):
        mid = (lo + hi) / 2
        if np.clip(np.round(w * mid), floor, cap).sum() < total:
            lo = mid
        else:
            hi = mid
    return np.clip(np.round(w * hi), floor, cap).astype(int)


def make_synthetic(
    n_users: int = 50,
    n_items: int = 30,
    n_entities: int = 40,
    n_relations: int = 3,
    n_interactions: int = 400,
    exponent: float = 1.2,
    seed: int = 0,
    max_activity: int = 10,
) -> tuple[KnowledgeGraph, InteractionMatrix]:
    """Seeded scale-free user-item-entity data.

    ``n_entities`` counts all KG entities including the ``n_items`` items.
    Attribute and item popularity follow Zipf laws, user activity too; each
    user favors the items around one popular attribute, so KG paths and
    co-interactions carry signal.  Per-user activity is capped at
    ``max_activity`` positives.
    """
    if n_entities <= n_items:
        raise ValueError("n_entities must exceed n_items (items are entities)")
    rng = np.random.default_rng(seed)
    n_attr = n_entities - n_items
    attrs = np.arange(n_items, n_entities)
    attr_pop = _zipf_weights(n_attr, exponent, rng)
    attr_rel = rng.integers(0, n_relations, size=n_attr)
    attr_rel[:n_relations] = np.arange(min(n_relations, n_attr))

    triples = []
    for item in range(n_items):
        k = int(rng.integers(1, 4))
        chosen = rng.choice(n_attr, size=min(k, n_attr), replace=False, p=attr_pop)
        triples += [(item, int(attr_rel[a]), int(attrs[a])) for a in sorted(chosen)]
    # a few attribute-attribute links give two-hop structure beyond items
    for a in range(n_attr):
        b = int(rng.choice(n_attr, p=attr_pop))
        if b != a:
            triples.append((int(attrs[a]), int(attr_rel[a]), int(attrs[b])))
    kg = KnowledgeGraph.from_triples(triples)

    item_pop = _zipf_weights(n_items, exponent, rng)
    by_attr = {a: sorted({h for h, _, t in triples if t == attrs[a] and h < n_items}) for a in range(n_attr)}
    activity = _activity(n_users, n_interactions, min(max_activity, n_items), exponent, rng)

    pairs = []
    for u in range(n_users):
        fav = int(rng.choice(n_attr, p=attr_pop))
        liked = set()
        pool = by_attr[fav]
        while len(liked) < activity[u]:
            if pool and rng.random() < 0.7:
                p = item_pop[pool] / item_pop[pool].sum()
                liked.add(int(rng.choice(pool, p=p)))
            else:
                liked.add(int(rng.choice(n_items, p=item_pop)))
            if len(liked) == len(pool) and len(pool) >= activity[u]:
                break
        pairs += [(u, i) for i in sorted(liked)]
    return kg, InteractionMatrix(np.asarray(pairs, dtype=np.int64), n_users, n_items)
