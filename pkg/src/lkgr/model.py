"""Knowledge-aware attentive Lorentzian graph convolution.

Parameters are kept in a plain dict of arrays:

``embeddings``  ``(n_nodes, d)`` Euclidean table, encoded onto the manifold per pass
``relations``   ``(n_relation_types, d, d)`` one attention matrix per relation
``A``           ``(n_pairs, d, d)`` or ``(n_pairs, d, 2d)`` for the concat aggregator
``b``           ``(n_pairs, d)`` origin-tangent biases
``theta``       scalar, ``c = softplus(theta) + 1e-4``

Aggregator pair 0 updates users; pair ``l`` updates the layer ``l - 1`` KG
nodes, so pair 1 produces the final item.  Aggregations that produce the final
user and item points use ``final_activation`` (tanh by default, so the two
score factors are not confined to the non-negative orthant); hidden ones use
``activation``.  The same code runs on plain arrays
(inference) and on taped ``Var`` values (training).
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from . import manifold as mf
from .graph import SampledNeighborhood

AGGREGATORS = ("sum", "concat", "neighbor")
ABLATIONS = ("is", "ke", "hg", "lka")
PARAM_NAMES = ("embeddings", "relations", "A", "b", "theta")


@dataclass(frozen=True)
class AblationSwitches:
    use_interactive_signals: bool = True
    use_kg_extraction: bool = True
    use_hyperbolic: bool = True
    use_attention: bool = True

    @classmethod
    def from_ablate(cls, names) -> "AblationSwitches":
        names = set(names or ())
        unknown = names - set(ABLATIONS)
        if unknown:
            raise ValueError(f"unknown ablation(s): {sorted(unknown)}; choose from {ABLATIONS}")
        return cls("is" not in names, "ke" not in names, "hg" not in names, "lka" not in names)

    def ablated(self) -> list[str]:
        flags = (self.use_interactive_signals, self.use_kg_extraction, self.use_hyperbolic, self.use_attention)
        return [n for n, on in zip(ABLATIONS, flags) if not on]


@dataclass(frozen=True)
class ModelConfig:
    dim: int = 16
    depth: int = 1
    aggregator: str = "concat"
    activation: str = "relu"
    final_activation: str = "tanh"
    switches: AblationSwitches = field(default_factory=AblationSwitches)

    def __post_init__(self):
        if self.aggregator not in AGGREGATORS:
            raise ValueError(f"aggregator must be one of {AGGREGATORS}, got {self.aggregator!r}")
        for act in (self.activation, self.final_activation):
            if act not in mf.ACTIVATIONS:
                raise ValueError(f"unknown activation {act!r}")
        if self.dim < 1 or self.depth < 0:
            raise ValueError("dim must be >= 1 and depth >= 0")

    @property
    def n_pairs(self) -> int:
        return max(self.depth, 1) + 1

    def with_(self, **kw) -> "ModelConfig":
        return replace(self, **kw)


def _xavier(rng, shape, fan_in, fan_out):
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape)


def init_params(n_nodes: int, n_relation_types: int, cfg: ModelConfig, rng) -> dict:
    """Xavier-uniform weights, zero biases, curvature ``c = 1``."""
    d = cfg.dim
    width = 2 * d if cfg.aggregator == "concat" else d
    return {
        "embeddings": _xavier(rng, (n_nodes, d), n_nodes, d),
        "relations": _xavier(rng, (n_relation_types, d, d), d, d),
        "A": _xavier(rng, (cfg.n_pairs, d, width), width, d),
        "b": np.zeros((cfg.n_pairs, d)),
        "theta": np.array(mf.theta_for_curvature(1.0)),
    }


def check_params(params: dict, cfg: ModelConfig):
    missing = set(PARAM_NAMES) - set(params)
    if missing:
        raise ValueError(f"missing parameters: {sorted(missing)}")
    d = cfg.dim
    width = 2 * d if cfg.aggregator == "concat" else d
    want = {"A": (cfg.n_pairs, d, width), "b": (cfg.n_pairs, d)}
    for name, shape in want.items():
        got = ad.value_of(params[name]).shape
        if got != shape:
            raise ValueError(f"parameter {name} has shape {got}, expected {shape}")
    if ad.value_of(params["embeddings"]).shape[1] != d:
        raise ValueError("embedding width does not match dim")


# --------------------------------------------------------------------------
# geometries
# --------------------------------------------------------------------------


class LorentzGeometry:
    """Manifold operations at curvature parameter ``c`` (plain or taped)."""

    hyperbolic = True

    def __init__(self, c):
        self.c = c

    def encode(self, x_e):
        return mf.encode_euclidean(x_e, self.c)

    def log0(self, x):
        return mf.log_map_origin_spatial(x, self.c)

    def exp0(self, t):
        return mf.exp_map_origin_spatial(t, self.c)

    def exp(self, x, v):
        return mf.exp_map(x, v, self.c)

    def log(self, x, y):
        return mf.log_map(x, y, self.c)

    def combine(self, x, s):
        return self.exp0(self.log0(x) + self.log0(s))

    def linear(self, A, x):
        return mf.lorentz_linear(A, x, self.c)

    def bias(self, x, b):
        zero = np.zeros(ad.value_of(b).shape[:-1] + (1,))
        return mf.lorentz_bias_add(x, ad.concat([zero, b], axis=-1), self.c)

    def concat(self, x, s):
        return mf.lorentz_concat(x, s, self.c)

    def activate(self, x, sigma):
        return mf.hyperbolic_activation(x, sigma, self.c)


class EuclideanGeometry:
    """Flat counterpart: exp/log at any point are translations, origin maps are identities."""

    hyperbolic = False

    def encode(self, x_e):
        return x_e

    def log0(self, x):
        return x

    def exp0(self, t):
        return t

    def exp(self, x, v):
        return x + v

    def log(self, x, y):
        return y - x

    def combine(self, x, s):
        return x + s

    def linear(self, A, x):
        return ad.matvec(A, x)

    def bias(self, x, b):
        return x + b

    def concat(self, x, s):
        return ad.concat([x, s], axis=-1)

    def activate(self, x, sigma):
        fn = mf.ACTIVATIONS[sigma] if isinstance(sigma, str) else sigma
        return fn(x)


def geometry_for(params: dict, switches: AblationSwitches):
    if switches.use_hyperbolic:
        return LorentzGeometry(mf.curvature_from_theta(params["theta"]))
    return EuclideanGeometry()


def _as_geometry(c_or_geo):
    if isinstance(c_or_geo, (LorentzGeometry, EuclideanGeometry)):
        return c_or_geo
    return LorentzGeometry(c_or_geo)


# --------------------------------------------------------------------------
# attention and propagation
# --------------------------------------------------------------------------


def attention_weight(h, W_r, t, c):
    """``log_o(h)^T W_r log_o(t)`` on spatial tangent coordinates."""
    geo = _as_geometry(c)
    return ad.sum(geo.log0(h) * ad.matvec(W_r, geo.log0(t)), axis=-1)


def normalize_attention(scores, axis=-1):
    """Numerically stable softmax over ``axis``."""
    if ad.value_of(scores).shape[axis] == 0:
        raise ValueError("cannot normalize an empty neighborhood")
    return ad.softmax(scores, axis=axis)


def _relation_matrices(W, rel):
    rel = np.asarray(rel, dtype=np.int64)
    n = ad.value_of(W).shape[0]
    if rel.size and (rel.min() < 0 or rel.max() >= n):
        bad = sorted(set(rel[(rel < 0) | (rel >= n)].tolist()))
        raise ValueError(f"unknown relation id(s) {bad[:10]} (have {n} relations)")
    return ad.take(W, rel)


def neighborhood_weights(x, nbrs, rel, W, geo, use_attention=True):
    """Softmax-normalized attention of the center points ``x`` ``(..., D)`` to ``nbrs`` ``(..., S, D)``."""
    shape = ad.value_of(nbrs).shape[:-1]
    if not use_attention:
        return np.full(shape, 1.0 / shape[-1])
    Wr = _relation_matrices(W, np.broadcast_to(rel, shape))
    lx = geo.log0(x)
    ln = geo.log0(nbrs)
    scores = ad.sum(lx[..., None, :] * ad.matvec(Wr, ln), axis=-1)
    return normalize_attention(scores)


def tangent_message(x, nbrs, weights, geo, empty=None):
    """``sum_k w_k log_x(n_k)``; rows flagged ``empty`` give the zero vector."""
    logs = geo.log(x[..., None, :], nbrs)
    msg = ad.sum(weights[..., None] * logs, axis=-2)
    if empty is not None and np.any(empty):
        msg = ad.where(np.asarray(empty)[..., None], 0.0, msg)
    return msg


def propagate_user(u, items, weights, c, empty=None):
    """Ego-network summary of a user: ``exp_u(sum_i w_i log_u(i))``."""
    geo = _as_geometry(c)
    return geo.exp(u, tangent_message(u, items, weights, geo, empty))


def propagate_entity(e, nbrs, weights, c, empty=None):
    """Summary of a KG node from its sampled next-layer neighbors."""
    return propagate_user(e, nbrs, weights, c, empty)


def propagate_item(
    i,
    users,
    user_weights,
    entities,
    entity_weights,
    c,
    use_interactive_signals=True,
    use_kg_extraction=True,
    users_empty=None,
    entities_empty=None,
):
    """Item summary combining user and KG messages, each under its own softmax."""
    geo = _as_geometry(c)
    msg = None
    if use_interactive_signals and users is not None:
        msg = tangent_message(i, users, user_weights, geo, users_empty)
    if use_kg_extraction and entities is not None:
        kg = tangent_message(i, entities, entity_weights, geo, entities_empty)
        msg = kg if msg is None else msg + kg
    if msg is None:
        return i
    return geo.exp(i, msg)


def aggregate(kind, x, s, A, b, sigma, c):
    """Combine a node's point ``x`` with its neighborhood summary ``s``."""
    geo = _as_geometry(c)
    if kind == "sum":
        z = geo.combine(x, s)
    elif kind == "concat":
        z = geo.concat(x, s)
    elif kind == "neighbor":
        z = s
    else:
        raise ValueError(f"aggregator must be one of {AGGREGATORS}, got {kind!r}")
    width = ad.value_of(A).shape[-1]
    have = ad.value_of(z).shape[-1] - (1 if geo.hyperbolic else 0)
    if width != have:
        raise ValueError(f"aggregator '{kind}' needs A with {have} columns, got {width}")
    return geo.activate(geo.bias(geo.linear(A, z), b), sigma)


# --------------------------------------------------------------------------
# forward pass
# --------------------------------------------------------------------------


def _pair(params, j):
    return params["A"][j], params["b"][j]


def user_representation(params, sample: SampledNeighborhood, cfg: ModelConfig, interaction_relation: int, trace=None):
    """Final user points ``(Bu, D)`` of the sampled users."""
    sw = cfg.switches
    geo = geometry_for(params, sw)
    emb = params["embeddings"]
    u = geo.encode(ad.take(emb, sample.users))
    if sw.use_interactive_signals:
        nb = geo.encode(ad.take(emb, sample.user_items))
        w = neighborhood_weights(u, nb, interaction_relation, params["relations"], geo, sw.use_attention)
        s = propagate_user(u, nb, w, geo, sample.user_empty)
    else:
        s = u
    A, b = _pair(params, 0)
    out = aggregate(cfg.aggregator, u, s, A, b, cfg.final_activation, geo)
    if trace is not None:
        trace += [u, s, out]
    return out


def item_representation(params, sample: SampledNeighborhood, cfg: ModelConfig, interaction_relation: int, trace=None):
    """Final item points ``(Bi, D)`` after ``depth`` rounds of KG propagation."""
    sw = cfg.switches
    geo = geometry_for(params, sw)
    emb = params["embeddings"]
    W = params["relations"]
    depth = cfg.depth if sw.use_kg_extraction else 0
    if sample.depth < depth:
        raise ValueError(f"sample has depth {sample.depth}, model needs {depth}")
    layers = [geo.encode(ad.take(emb, sample.kg_nodes[l])) for l in range(depth + 1)]
    B = len(sample.items)
    size = sample.size
    D = ad.value_of(layers[0]).shape[-1]

    users = user_w = None
    if sw.use_interactive_signals:
        users = geo.encode(ad.take(emb, sample.item_users))
        user_w = neighborhood_weights(
            layers[0][:, 0], users, interaction_relation, W, geo, sw.use_attention
        )

    for l in range(depth, 0, -1):
        parents = layers[l - 1]
        n_par = ad.value_of(parents).shape[1]
        children = ad.reshape(layers[l], (B, n_par, size, D))
        rel = sample.kg_rels[l].reshape(B, n_par, size)
        empty = sample.kg_empty[l]
        w = neighborhood_weights(parents, children, rel, W, geo, sw.use_attention)
        A, b = _pair(params, l)
        if l > 1:
            s = propagate_entity(parents, children, w, geo, empty)
        else:
            s = propagate_item(
                parents[:, 0], users, user_w, children[:, 0], w[:, 0], geo,
                sw.use_interactive_signals, True, sample.item_users_empty, empty[:, 0],
            )[:, None]
        act = cfg.final_activation if l == 1 else cfg.activation
        layers[l - 1] = aggregate(cfg.aggregator, parents, s, A, b, act, geo)
        if trace is not None:
            trace += [s, layers[l - 1]]

    if depth == 0:
        i = layers[0][:, 0]
        s = propagate_item(i, users, user_w, None, None, geo, sw.use_interactive_signals, False, sample.item_users_empty)
        A, b = _pair(params, 1)
        out = aggregate(cfg.aggregator, i, s, A, b, cfg.final_activation, geo)
        if trace is not None:
            trace += [i, s, out]
        return out
    return layers[0][:, 0]


def score_points(params, u_points, i_points, cfg: ModelConfig):
    """``log_o(u)^T log_o(i)`` on spatial coordinates, row-wise."""
    geo = geometry_for(params, cfg.switches)
    return ad.sum(geo.log0(u_points) * geo.log0(i_points), axis=-1)


def forward(params, sample: SampledNeighborhood, cfg: ModelConfig, interaction_relation: int, trace=None):
    """Scores ``(B,)`` for the sampled ``(user, item)`` pairs."""
    u = user_representation(params, sample, cfg, interaction_relation, trace)
    i = item_representation(params, sample, cfg, interaction_relation, trace)
    if ad.value_of(u).shape[0] != ad.value_of(i).shape[0]:
        raise ValueError("forward needs the same number of users and items")
    return score_points(params, u, i, cfg)


def tangent_representations(params, sample: SampledNeighborhood, cfg: ModelConfig, interaction_relation: int):
    """Origin-tangent user and item factors; their dot products are the scores."""
    params = {k: ad.value_of(v) for k, v in params.items()}
    geo = geometry_for(params, cfg.switches)
    u = user_representation(params, sample, cfg, interaction_relation)
    i = item_representation(params, sample, cfg, interaction_relation)
    return geo.log0(u), geo.log0(i)
