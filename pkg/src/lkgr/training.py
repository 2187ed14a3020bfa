"""Loss, negative sampling, Adam, the training loop, and checkpoints."""

from __future__ import annotations

import io
import json
import logging
import math
import zipfile
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np

from . import __version__
from . import autodiff as ad
from . import manifold as mf
from .graph import InputError, UnifiedKnowledgeGraph, sample_khop
from .model import AblationSwitches, ModelConfig, PARAM_NAMES, forward, init_params

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = 1
REFERENCE_STREAM = 0xB1A5  # rng stream of the fixed objective reference draw
REGULARIZED = ("embeddings", "relations", "A", "b")
LOSSES = ("bce", "literal")


@dataclass(frozen=True)
class TrainConfig:
    dim: int = 64
    depth: int = 1
    batch_size: int = 128
    sample_size: int = 8
    eta: float = 1e-3
    lam: float = 5e-7
    aggregator: str = "concat"
    activation: str = "relu"
    final_activation: str = "tanh"
    epochs_max: int = 200
    patience: int = 10
    seed: int = 0
    loss: str = "bce"
    ablate: tuple = ()
    monitor_k: int = 20
    track_objective: bool = False

    def __post_init__(self):
        if self.loss not in LOSSES:
            raise ValueError(f"loss must be one of {LOSSES}, got {self.loss!r}")
        for name in ("batch_size", "sample_size"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.epochs_max < 0 or self.patience < 1:
            raise ValueError("epochs_max must be >= 0 and patience >= 1")
        if self.eta <= 0 or self.lam < 0:
            raise ValueError("eta must be > 0 and lam >= 0")
        object.__setattr__(self, "ablate", tuple(sorted(set(self.ablate))))
        self.model_config()  # validates aggregator, activation, ablations

    def model_config(self) -> ModelConfig:
        return ModelConfig(
            dim=self.dim,
            depth=self.depth,
            aggregator=self.aggregator,
            activation=self.activation,
            final_activation=self.final_activation,
            switches=AblationSwitches.from_ablate(self.ablate),
        )

    def with_(self, **kw) -> "TrainConfig":
        return replace(self, **kw)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["ablate"] = list(self.ablate)
        return d

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown config key(s): {sorted(unknown)}")
        data = dict(data)
        if "ablate" in data:
            data["ablate"] = tuple(data["ablate"])
        return cls(**data)


# Per-dataset hyper-parameters: dim, depth, batch size, sample size, learning rate, L2, aggregator.
PRESETS = {
    "book": TrainConfig(dim=64, depth=1, batch_size=128, sample_size=8, eta=1e-3, lam=5e-7, aggregator="concat"),
    "movie": TrainConfig(dim=32, depth=2, batch_size=4096, sample_size=4, eta=2e-3, lam=1e-7, aggregator="concat"),
    "restaurant": TrainConfig(dim=32, depth=1, batch_size=4096, sample_size=8, eta=2e-3, lam=1e-7, aggregator="sum"),
}
PRESET_THRESHOLDS = {"book": None, "movie": 4.0, "restaurant": None}


# --------------------------------------------------------------------------
# negatives
# --------------------------------------------------------------------------


def sample_negatives(user: int, positives, items, k: int, rng) -> np.ndarray:
    """``k`` items drawn uniformly (with replacement) from ``items`` minus ``positives``."""
    items = np.asarray(items, dtype=np.int64)
    if k == 0:
        return np.zeros(0, dtype=np.int64)
    pool = np.setdiff1d(items, np.asarray(positives, dtype=np.int64))
    if pool.size == 0:
        raise InputError(f"user {user} interacted with every item; no negatives available")
    return pool[rng.integers(0, pool.size, size=k)]


def _positive_codes(pairs, n_items_space):
    return np.unique(pairs[:, 0] * n_items_space + pairs[:, 1])


def sample_epoch_negatives(pairs, items, rng):
    """One negative per positive pair by vectorized rejection sampling.

    Returns ``(kept_mask, negatives)``; pairs whose user has interacted with
    every item cannot get a negative and are dropped (with a warning).
    """
    items = np.asarray(items, dtype=np.int64)
    space = int(max(items.max(initial=0), pairs[:, 1].max(initial=0))) + 1
    codes = _positive_codes(pairs, space)
    users, counts = np.unique(pairs[:, 0], return_counts=True)
    full = set(users[counts >= len(items)].tolist())
    keep = np.ones(len(pairs), dtype=bool)
    if full:
        for u in sorted(full):
            log.warning("user %d interacted with every item; skipping", u)
        keep = ~np.isin(pairs[:, 0], list(full))
    neg = np.empty(len(pairs), dtype=np.int64)
    todo = np.flatnonzero(keep)
    while todo.size:
        draw = items[rng.integers(0, len(items), size=todo.size)]
        hit = np.isin(pairs[todo, 0] * space + draw, codes)
        neg[todo[~hit]] = draw[~hit]
        todo = todo[hit]
    return keep, neg


# --------------------------------------------------------------------------
# loss and optimizer
# --------------------------------------------------------------------------


def lkgr_loss(scores, labels, params, lam: float, mode: str = "bce"):
    """Binary cross-entropy on ``sigmoid(scores)`` plus ``lam`` times the squared L2 norm.

    ``mode="literal"`` subtracts the negative-sample term instead of adding it.
    The regularizer covers embeddings, relation matrices, A and b; the
    curvature parameter is excluded.
    """
    sv = ad.value_of(scores)
    bad = np.flatnonzero(~np.isfinite(sv))
    if bad.size:
        raise ad.NonFiniteError(f"non-finite score for sample {int(bad[0])}")
    labels = np.asarray(labels, dtype=bool)
    pos = ad.sum(ad.where(labels, ad.softplus(-scores), 0.0))
    neg = ad.sum(ad.where(labels, 0.0, ad.softplus(scores)))
    data = pos + neg if mode == "bce" else pos - neg
    if lam == 0:
        return data
    reg = None
    for name in REGULARIZED:
        p = params[name]
        term = ad.sum(p * p)
        reg = term if reg is None else reg + term
    return data + lam * reg


@dataclass
class Adam:
    eta: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def step(self, params: dict, grads: dict) -> dict:
        """Return the updated parameters; moments are bias-corrected."""
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        out = {}
        for name, value in params.items():
            g = grads.get(name)
            if g is None:
                out[name] = value
                continue
            m = self.m.get(name, np.zeros_like(value))
            v = self.v.get(name, np.zeros_like(value))
            m = b1 * m + (1.0 - b1) * g
            v = b2 * v + (1.0 - b2) * g * g
            self.m[name], self.v[name] = m, v
            out[name] = value - self.eta * (m / c1) / (np.sqrt(v / c2) + self.eps)
        return out


def adam_step(params, grads, eta, state: Adam | None = None):
    state = state if state is not None else Adam(eta)
    return state.step(params, grads), state


def loss_and_grads(params, sample, labels, cfg: TrainConfig, ukg: UnifiedKnowledgeGraph):
    tape = ad.Tape()
    leaves = {k: tape.var(v) for k, v in params.items()}
    scores = forward(leaves, sample, cfg.model_config(), ukg.interaction_relation)
    loss = lkgr_loss(scores, labels, leaves, cfg.lam, cfg.loss)
    adj = tape.backward(loss)
    return float(loss.value), {k: adj[v.index] for k, v in leaves.items()}


# --------------------------------------------------------------------------
# training loop
# --------------------------------------------------------------------------


@dataclass
class FitResult:
    params: dict
    history: list
    best_epoch: int
    optimizer: Adam
    config: TrainConfig


def fit(
    ukg: UnifiedKnowledgeGraph,
    config: TrainConfig,
    monitor=None,
    params: dict | None = None,
    monitor_split: str = "eval",
) -> FitResult:
    """Train on the interaction edges of ``ukg``.

    ``monitor(params, epoch)`` returns ``(recall, ndcg)`` for early stopping;
    each epoch appends ``{epoch, split, K, loss, recall, ndcg, curvature}``.
    Training stops after ``patience`` epochs without a recall improvement and
    returns the best parameters seen.
    """
    pairs = ukg.interactions
    if len(pairs) == 0:
        raise InputError("empty training set")
    mcfg = config.model_config()
    if params is None:
        params = init_params(ukg.n_nodes, ukg.n_relation_types, mcfg, np.random.default_rng(config.seed))
    opt = Adam(config.eta)
    reference = _reference_objective(ukg, config) if config.track_objective else None
    history = []
    best = (-math.inf, params, 0, opt)
    stale = 0
    for epoch in range(1, config.epochs_max + 1):
        rng = np.random.default_rng([config.seed, epoch])
        order = rng.permutation(len(pairs))
        keep, negs = sample_epoch_negatives(pairs[order], ukg.items, rng)
        epoch_pairs, negs = pairs[order][keep], negs[keep]
        total = 0.0
        for start in range(0, len(epoch_pairs), config.batch_size):
            chunk = epoch_pairs[start : start + config.batch_size]
            users = np.concatenate([chunk[:, 0], chunk[:, 0]])
            items = np.concatenate([chunk[:, 1], negs[start : start + len(chunk)]])
            labels = np.arange(len(users)) < len(chunk)
            sample = sample_khop(ukg, users, items, mcfg.depth, config.sample_size, rng)
            loss, grads = loss_and_grads(params, sample, labels, config, ukg)
            params = opt.step(params, grads)
            total += loss
        recall, ndcg = monitor(params, epoch) if monitor is not None else (math.nan, math.nan)
        c = float(ad.value_of(mf.curvature_from_theta(params["theta"])))
        record = {"epoch": epoch, "split": monitor_split, "K": config.monitor_k, "loss": total,
                  "recall": recall, "ndcg": ndcg, "curvature": c}
        if reference is not None:
            record["objective"] = reference(params)
        history.append(record)
        log.info("epoch %d loss %.6f recall@%d %.5f c %.5f", epoch, total, config.monitor_k, recall, c)
        if monitor is None or recall > best[0]:
            best = (recall, params, epoch, _copy_adam(opt))
            stale = 0
        else:
            stale += 1
            if stale >= config.patience:
                log.info("early stop at epoch %d (best %d)", epoch, best[2])
                break
    if not history:
        return FitResult(params, history, 0, opt, config)
    return FitResult(best[1], history, best[2], best[3], config)


def _reference_objective(ukg: UnifiedKnowledgeGraph, config: TrainConfig):
    """Full-pass loss on one fixed draw of negatives and neighborhoods.

    Unlike the running epoch loss, this is a deterministic function of the
    parameters, so it isolates the optimizer's progress from sampling noise.
    """
    rng = np.random.default_rng([config.seed, REFERENCE_STREAM])
    pairs = ukg.interactions
    keep, negs = sample_epoch_negatives(pairs, ukg.items, rng)
    pos = pairs[keep]
    users = np.concatenate([pos[:, 0], pos[:, 0]])
    items = np.concatenate([pos[:, 1], negs[keep]])
    labels = np.arange(len(users)) < len(pos)
    mcfg = config.model_config()
    sample = sample_khop(ukg, users, items, mcfg.depth, config.sample_size, rng)

    def objective(params):
        scores = forward(params, sample, mcfg, ukg.interaction_relation)
        return float(lkgr_loss(scores, labels, params, config.lam, config.loss))

    return objective


def _copy_adam(opt: Adam) -> Adam:
    return Adam(opt.eta, opt.beta1, opt.beta2, opt.eps, opt.t, dict(opt.m), dict(opt.v))


# --------------------------------------------------------------------------
# checkpoints
# --------------------------------------------------------------------------


def _add_array(zf: zipfile.ZipFile, name: str, arr):
    buf = io.BytesIO()
    np.lib.format.write_array(buf, np.asarray(arr, order="C"), allow_pickle=False)  # keeps 0-d arrays 0-d
    info = zipfile.ZipInfo(name + ".npy", date_time=(1980, 1, 1, 0, 0, 0))
    info.compress_type = zipfile.ZIP_STORED
    zf.writestr(info, buf.getvalue())


def save_checkpoint(path, params: dict, config: TrainConfig, optimizer: Adam | None = None, epoch: int = 0, extra: dict | None = None):
    """Write an ``.npz`` archive: JSON metadata, parameters, Adam moments, epoch.

    Entries are stored in a fixed order with fixed timestamps, so identical
    contents give identical bytes.  Loading never needs pickle.
    """
    optimizer = optimizer or Adam(config.eta)
    meta = {
        "format": CHECKPOINT_FORMAT,
        "version": __version__,
        "epoch": int(epoch),
        "config": config.to_dict(),
        "adam": {"t": optimizer.t, "beta1": optimizer.beta1, "beta2": optimizer.beta2, "eps": optimizer.eps},
        "extra": extra or {},
    }
    blob = np.frombuffer(json.dumps(meta, sort_keys=True).encode("utf-8"), dtype=np.uint8)
    with zipfile.ZipFile(path, "w") as zf:
        _add_array(zf, "meta", blob)
        for name in PARAM_NAMES:
            _add_array(zf, f"param.{name}", ad.value_of(params[name]))
        for name in sorted(optimizer.m):
            _add_array(zf, f"adam_m.{name}", optimizer.m[name])
            _add_array(zf, f"adam_v.{name}", optimizer.v[name])


@dataclass
class Checkpoint:
    params: dict
    config: TrainConfig
    optimizer: Adam
    epoch: int
    meta: dict


def load_checkpoint(path) -> Checkpoint:
    try:
        with np.load(path, allow_pickle=False) as z:
            meta = json.loads(bytes(z["meta"]).decode("utf-8"))
            arrays = {k: z[k] for k in z.files if k != "meta"}
    except (OSError, ValueError, KeyError, zipfile.BadZipFile) as exc:
        raise InputError(f"{path}: not a readable checkpoint ({exc})") from None
    if meta.get("format") != CHECKPOINT_FORMAT:
        raise InputError(f"{path}: unsupported checkpoint format {meta.get('format')!r}")
    config = TrainConfig.from_dict(meta["config"])
    params = {n: arrays[f"param.{n}"] for n in PARAM_NAMES if f"param.{n}" in arrays}
    missing = set(PARAM_NAMES) - set(params)
    if missing:
        raise InputError(f"{path}: missing parameters {sorted(missing)}")
    a = meta["adam"]
    opt = Adam(config.eta, a["beta1"], a["beta2"], a["eps"], a["t"])
    for k, v in arrays.items():
        if k.startswith("adam_m."):
            opt.m[k[7:]] = v
        elif k.startswith("adam_v."):
            opt.v[k[7:]] = v
    return Checkpoint(params, config, opt, int(meta["epoch"]), meta)


# --------------------------------------------------------------------------
# gradient validation
# --------------------------------------------------------------------------


def gradcheck_fixture(seed: int = 0):
    """The 5-user, 5-item, 8-entity graph used for gradient validation."""
    from .graph import build_ukg, make_synthetic

    kg, inter = make_synthetic(
        n_users=5, n_items=5, n_entities=8, n_relations=2, n_interactions=12,
        seed=seed, max_activity=3,
    )
    return build_ukg(kg, inter)


def loss_gradcheck(ukg: UnifiedKnowledgeGraph, config: TrainConfig, seed: int = 0, step: float = 1e-5):
    """Finite-difference check of the full loss w.r.t. every parameter class.

    The biases start non-zero and ``config.lam`` should be sizeable so that every
    coordinate has a gradient well above finite-difference round-off.
    """
    rng = np.random.default_rng(seed)
    mcfg = config.model_config()
    params = init_params(ukg.n_nodes, ukg.n_relation_types, mcfg, rng)
    params["b"] = rng.normal(scale=0.3, size=params["b"].shape)
    params["theta"] = np.array(mf.theta_for_curvature(float(rng.uniform(0.6, 1.6))))
    pairs = ukg.interactions
    keep, negs = sample_epoch_negatives(pairs, ukg.items, rng)
    users = np.concatenate([pairs[keep, 0], pairs[keep, 0]])
    items = np.concatenate([pairs[keep, 1], negs[keep]])
    labels = np.arange(len(users)) < int(keep.sum())
    sample = sample_khop(ukg, users, items, mcfg.depth, config.sample_size, rng)

    def f(p):
        scores = forward(p, sample, mcfg, ukg.interaction_relation)
        return lkgr_loss(scores, labels, p, config.lam, config.loss)

    return ad.gradient_check(f, params, step=step)
