"""Acceptance suite.

Every criterion is one test marked ``criterion``; the terminal summary prints
one PASS/FAIL line per criterion.  Run on its own with::

    python3 -m pytest tests/test_acceptance.py -v
    python3 tests/test_acceptance.py
"""

import math
import re
import sys
import time
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from conftest import hyperboloid_exp, hyperboloid_log, random_points, random_tangents  # noqa: E402
from test_evaluation import brute_ndcg, brute_recall  # noqa: E402
from test_model import flat_oracle, params_for  # noqa: E402

from lkgr import cli  # noqa: E402
from lkgr import evaluation as ev  # noqa: E402
from lkgr import graph as g  # noqa: E402
from lkgr import manifold as mf  # noqa: E402
from lkgr import model as m  # noqa: E402
from lkgr import training as tr  # noqa: E402

pytestmark = pytest.mark.slow

CURVATURES = (0.5, 1.0, 2.0)
N = 10_000

# scaled-down book preset shared by the overfit and ablation criteria
OVERFIT = tr.PRESETS["book"].with_(dim=16, depth=1, batch_size=32, monitor_k=10, patience=10**6,
                                   epochs_max=200, track_objective=True)


def constraint(x, c):
    return float(np.max(np.abs(mf.minkowski_inner(x, x) + c)))


def rel_rows(a, b):
    return np.linalg.norm(a - b, axis=1) / np.maximum(np.linalg.norm(b, axis=1), 1e-12)


def training_recall_monitor(ukg, cfg):
    """Recall@monitor_k on the training pairs themselves (nothing excluded)."""
    mcfg = cfg.model_config()

    def monitor(params, epoch):
        row = ev.evaluate_topk(params, ukg, mcfg, cfg.sample_size, ukg.interactions, None, (cfg.monitor_k,), cfg.seed)[0]
        return row["recall"], row["ndcg"]

    return monitor


@pytest.fixture(scope="module")
def synthetic_ukg():
    kg, inter = g.make_synthetic(seed=0)
    return g.build_ukg(kg, inter)


@pytest.fixture(scope="module")
def overfit_runs(synthetic_ukg):
    """Lazily trained full and w/o-IS models at the overfit settings."""
    cache = {}

    def get(ablate=()):
        if ablate not in cache:
            cfg = OVERFIT.with_(ablate=ablate)
            t0 = time.perf_counter()
            res = tr.fit(synthetic_ukg, cfg, training_recall_monitor(synthetic_ukg, cfg))
            cache[ablate] = (res, time.perf_counter() - t0)
        return cache[ablate]

    return get


@pytest.fixture(scope="module")
def bundle(tmp_path_factory):
    root = tmp_path_factory.mktemp("acc")
    kg, inter = g.make_synthetic(seed=0)
    (root / "kg.tsv").write_text("".join(f"{h}\t{r}\t{t}\n" for h, r, t in kg.triples.tolist()))
    (root / "ui.tsv").write_text("".join(f"{u}\t{i}\t1\n" for u, i in inter.pairs.tolist()))
    args = ["ingest", "--kg", str(root / "kg.tsv"), "--interactions", str(root / "ui.tsv"), "--out", str(root / "b")]
    assert cli.main(args) == 0
    return root / "b"


@pytest.mark.criterion(1, "manifold constraint suite")
def test_constraint_suite(record_property):
    rng = np.random.default_rng(101)
    d, S = 8, 4
    worst, t0 = 0.0, time.perf_counter()
    for c in CURVATURES:
        x, y = random_points(rng, N, d, c), random_points(rng, N, d, c)
        v = random_tangents(rng, x, c)
        t = rng.normal(size=(N, d))
        b = np.concatenate([np.zeros((N, 1)), rng.normal(size=(N, d))], axis=1)
        A = rng.normal(size=(d, d)) / math.sqrt(d)
        A2 = rng.normal(size=(d, 2 * d)) / math.sqrt(2 * d)
        nb = random_points(rng, N * S, d, c).reshape(N, S, d + 1)
        w = rng.dirichlet(np.ones(S), size=N)
        bias = rng.normal(scale=0.3, size=d)
        outs = {
            "exp_map": mf.exp_map(x, v, c),
            "exp_map_origin": mf.exp_map_origin(np.concatenate([np.zeros((N, 1)), t], axis=1), c),
            "encode": mf.encode_euclidean(t, c),
            "project": mf.project_to_manifold(rng.normal(size=(N, d + 1)) * 3, c),
            "linear": mf.lorentz_linear(A, x, c),
            "bias_add": mf.lorentz_bias_add(x, b, c),
            "concat": mf.lorentz_concat(x, y, c),
            "activation_relu": mf.hyperbolic_activation(x, "relu", c),
            "activation_tanh": mf.hyperbolic_activation(x, "tanh", c),
            "propagate_user": m.propagate_user(x, nb, w, c),
            "propagate_item": m.propagate_item(x, nb, w, nb[:, ::-1], w, c),
            "aggregate_sum": m.aggregate("sum", x, y, A, bias, "relu", c),
            "aggregate_concat": m.aggregate("concat", x, y, A2, bias, "tanh", c),
            "aggregate_neighbor": m.aggregate("neighbor", x, y, A, bias, "relu", c),
        }
        for name, out in outs.items():
            err = constraint(out, c)
            worst = max(worst, err)
            assert err <= 1e-6, (name, c, err)
            assert np.all(out[..., 0] > 0), (name, c)
    elapsed = time.perf_counter() - t0
    record_property("max_violation", f"{worst:.2e}")
    record_property("seconds", f"{elapsed:.2f}")
    assert elapsed <= 10.0


@pytest.mark.criterion(2, "round trips, origin maps, unit-curvature formulas")
def test_round_trips(record_property):
    rng = np.random.default_rng(102)
    d = 6
    worst_rt = worst_o = 0.0
    for c in CURVATURES:
        x, y = random_points(rng, N, d, c), random_points(rng, N, d, c)
        v = random_tangents(rng, x, c, max_norm=5.0)
        worst_rt = max(worst_rt,
                       float(np.max(rel_rows(mf.exp_map(x, mf.log_map(x, y, c), c), y))),
                       float(np.max(rel_rows(mf.log_map(x, mf.exp_map(x, v, c), c), v))))
        o = np.broadcast_to(mf.origin(d + 1, c), x.shape)
        v0 = np.concatenate([np.zeros((N, 1)), rng.normal(size=(N, d))], axis=1)
        for got, want in ((mf.exp_map_origin(v0, c), mf.exp_map(o, v0, c)),
                          (mf.log_map_origin(x, c), mf.log_map(o, x, c))):
            worst_o = max(worst_o, float(np.max(np.abs(got - want) / np.maximum(np.abs(want), 1.0))))
    x, y = random_points(rng, N, 3, 1.0), random_points(rng, N, 3, 1.0)
    v = random_tangents(rng, x, 1.0)
    worst_h = 0.0
    for got, want in ((mf.exp_map(x, v, 1.0), hyperboloid_exp(x, v)), (mf.log_map(x, y, 1.0), hyperboloid_log(x, y))):
        worst_h = max(worst_h, float(np.max(np.abs(got - want) / np.maximum(np.abs(want), 1.0))))
    record_property("round_trip", f"{worst_rt:.2e}")
    record_property("origin", f"{worst_o:.2e}")
    record_property("unit_c", f"{worst_h:.2e}")
    assert worst_rt <= 1e-6
    assert worst_o <= 1e-8
    assert worst_h <= 1e-10


@pytest.mark.criterion(3, "gradient check of the training loss")
def test_gradcheck(capsys, record_property):
    ukg = tr.gradcheck_fixture()
    assert (ukg.n_users, len(ukg.items), ukg.n_entities) == (5, 5, 8)
    t0 = time.perf_counter()
    code = cli.main(["gradcheck"])
    elapsed = time.perf_counter() - t0
    out = capsys.readouterr().out
    lines = [l for l in out.splitlines() if l.startswith("aggregator=")]
    combos = {tuple(re.match(r"aggregator=(\w+) L=(\d)", l).groups()) for l in lines}
    assert combos == {(a, str(L)) for a in m.AGGREGATORS for L in (0, 1, 2)}
    for name in ("embeddings", "relations", "A", "b", "theta"):
        assert all(f" {name}=" in l for l in lines), name
    worst = float(re.search(r"max relative error (\S+)", out).group(1))
    record_property("max_error", f"{worst:.2e}")
    record_property("seconds", f"{elapsed:.1f}")
    assert code == 0 and worst <= 1e-4
    assert elapsed <= 60.0


@pytest.mark.criterion(4, "flat-model and metric oracles")
def test_oracles(synthetic_ukg, record_property):
    ukg = synthetic_ukg
    rng = np.random.default_rng(104)
    worst_f = 0.0
    for trial in range(100):
        cfg = m.ModelConfig(
            dim=int(rng.integers(2, 6)),
            depth=int(rng.integers(0, 3)),
            aggregator=m.AGGREGATORS[trial % 3],
            switches=m.AblationSwitches.from_ablate(("hg",)),
        )
        p = params_for(ukg, cfg, seed=1000 + trial)
        pairs = ukg.interactions[rng.choice(len(ukg.interactions), 4, replace=False)]
        s = g.sample_khop(ukg, pairs[:, 0], pairs[:, 1], cfg.depth, int(rng.integers(1, 4)), rng)
        got = m.forward(p, s, cfg, ukg.interaction_relation)
        want = flat_oracle(p, s, cfg, ukg.interaction_relation)
        worst_f = max(worst_f, float(np.max(np.abs(got - want) / np.maximum(np.abs(want), 1.0))))
    worst_m = 0.0
    for _ in range(1000):
        ranked = rng.permutation(30)[: int(rng.integers(1, 25))].tolist()
        relevant = set(rng.choice(30, size=int(rng.integers(1, 8)), replace=False).tolist())
        K = int(rng.integers(1, 30))
        worst_m = max(worst_m,
                      abs(ev.recall_at_k(ranked, relevant, K) - brute_recall(ranked, relevant, K)),
                      abs(ev.ndcg_at_k(ranked, relevant, K) - brute_ndcg(ranked, relevant, K)))
    record_property("flat", f"{worst_f:.2e}")
    record_property("metrics", f"{worst_m:.2e}")
    assert worst_f <= 1e-10
    assert worst_m <= 1e-12


@pytest.mark.criterion(5, "overfit on the synthetic UKG")
def test_overfit(synthetic_ukg, overfit_runs, record_property):
    s = synthetic_ukg.summary()
    assert (s["users"], s["items"], s["entities"], s["interactions"]) == (50, 30, 40, 400)
    res, elapsed = overfit_runs()
    recall = [r["recall"] for r in res.history]
    obj = np.array([r["objective"] for r in res.history])
    ma = np.convolve(obj, np.ones(10) / 10, mode="valid")
    record_property("best_recall", f"{max(recall):.4f}")
    record_property("epochs", len(recall))
    record_property("max_ma_rise", f"{float(np.max(np.diff(ma))):.2e}")
    record_property("seconds", f"{elapsed:.0f}")
    assert len(recall) <= 200
    assert max(recall) >= 0.9
    assert np.all(np.diff(ma) <= 0.0)
    assert elapsed <= 300.0


@pytest.mark.criterion(6, "ablation mechanics")
def test_ablations(bundle, overfit_runs, tmp_path, record_property):
    short = ["--dim", "16", "--depth", "1", "--batch-size", "32", "--epochs", "5", "--seed", "0"]
    for variant in ("lka", "hg", "is", "ke"):
        out = tmp_path / variant
        assert cli.main(["train", "--bundle", str(bundle), "--out", str(out), *short, "--ablate", variant]) == 0
        rows = ev.read_jsonl(out / "metrics.jsonl")
        assert [r["K"] for r in rows] == list(ev.DEFAULT_K)
        assert all(math.isfinite(r["recall"]) and math.isfinite(r["ndcg"]) for r in rows)
        assert tr.load_checkpoint(out / "checkpoint.npz").config.ablate == (variant,)
    full = max(r["recall"] for r in overfit_runs()[0].history)
    no_is = max(r["recall"] for r in overfit_runs(("is",))[0].history)
    record_property("full", f"{full:.4f}")
    record_property("without_is", f"{no_is:.4f}")
    assert no_is < full


@pytest.mark.criterion(7, "protocol fidelity")
def test_protocol(record_property):
    table = {
        "book": (64, 1, 128, 8, 1e-3, 5e-7, "concat"),
        "movie": (32, 2, 4096, 4, 2e-3, 1e-7, "concat"),
        "restaurant": (32, 1, 4096, 8, 2e-3, 1e-7, "sum"),
    }
    for name, want in table.items():
        p = tr.PRESETS[name]
        assert (p.dim, p.depth, p.batch_size, p.sample_size, p.eta, p.lam, p.aggregator) == want, name
    rng = np.random.default_rng(107)
    for n in (1, 2, 5, 10, 99, 400, 1001, 12345):
        pairs = [(k // 50, k % 50) for k in range(n)]
        s = ev.split_dataset(g.InteractionMatrix(pairs, n // 50 + 1), seed=int(rng.integers(2**31)))
        sizes = np.array([len(s.train), len(s.eval), len(s.test)])
        assert sizes.sum() == n and np.all(np.abs(sizes - np.array([0.6, 0.2, 0.2]) * n) <= 1), (n, sizes)
    assert ev.DEFAULT_K == (1, 5, 10, 20, 50, 100)
    args = cli.build_parser().parse_args(["eval", "--checkpoint", "x"])
    assert args.k is None  # cmd_eval falls back to DEFAULT_K
    record_property("presets", len(table))


@pytest.mark.criterion(8, "determinism of train and eval")
def test_determinism(bundle, tmp_path, record_property):
    flags = ["--dim", "8", "--epochs", "4", "--batch-size", "64", "--seed", "3", "--threads", "1"]
    files = []
    for name in ("a", "b"):
        out = tmp_path / name
        assert cli.main(["train", "--bundle", str(bundle), "--out", str(out), *flags]) == 0
        assert cli.main(["eval", "--checkpoint", str(out / "checkpoint.npz"), "--threads", "1"]) == 0
        files.append({f: (out / f).read_bytes() for f in ("history.jsonl", "metrics.jsonl", "eval_metrics.jsonl")})
    assert files[0] == files[1]
    record_property("files_compared", len(files[0]))


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-v", "-p", "no:cacheprovider"]))
