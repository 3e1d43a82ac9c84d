"""Acceptance criteria, one test per criterion.

Each test records a PASS/FAIL line that is printed in the terminal summary
(and inline with ``pytest -s``) before asserting.
"""

import math
import time
import warnings

import numpy as np

from vsgmn.autodiff import Tensor
from vsgmn.cli import main
from vsgmn.data import balanced_batch_sampler, generate_synthetic_dataset
from vsgmn.gbn import assemble_batch, build_graphs
from vsgmn.gmn import (
    AttentionLayerParams,
    GmnState,
    attention_layer,
    init_attention_layer,
    init_layers,
    init_propagation_layer,
    propagation_layer,
    relation_distributions,
    run_gmn,
)
from vsgmn.losses import loss_crc
from vsgmn.train import (
    TrainConfig,
    VsgmnModel,
    harmonic_mean,
    predict_dataset,
    prepare,
    train,
    train_and_evaluate,
    zsl_metrics,
)

import oracles

VARIANTS = ("attention", "propagation")


def test_01_gradient_fidelity(criterion, capsys):
    start = time.perf_counter()
    codes = {v: main(["gradcheck", "--variant", v]) for v in VARIANTS}
    elapsed = time.perf_counter() - start
    out = capsys.readouterr().out
    errors = [float(line.split()[-2]) for line in out.splitlines()
              if line.split()[:1] in (["attention"], ["propagation"])]
    ok = all(c == 0 for c in codes.values()) and elapsed < 60
    criterion(1, "gradient fidelity, both variants", ok,
              f"max rel err {max(errors):.3g}, {elapsed:.1f} s")
    assert ok


def test_02_harmonic_mean_table_rows(criterion):
    h1, h2 = harmonic_mean(82.7, 59.8), harmonic_mean(68.6, 67.4)
    ok = abs(h1 - 69.4) <= 0.05 and abs(h2 - 68.0) <= 0.05
    criterion(2, "harmonic-mean arithmetic", ok, f"H={h1:.3f}, {h2:.3f}")
    assert ok


def _seen_visual_nodes(model, rows, z_rows, n_virtual, cfg):
    s = model.embed_features(rows)
    graphs = build_graphs(s, z_rows, n_virtual=n_virtual)
    state = run_gmn(graphs, model.layers, mask=True, cross=cfg.cross_graph_enabled)
    n_real = rows.shape[0] - n_virtual
    return [h.data[:n_real] for h in state.visual_nodes]


def test_03_mask_soundness(criterion):
    ds = generate_synthetic_dataset(n_seen=6, n_unseen=3, attr_dim=6, feature_dim=8, samples_per_class=5, seed=2)
    rng = np.random.default_rng(0)
    worst = 0.0
    for variant in VARIANTS:
        cfg = TrainConfig(variant=variant, gmn_layers=2)
        ctx = prepare(ds, cfg)
        z = ctx.semantics.standardized
        for trial in range(100):
            model = VsgmnModel.initialize(ds.feature_dim, ds.attr_dim, cfg, np.random.default_rng(trial))
            idx = balanced_batch_sampler(ds, 6, seed=trial).epoch()[0]
            batch = assemble_batch(ds.features[idx], ds.labels[idx], ctx.virtual_rows, ctx.unseen_classes)
            rows = batch.rows.copy()
            base = _seen_visual_nodes(model, rows, z[batch.class_ids], batch.n_virtual, cfg)
            rows[batch.n_real:] += rng.standard_normal((batch.n_virtual, ds.feature_dim)) * rng.uniform(0.1, 10)
            moved = _seen_visual_nodes(model, rows, z[batch.class_ids], batch.n_virtual, cfg)
            worst = max(worst, max(np.abs(a - b).max() for a, b in zip(base, moved)))
    ok = worst < 1e-12
    criterion(3, "mask soundness, 100 trials x 2 variants", ok, f"max abs diff {worst:.3g}")
    assert ok


def test_04_kl_correctness(criterion, rng):
    h = rng.standard_normal((7, 4))
    identical = []
    for variant in VARIANTS:
        layers = init_layers(variant, 2, 4, rng)
        if variant == "propagation":
            for layer in layers:
                layer.semantic = layer.visual
        identical.append(loss_crc(run_gmn(build_graphs(h, h), layers, mask=False)).item())
    p, q = relation_distributions(h, h)
    identical.append(loss_crc(GmnState([], [], [p], [q])).item())

    smallest = math.inf
    for _ in range(1000):
        n = int(rng.integers(1, 11))
        layers = int(rng.integers(1, 4))
        ps = [Tensor(rng.dirichlet(rng.uniform(0.1, 3, n), size=n)) for _ in range(2 * layers)]
        smallest = min(smallest, loss_crc(GmnState([], [], ps[:layers], ps[layers:])).item())

    row = loss_crc(GmnState([], [], [Tensor([[0.5, 0.5]])], [Tensor([[0.75, 0.25]])])).item()
    exact = 0.75 * math.log(1.5) + 0.25 * math.log(0.5)
    ok = all(v == 0.0 for v in identical) and smallest >= 0.0 and abs(row - exact) < 1e-6
    criterion(4, "KL correctness", ok, f"identical={max(identical):.3g}, min={smallest:.3g}, row={row:.6f}")
    assert ok


def _random_graph(rng):
    n, k = int(rng.integers(1, 11)), int(rng.integers(2, 6))
    h_v, h_s = rng.standard_normal((n, k)), rng.standard_normal((n, k))
    n_virtual = int(rng.integers(0, n))
    g = build_graphs(h_v, h_s, n_virtual=n_virtual)
    return h_v, h_s, g.adjacency_masked.data, g.adjacency_semantic.data, k


def test_05_oracle_equivalence(criterion):
    rng = np.random.default_rng(5)
    worst = {"attention": 0.0, "propagation": 0.0, "relations": 0.0}
    for _ in range(200):
        h_v, h_s, adj_v, adj_s, k = _random_graph(rng)
        att = init_attention_layer(k, rng, temperature=rng.uniform(0.5, 15), cross_weight=rng.uniform(-1, 2))
        att.projection.data = rng.standard_normal((k, k))
        out_v, out_s = attention_layer(h_v, h_s, adj_v, adj_s, att)
        w = att.projection.data
        ref_v = oracles.attention_branch(h_v, h_s, adj_v, w, att.temperature, att.cross_weight)
        ref_s = oracles.attention_branch(h_s, h_v, adj_s, w, att.temperature, att.cross_weight)
        worst["attention"] = max(worst["attention"], np.abs(out_v.data - ref_v).max(), np.abs(out_s.data - ref_s).max())

        prop = init_propagation_layer(k, rng, message_dim=int(rng.integers(2, 7)))
        for t in prop.parameters().values():
            t.data = rng.standard_normal(t.shape)
        out_v, out_s = propagation_layer(h_v, h_s, adj_v, adj_s, prop)
        ref_v = oracles.propagation_branch(h_v, h_s, adj_v, oracles.branch_arrays(prop.visual))
        ref_s = oracles.propagation_branch(h_s, h_v, adj_s, oracles.branch_arrays(prop.semantic))
        worst["propagation"] = max(worst["propagation"], np.abs(out_v.data - ref_v).max(),
                                   np.abs(out_s.data - ref_s).max())

        p_v, p_s = relation_distributions(h_v, h_s)
        worst["relations"] = max(worst["relations"],
                                 np.abs(p_v.data - oracles.relation_distribution(h_v)).max(),
                                 np.abs(p_s.data - oracles.relation_distribution(h_s)).max())
    ok = max(worst.values()) < 1e-10
    criterion(5, "oracle equivalence on 200 graphs", ok,
              ", ".join(f"{k} {v:.2g}" for k, v in worst.items()))
    assert ok


def test_06_seeded_end_to_end(criterion):
    start = time.perf_counter()
    ds = generate_synthetic_dataset(n_seen=15, n_unseen=5, attr_dim=12, feature_dim=32,
                                    samples_per_class=30, seed=7)
    result, czsl, _ = train_and_evaluate(ds, TrainConfig(max_iter=50))
    ratio = result.trace[-1]["total"] / result.trace[0]["total"]

    wins = {}
    for seed in (7, 8, 9):
        data = generate_synthetic_dataset(seed=seed)
        accs = {}
        for ablation in ("baseline", "full"):
            _, c, _ = train_and_evaluate(data, TrainConfig(seed=seed).with_ablation(ablation))
            accs[ablation] = c.acc_czsl
        wins[seed] = (accs["full"] >= accs["baseline"], accs["full"], accs["baseline"])
    elapsed = time.perf_counter() - start
    majority = sum(w[0] for w in wins.values()) >= 2

    hard = ratio <= 0.5 and czsl.acc_czsl >= 0.60 and elapsed < 300
    soft = " ".join(f"s{s}:{f:.3f}/{b:.3f}" for s, (_, f, b) in wins.items())
    criterion(6, "seeded end-to-end learning", hard,
              f"loss ratio {ratio:.3f}, czsl {czsl.acc_czsl:.3f}, full/baseline {soft}, "
              f"majority {'yes' if majority else 'no'}, {elapsed:.0f} s")
    if not majority:
        warnings.warn(f"full ablation did not match the baseline on most seeds: {soft}")
    assert ratio <= 0.5
    assert czsl.acc_czsl >= 0.60
    assert elapsed < 300


def test_07_sampler_contract(criterion, synthetic):
    cfg = TrainConfig()
    ctx = prepare(synthetic, cfg)
    n_u = len(synthetic.unseen_classes)
    seen_in_epoch = []
    ok = True
    for idx in balanced_batch_sampler(synthetic, len(synthetic.seen_classes), seed=7).epoch():
        batch = assemble_batch(synthetic.features[idx], synthetic.labels[idx], ctx.virtual_rows, ctx.unseen_classes)
        real = batch.class_ids[: batch.n_real]
        ok &= len(set(real.tolist())) == len(real) and set(real.tolist()) <= set(synthetic.seen_classes.tolist())
        ok &= batch.virtual_flags[-n_u:].all() and not batch.virtual_flags[:-n_u].any()
        ok &= batch.class_ids[-n_u:].tolist() == sorted(synthetic.unseen_classes.tolist())
        seen_in_epoch.extend(idx.tolist())
    covered = set(seen_in_epoch) >= set(synthetic.train_instances.tolist())
    ok = bool(ok and covered)
    criterion(7, "sampler contract over one epoch", ok, f"{len(seen_in_epoch)} draws")
    assert ok


def test_08_over_smoothing_limit(criterion, rng):
    worst = 0.0
    for _ in range(20):
        n, k = int(rng.integers(2, 11)), int(rng.integers(2, 6))
        h = rng.standard_normal((n, k))
        params = AttentionLayerParams(Tensor(rng.standard_normal((k, k))), temperature=0.0, cross_weight=0.0)
        ones = np.ones((n, n))
        once, _ = attention_layer(h, rng.standard_normal((n, k)), ones, ones, params)
        twice, _ = attention_layer(once, once, ones, ones, params)
        worst = max(worst, np.abs(once.data - h.mean(axis=0)).max(), np.abs(twice.data - once.data).max())
    ok = worst < 1e-12
    criterion(8, "over-smoothing limit", ok, f"max abs diff {worst:.3g}")
    assert ok


def test_09_protocol_invariances(criterion, small_dataset):
    model = train(small_dataset, TrainConfig(max_iter=5)).model
    base = predict_dataset(model, small_dataset, "czsl", gamma=1.0)
    gamma_ok = all(np.array_equal(predict_dataset(model, small_dataset, "czsl", gamma=g), base)
                   for g in (-10.0, 0.0, 0.5, 3.0, 100.0))

    rng = np.random.default_rng(9)
    y = small_dataset.labels[small_dataset.test_instances]
    p = predict_dataset(model, small_dataset, "gzsl")
    seen, unseen = small_dataset.seen_classes, small_dataset.unseen_classes
    ref = {m: zsl_metrics(y, p, seen, unseen, m).to_dict() for m in ("czsl", "gzsl")}
    perm_ok = dup_ok = True
    for _ in range(20):
        perm = rng.permutation(len(y))
        c = rng.choice(np.unique(y))
        extra = np.flatnonzero(y == c)
        y2, p2 = np.concatenate([y, y[extra]]), np.concatenate([p, p[extra]])
        for m in ("czsl", "gzsl"):
            perm_ok &= zsl_metrics(y[perm], p[perm], seen, unseen, m).to_dict() == ref[m]
            dup_ok &= zsl_metrics(y2, p2, seen, unseen, m).to_dict() == ref[m]
    ok = bool(gamma_ok and perm_ok and dup_ok)
    criterion(9, "protocol invariances", ok, f"gamma {gamma_ok}, permutation {perm_ok}, duplication {dup_ok}")
    assert ok
