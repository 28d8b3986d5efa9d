"""Acceptance suite: one test per criterion, each at its stated tolerance.

Every test files a PASS/FAIL line through ``record_criterion``; the lines are
printed in the terminal summary.  Criterion 3 (published accuracy numbers) has no
test because it is replaced by criteria 4-9.
"""

import json
import time

import numpy as np
import pytest

from supervit import cli
from supervit import numerics as nx
from supervit.checkpoint import decode_checkpoint, encode_checkpoint
from supervit.data import encode_idx, generate_shapes, parse_idx
from supervit.model import ModelConfig, SubnetConfig, forward, init_params, kept_count, select_tokens
from supervit.numerics import Tensor
from supervit.profiler import deit_config, model_macs
from supervit.scheduler import default_cascade, sweep_threshold
from supervit.training import TrainConfig, evaluate, train

from conftest import numeric_grad, record_criterion, rel_err
from test_model import raw, ref_vit

SEEDS = (0, 1, 2)
EPOCHS = 30


def reference_gmacs(variant, grid, rate, **kw):
    mc = deit_config(variant, **kw)
    return model_macs(mc, SubnetConfig(mc.grids.index(grid) + 1, rate)).gmacs


def test_criterion_1_flops_table():
    t0 = time.perf_counter()
    targets = [("small", 14, 1.0, 4.6, 0.02), ("small", 12, 1.0, 3.3, 0.03),
               ("small", 10, 1.0, 2.3, 0.03), ("small", 8, 1.0, 1.4, 0.03),
               ("small", 14, 0.7, 3.0, 0.05), ("small", 14, 0.5, 2.3, 0.07),
               ("tiny", 14, 1.0, 1.3, 0.03)]
    misses, parts = [], []
    for variant, grid, rate, want, tol in targets:
        got = reference_gmacs(variant, grid, rate)
        err = got / want - 1
        parts.append(f"{variant[0].upper()}{grid}@{rate}={got:.3f}({err:+.1%})")
        if abs(err) > tol:
            misses.append(f"{variant} {grid}x{grid}@{rate}: {got:.4f} vs {want} +-{tol:.0%}")
    elapsed = time.perf_counter() - t0
    ok = not misses and elapsed < 1.0
    record_criterion("1", ok, " ".join(parts) + (f"  MISSED: {'; '.join(misses)}" if misses else ""))
    assert elapsed < 1.0
    assert not misses, misses


def test_criterion_2_drop_block_ablation():
    t0 = time.perf_counter()
    late = reference_gmacs("small", 14, 0.5)
    early = reference_gmacs("small", 14, 0.5, drop_blocks=(3, 6, 9))
    ok = early < late and abs(early / 2.0 - 1) <= 0.07 and time.perf_counter() - t0 < 1.0
    record_criterion("2", ok, f"4/7/10 -> {late:.3f}G, 3/6/9 -> {early:.3f}G (target 2.0G +-7%)")
    assert ok


# -- 4: gradient suite -------------------------------------------------------

def _primitive_cases(rng):
    """(name, builder, inputs) for every differentiable primitive."""
    def t(*shape):
        return Tensor(rng.normal(size=shape), requires_grad=True)

    c = Tensor(rng.normal(size=(3, 4)))
    y = rng.integers(0, 4, 3)
    idx = np.array([[0, 2], [1, 3]])
    return [
        ("add", lambda a, b: ((a + b) * c).sum(), [t(3, 4), t(4)]),
        ("mul", lambda a, b: (a * b * c).sum(), [t(3, 4), t(3, 1)]),
        ("reciprocal", lambda a: nx.reciprocal(a * a + 1.0).sum(), [t(3, 4)]),
        ("exp", lambda a: (nx.exp(a) * c).sum(), [t(3, 4)]),
        ("log", lambda a: (nx.log(a * a + 0.5) * c).sum(), [t(3, 4)]),
        ("gelu", lambda a: (nx.gelu(a) * c).sum(), [t(3, 4)]),
        ("mean", lambda a: (nx.mean(a, axis=0) * nx.mean(a, axis=0)).sum(), [t(3, 4)]),
        ("matmul", lambda a, b: (nx.matmul(a, b) * c).sum(), [t(3, 5), t(5, 4)]),
        ("linear", lambda a, w, b: (nx.linear(a, w, b) * c).sum(), [t(3, 5), t(5, 4), t(4)]),
        ("softmax", lambda a: (nx.softmax_lastaxis(a) * c).sum(), [t(3, 4)]),
        ("layer_norm", lambda a, g, b: (nx.layer_norm(a, g, b) * c).sum(), [t(3, 4), t(4), t(4)]),
        ("bilinear", lambda a: (nx.bilinear_resize(a, 3, 4)[..., 0] * c).sum(), [t(5, 6, 1)]),
        ("reshape/transpose", lambda a: (a.reshape(4, 3).transpose(1, 0) * c).sum(), [t(2, 6)]),
        ("index", lambda a: (a[1:, :] * a[:2, :]).sum(), [t(3, 4)]),
        ("gather", lambda a: (nx.gather_tokens(a, idx) * nx.gather_tokens(a, idx)).sum(), [t(2, 4, 3)]),
        ("concat", lambda a, b: (nx.concat([a, b], axis=0) * c).sum(), [t(1, 4), t(2, 4)]),
        ("cross_entropy", lambda a: nx.cross_entropy(nx.softmax_lastaxis(a), y), [t(3, 4)]),
        ("kl", lambda a, b: nx.kl_divergence(nx.softmax_lastaxis(a), nx.softmax_lastaxis(b)),
         [t(3, 4), t(3, 4)]),
    ]


def _sampled_fd(loss, t, rng, k=4, eps=1e-6):
    flat = t.data.reshape(-1)
    picks = rng.choice(flat.size, size=min(k, flat.size), replace=False)
    fd = np.empty(len(picks))
    for j, i in enumerate(picks):
        orig = flat[i]
        flat[i] = orig + eps
        hi = loss()
        flat[i] = orig - eps
        lo = loss()
        flat[i] = orig
        fd[j] = (hi - lo) / (2 * eps)
    return t.grad.reshape(-1)[picks], fd


def test_criterion_4_gradient_suite():
    t0 = time.perf_counter()
    worst_prim, worst_model, failures = 0.0, 0.0, []
    with nx.precision("high"):
        for seed in range(5):
            rng = np.random.default_rng(seed)
            for name, build, inputs in _primitive_cases(rng):
                nx.backward(build(*inputs))
                for t in inputs:
                    fd = numeric_grad(lambda: build(*inputs).item(), t.data)
                    e = rel_err(t.grad, fd)
                    worst_prim = max(worst_prim, e)
                    if e >= 1e-4:
                        failures.append(f"{name} seed {seed}: {e:.2e}")
        mc = ModelConfig()
        for seed in range(5):
            rng = np.random.default_rng(100 + seed)
            params = init_params(mc, seed=seed, dtype=np.float64, std=0.2)
            imgs = rng.random((1, 40, 40, 3))
            y = rng.integers(0, 4, 1)
            for sc in (mc.subnet(1 + seed % 3, 1), mc.subnet(3 - seed % 3, 3)):
                def loss():
                    with nx.no_grad():
                        return nx.cross_entropy(forward(imgs, sc, params)[0], y).item()
                params.zero_grad()
                nx.backward(nx.cross_entropy(forward(imgs, sc, params)[0], y))
                a_all, f_all = [], []
                for name, t in params.items():
                    if t.grad is None:
                        continue
                    a, f = _sampled_fd(loss, t, rng)
                    a_all.append(a)
                    f_all.append(f)
                e = rel_err(np.concatenate(a_all), np.concatenate(f_all))
                worst_model = max(worst_model, e)
                if e >= 1e-4:
                    failures.append(f"toy model seed {seed} {sc}: {e:.2e}")
    elapsed = time.perf_counter() - t0
    ok = not failures and elapsed < 120
    record_criterion("4", ok, f"worst rel err primitives {worst_prim:.1e}, toy model {worst_model:.1e}; "
                              f"{elapsed:.0f}s (limit 120s)" + (f"  FAILED: {failures}" if failures else ""))
    assert not failures
    assert elapsed < 120


def test_criterion_5_oracle_equivalence():
    t0 = time.perf_counter()
    mc = ModelConfig()
    worst = 0.0
    with nx.precision("high"):
        params = init_params(mc, seed=11, dtype=np.float64, std=0.1)
        imgs = np.random.default_rng(11).random((2, 40, 40, 3))
        for g in range(1, mc.G + 1):
            probs, _ = forward(imgs, SubnetConfig(g, 1.0), params)
            for i in range(len(imgs)):
                worst = max(worst, float(np.abs(probs.data[i] - ref_vit(imgs[i], g, raw(params), mc)).max()))
    rng = np.random.default_rng(5)
    mismatches = 0
    for trial in range(1000):
        n = int(rng.integers(1, 200))
        # coarse values force many ties
        scores = rng.integers(0, 6, n) / 5.0 if trial % 2 else rng.random(n)
        rate = float(rng.choice([0.9, 0.7, 0.5, 0.3]))
        k = kept_count(n, rate)
        oracle = sorted(sorted(range(n), key=lambda i: (-scores[i], i))[:k])
        mismatches += select_tokens(scores, rate).tolist() != oracle
    elapsed = time.perf_counter() - t0
    ok = worst <= 1e-9 and mismatches == 0 and elapsed < 60
    record_criterion("5", ok, f"max |forward - reference| = {worst:.1e} (limit 1e-9); "
                              f"top-k mismatches {mismatches}/1000; {elapsed:.0f}s")
    assert ok


# -- 6-8: trained supernets ---------------------------------------------------

@pytest.fixture(scope="session")
def toy_data():
    d = generate_shapes(2000, 40, seed=1000)
    return d.split(1600)


@pytest.fixture(scope="session")
def supernets(toy_data):
    tr, va = toy_data
    mc = ModelConfig()
    out = {}
    t0 = time.perf_counter()
    for seed in SEEDS:
        res = train(mc, TrainConfig(seed=seed, epochs=EPOCHS), tr.images, tr.labels, va.images, va.labels)
        final = {(r["g"], r["m"]): r["accuracy"] for r in res.records if r["epoch"] == EPOCHS}
        out[seed] = (res.params, final)
    return out, time.perf_counter() - t0


def test_criterion_6_supernet_training(supernets):
    runs, elapsed = supernets
    mc = ModelConfig()
    largest_ok, all_ok, ordered = True, True, 0
    details = []
    for seed, (_, acc) in runs.items():
        largest = acc[(mc.G, 1)]
        lowest = min(acc.values())
        mono = all(acc[(g, m)] <= acc[(g + 1, m)] for m in range(1, mc.M + 1) for g in range(1, mc.G))
        largest_ok &= largest >= 0.90
        all_ok &= lowest >= 0.75
        ordered += mono
        details.append(f"seed {seed}: largest {largest:.3f}, min {lowest:.3f}, ordered {mono}")
    ok = largest_ok and all_ok and ordered >= 2
    record_criterion("6", ok, "; ".join(details) + f"; train time {elapsed / 60:.1f} min (target < 30)")
    assert largest_ok, details
    assert all_ok, details
    assert ordered >= 2, details


def test_criterion_7_supernet_vs_individual(supernets, toy_data):
    runs, _ = supernets
    tr, va = toy_data
    mc = ModelConfig()
    small = (1, mc.M)
    wins, details = 0, []
    t0 = time.perf_counter()
    for seed in SEEDS:
        tc = TrainConfig(seed=seed, epochs=EPOCHS, sample_scheme="single", subnet=small)
        res = train(mc, tc, tr.images, tr.labels)
        alone = evaluate(va.images, va.labels, mc.subnet(*small), res.params)
        shared = runs[seed][1][small]
        wins += shared >= alone - 0.02
        details.append(f"seed {seed}: supernet {shared:.3f} vs individual {alone:.3f}")
    elapsed = time.perf_counter() - t0
    ok = wins >= 2
    record_criterion("7", ok, "; ".join(details) + f"; {wins}/3 within 2 points; individual runs {elapsed / 60:.1f} min")
    assert ok, details


def test_criterion_8_cascade(supernets, toy_data):
    runs, _ = supernets
    _, va = toy_data
    taus = [0, 0.25, 0.5, 0.75, 0.9, 1.0]
    t0 = time.perf_counter()
    problems, details = [], []
    for seed, (params, _) in runs.items():
        policy = default_cascade(params.config)
        pts = sweep_threshold(va.images, va.labels, policy, taus, params)
        macs = [p.mean_macs for p in pts]
        first = evaluate(va.images, va.labels, policy.stages[0], params)
        last = evaluate(va.images, va.labels, policy.stages[-1], params)
        if macs != sorted(macs):
            problems.append(f"seed {seed}: MACs not monotone {macs}")
        if pts[-1].accuracy != last:
            problems.append(f"seed {seed}: tau=1 {pts[-1].accuracy} != final stage {last}")
        if pts[0].accuracy != first:
            problems.append(f"seed {seed}: tau=0 {pts[0].accuracy} != first stage {first}")
        details.append(f"seed {seed}: acc {pts[0].accuracy:.3f}->{pts[-1].accuracy:.3f}, "
                       f"GMACs {macs[0] / 1e9:.4f}->{macs[-1] / 1e9:.4f}")
    elapsed = time.perf_counter() - t0
    ok = not problems and elapsed < 120
    record_criterion("8", ok, "; ".join(details) + f"; {elapsed:.0f}s" + (f"  PROBLEMS: {problems}" if problems else ""))
    assert not problems
    assert elapsed < 120


def test_criterion_9_determinism_and_serialization(tmp_path):
    t0 = time.perf_counter()
    cfg = {"schema_version": 1,
           "model": {"depth": 2, "dim": 16, "heads": 2, "mlp_dim": 32, "drop_blocks": [1]},
           "train": {"epochs": 2, "batch_size": 16, "seed": 3, "precision": "high"},
           "data": {"n_train": 64, "n_val": 32, "seed": 21}}
    streams = []
    for run in ("a", "b"):
        path = tmp_path / f"{run}.json"
        path.write_text(json.dumps({**cfg, "output_dir": str(tmp_path / run)}))
        assert cli.main(["train", "--config", str(path)]) == 0
        streams.append((tmp_path / run / "metrics.jsonl").read_bytes())
    same_metrics = streams[0] == streams[1] and len(streams[0]) > 0

    params = init_params(ModelConfig(), seed=8)
    back, _ = decode_checkpoint(encode_checkpoint(params))
    ckpt_ok = all(back[k].data.tobytes() == t.data.tobytes() for k, t in params.items())

    arr = np.random.default_rng(2).integers(0, 256, (50, 28, 28), dtype=np.uint8)
    blob = encode_idx(arr)
    idx_ok = np.array_equal(parse_idx(blob), arr) and encode_idx(parse_idx(blob)) == blob

    elapsed = time.perf_counter() - t0
    ok = same_metrics and ckpt_ok and idx_ok and elapsed < 120
    record_criterion("9", ok, f"metric streams identical {same_metrics}, checkpoint bit-exact {ckpt_ok}, "
                              f"IDX bit-exact {idx_ok}; {elapsed:.0f}s")
    assert ok
