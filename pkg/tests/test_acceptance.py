"""Acceptance checks, one test per criterion, each at its stated tolerance.

Every test records a one-line verdict; ``conftest.pytest_terminal_summary``
prints them after the run whether the test passed or failed.
"""

import struct
import time
from fractions import Fraction

import numpy as np

from oracles import reference_top_p
from prefill_engine import EngineOptions, ScoreConfig, archetype, build_model, dense_prefill
from prefill_engine.cli import BENCH_INIT_STD
from prefill_engine.config import FA, FFN, ModelConfig
from prefill_engine.flops import dense_ledger, layer_flops, validate_savings
from prefill_engine.oracle import measure_drop_error
from prefill_engine.propagation import accelerated_prefill
from prefill_engine.report import bench_grid
from prefill_engine.scheduler import Engine, Phase, Request, run_isolated
from prefill_engine.selection import phi_encode, top_p_select

ARCHETYPES = ("full", "linear_hybrid", "swa_hybrid")
VERDICTS: dict[int, str] = {}


def verdict(n: int, ok: bool, detail: str) -> None:
    VERDICTS[n] = f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
    print(VERDICTS[n])


def random_model(rng, name=None, init_std=None):
    name = name or ARCHETYPES[int(rng.integers(3))]
    cfg = archetype(name, num_blocks=int(rng.integers(1, 3)), seed=int(rng.integers(1 << 30)),
                    init_std=init_std if init_std is not None else float(rng.choice([0.02, 0.1, 0.3])))
    return build_model(cfg)


def random_score_config(rng, top_p=None):
    return ScoreConfig(query_window_n=int(rng.choice([1, 4, 8, 16, 32])),
                       block_size_g=int(rng.choice([1, 4, 8, 16])),
                       sink_count_a=int(rng.choice([0, 2, 8])),
                       top_p=float(rng.choice([0.3, 0.7, 0.9, 0.99])) if top_p is None else top_p)


def test_criterion_01_exactness_at_p1():
    rng = np.random.default_rng(101)
    t0 = time.perf_counter()
    pairs, mismatches, seen = 0, [], set()
    for i in range(24):
        name = ARCHETYPES[i % 3]
        m = random_model(rng, name)
        n = int(rng.integers(1, 513))
        x = rng.standard_normal((n, m.config.hidden_dim)).astype(np.float32)
        dense, _ = dense_prefill(m, x)
        res = accelerated_prefill(m, x, random_score_config(rng, top_p=1.0))
        pairs += 1
        seen.add(name)
        if not np.array_equal(dense, res.states):
            mismatches.append((name, n))
    elapsed = time.perf_counter() - t0
    ok = not mismatches and pairs >= 20 and seen == set(ARCHETYPES) and elapsed < 120
    verdict(1, ok, f"{pairs} pairs over {sorted(seen)}, {len(mismatches)} non-bitwise, {elapsed:.1f}s")
    assert ok, mismatches


def _drop_events(count, seed):
    rng = np.random.default_rng(seed)
    models = [build_model(archetype(n, seed=s, init_std=std)) for n in ARCHETYPES
              for s, std in ((3, 0.02), (4, 0.3))]
    for _ in range(count):
        m = models[int(rng.integers(len(models)))]
        n = int(rng.integers(16, 257))
        x = rng.standard_normal((n, m.config.hidden_dim)).astype(np.float32)
        if rng.random() < 0.3:
            x[rng.integers(n, size=4)] *= 20.0  # a few rows with large value vectors
        layer = int(rng.choice(m.config.full_attention_layers()))
        yield measure_drop_error(m, x, random_score_config(rng), layer=layer)


def test_criterion_02_drop_layer_error_bound():
    reports = list(_drop_events(1000, 202))
    real = [r for r in reports if r.num_retained < r.num_tokens]
    literal = [r for r in reports if not r.literal_row_ok(1e-5)]
    averaged = [r for r in reports if not r.average_bound_ok(1e-5)]
    per_row = [r for r in reports if not r.row_bound_ok]
    worst = max((r.max_removal_error / r.bound for r in literal if r.bound > 0), default=0.0)
    ok = len(reports) >= 1000 and not literal
    verdict(2, ok, f"{len(reports)} events ({len(real)} dropped at least one token): {len(literal)} exceed "
                   f"(1-covered)*V_max on the worst retained row (worst x{worst:.1f}); "
                   f"window-averaged form {len(averaged)} violations; own-dropped-mass form "
                   f"{len(per_row)} violations")
    assert ok, f"{len(literal)} of {len(reports)} events exceed the per-token bound"


def test_criterion_02_companion_provable_forms():
    # not the criterion: the two forms that follow from the triangle inequality
    reports = list(_drop_events(1000, 202))
    assert all(r.average_bound_ok(1e-5) for r in reports)
    assert all(r.row_bound_ok for r in reports)


def _score_vector(rng):
    n = int(rng.integers(1, 4097))
    kind = rng.integers(5)
    if kind == 0:
        return rng.random(n).astype(np.float32)
    if kind == 1:  # heavy ties
        return (rng.integers(0, 4, n) / 4).astype(np.float32)
    if kind == 2:  # zeros mixed in, sometimes all zero
        v = rng.random(n).astype(np.float32)
        v[rng.random(n) < rng.random()] = 0.0
        return v
    if kind == 3:  # subnormals, alone and beside normal values
        v = (rng.integers(1, 1 << 23, n).astype(np.uint32)).view(np.float32).copy()
        if rng.random() < 0.5:
            v[rng.integers(n, size=max(1, n // 10))] = rng.random()
        return v
    return rng.exponential(size=n).astype(np.float32) ** 4  # concentrated


def test_criterion_03_top_p_oracle():
    rng = np.random.default_rng(303)
    mismatches = 0
    total = 100_000
    for _ in range(total):
        b = _score_vector(rng)
        g = int(rng.choice([1, 1, 2, 7, 64]))
        num_tokens = (b.size - 1) * g + int(rng.integers(1, g + 1))
        p = float(rng.choice([0.01, 0.5, 0.9, 0.99, 0.999, 1.0]))
        a, n = int(rng.integers(0, 5)), int(rng.integers(0, 5))
        sel = top_p_select(b, ScoreConfig(query_window_n=n, block_size_g=g, sink_count_a=a, top_p=p),
                           num_tokens)
        chosen, keep, degenerate = reference_top_p(b, p, g, num_tokens, a, min(n, num_tokens))
        same = np.array_equal(sel.block_mask, chosen) and np.array_equal(sel.keep_mask, keep) \
            and sel.degenerate == degenerate
        mismatches += not same
    verdict(3, mismatches == 0, f"{total} vectors, {mismatches} set mismatches")
    assert mismatches == 0


def test_criterion_04_phi_monotone():
    rng = np.random.default_rng(404)
    pairs = 0
    violations = 0
    while pairs < 1_000_000:
        bits = rng.integers(0, 1 << 32, size=(2, 250_000), dtype=np.uint64).astype(np.uint32)
        f = bits.view(np.float32)
        ok = np.isfinite(f).all(axis=0)
        x, y = f[0, ok], f[1, ok]
        px, py = phi_encode(x), phi_encode(y)
        violations += int(np.count_nonzero((x < y) != (px < py)) + np.count_nonzero((x == y) != (px == py)))
        pairs += x.size
    edges = [0.0, -0.0, np.finfo(np.float32).max, -np.finfo(np.float32).max, np.finfo(np.float32).tiny,
             -np.finfo(np.float32).tiny, struct.unpack("<f", struct.pack("<I", 1))[0],
             -struct.unpack("<f", struct.pack("<I", 1))[0], struct.unpack("<f", struct.pack("<I", 0x007FFFFF))[0],
             1.0, -1.0]
    e = np.array(edges, np.float32)
    pe = phi_encode(e)
    edge_violations = int(np.count_nonzero((e[:, None] < e[None, :]) != (pe[:, None] < pe[None, :])))
    edge_violations += int(np.count_nonzero((e[:, None] == e[None, :]) != (pe[:, None] == pe[None, :])))
    ok = violations == 0 and edge_violations == 0
    verdict(4, ok, f"{pairs} random pairs + {len(edges) ** 2} edge pairs, "
                   f"{violations + edge_violations} order violations")
    assert ok


def test_criterion_05_flops_audit():
    rng = np.random.default_rng(505)
    runs, mismatches, drops_seen = 0, [], 0
    for i in range(60):
        m = random_model(rng, ARCHETYPES[i % 3], init_std=0.3)
        n = int(rng.integers(8, 300))
        x = rng.standard_normal((n, 64)).astype(np.float32)
        fa = m.config.full_attention_layers()
        drop_layers = None if rng.random() < 0.6 else {int(rng.choice(fa))}
        res = accelerated_prefill(m, x, random_score_config(rng), drop_layers=drop_layers,
                                  readmit=bool(rng.random() < 0.7))
        rep = validate_savings(dense_ledger(m.config, n), res.ledger, m.config, res.history)
        runs += 1
        drops_seen += len(res.history.drops())
        if not rep.agrees:
            mismatches.append((i, rep.measured, rep.formula))

    # single drops on a model whose downstream layers all cost the same and scale linearly
    uniform = build_model(ModelConfig(1, 7, (FA,) + (FFN,) * 7, hidden_dim=64, head_dim=8, num_heads=8,
                                      window_size=8, ffn_dim=128, vocab_size=64, seed=9, init_std=0.3))
    cfg = uniform.config
    linear_bad = []
    for j in range(20):
        n = int(rng.integers(16, 400))
        x = rng.standard_normal((n, 64)).astype(np.float32)
        res = accelerated_prefill(uniform, x, random_score_config(rng), drop_layers={0}, readmit=False)
        rep = validate_savings(dense_ledger(cfg, n), res.ledger, cfg, res.history)
        runs += 1
        if not rep.agrees:
            mismatches.append(("uniform", j))
        (ev,) = res.history.drops()
        rho = Fraction(ev.length, ev.before)
        layers_after = cfg.num_layers - 1 - ev.layer
        eq10 = (1 - rho) * layers_after * layer_flops(FFN, n, cfg)
        if Fraction(rep.downstream_share) != eq10 or rep.linear_form != eq10:
            linear_bad.append(j)
    ok = not mismatches and not linear_bad and drops_seen > 0
    verdict(5, ok, f"{runs} runs ({drops_seen} drop events): {len(mismatches)} ledger/formula mismatches, "
                   f"{len(linear_bad)} single-drop linear-form mismatches")
    assert ok, (mismatches, linear_bad)


def _seqused_oracle(history, layer):
    length = history.original_length
    for ev in history.events:
        if ev.layer < layer:
            length = ev.length
    return length + history.decode_appended


def test_criterion_06_slots_and_seqused():
    rng = np.random.default_rng(606)
    checks, problems, drops, decode_steps = 0, [], 0, 0
    for sched in range(100):
        m = random_model(rng, ARCHETYPES[sched % 3], init_std=0.3)
        sc = random_score_config(rng, top_p=float(rng.choice([0.5, 0.8, 0.95])))
        eng = Engine(m, "uniprefill", sc, EngineOptions(audit=True, token_budget=int(rng.integers(64, 400))),
                     kv_block_size=int(rng.choice([4, 16])))
        for r in range(int(rng.integers(1, 6))):
            eng.submit(Request(f"r{r}", rng.integers(0, 128, int(rng.integers(1, 160))),
                               int(rng.integers(1, 7)), int(rng.integers(0, 5))))
        while not eng.idle:
            outs = eng.step()
            decode_steps += sum(o.phase == "decode" for o in outs)
            for rid, st in eng.requests.items():
                if st.phase is Phase.FINISHED:
                    continue
                for layer in range(m.config.num_layers):
                    want = _seqused_oracle(st.history, layer)
                    checks += 1
                    if eng.kv.seen[(layer, rid)] != want:
                        problems.append(f"sched {sched} {rid} layer {layer}: seen {eng.kv.seen[(layer, rid)]} "
                                        f"!= {want}")
                    if m.config.kind(layer).has_kv and eng.kv.written_count(layer, rid) != want:
                        problems.append(f"sched {sched} {rid} layer {layer}: written != {want}")
        drops += sum(len(st.history.drops()) for st in eng.requests.values())
        problems.extend(f"sched {sched}: {f}" for f in eng.audit_failures)
    ok = not problems and drops > 0 and decode_steps > 0
    verdict(6, ok, f"100 schedules, {drops} drop events, {decode_steps} decode outputs, {checks} "
                   f"(layer, request, step) seqused checks + engine audits: {len(problems)} problems")
    assert ok, problems[:10]


def test_criterion_07_batching_transparency():
    rng = np.random.default_rng(707)
    worst, bad = 0.0, 0
    for w in range(50):
        m = random_model(rng, ARCHETYPES[w % 3], init_std=float(rng.choice([0.02, 0.3])))
        sc = random_score_config(rng)
        reqs = [Request(f"r{i}", rng.integers(0, 128, int(rng.integers(1, 257))), int(rng.integers(1, 5)),
                        int(rng.integers(0, 4))) for i in range(int(rng.integers(1, 9)))]
        eng = Engine(m, "uniprefill", sc, EngineOptions(token_budget=int(rng.integers(64, 1024))))
        eng.run(reqs)
        iso = run_isolated(m, reqs, "uniprefill", sc)
        for r in reqs:
            a = np.array(eng.requests[r.request_id].logits)
            b = np.array(iso[r.request_id].logits)
            if a.shape != b.shape:
                bad += 1
                continue
            d = float(np.abs(a - b).max())
            worst = max(worst, d)
            bad += d > 1e-5
    verdict(7, bad == 0, f"50 workloads, max |batched - isolated| logit = {worst:.2e}, {bad} over 1e-5")
    assert bad == 0


def test_criterion_08_tp_consistency():
    rng = np.random.default_rng(808)
    inconsistent, events = 0, 0
    for i in range(100):
        m = random_model(rng, ARCHETYPES[i % 3], init_std=float(rng.choice([0.02, 0.3])))
        n = int(rng.integers(1, 1025))
        x = rng.standard_normal((n, 64)).astype(np.float32)
        sc = random_score_config(rng)
        runs = [accelerated_prefill(m, x, sc, tp=tp).selections for tp in (1, 2, 4, 8)]
        events += len(runs[0])
        ref = runs[0]
        for other in runs[1:]:
            same = len(other) == len(ref) and all(
                la == lb and np.array_equal(a.keep_mask, b.keep_mask) and np.array_equal(a.block_mask, b.block_mask)
                and a.cutoff_rank == b.cutoff_rank for (la, a), (lb, b) in zip(ref, other))
            inconsistent += not same
    verdict(8, inconsistent == 0, f"100 inputs, {events} drop events, T in {{1,2,4,8}}: "
                                  f"{inconsistent} inconsistent selections")
    assert inconsistent == 0


def test_criterion_09_speedup_grows_with_length():
    t0 = time.perf_counter()
    rep = bench_grid(archetype("full", init_std=BENCH_INIT_STD), [1024, 8192], [1, 4],
                     ("dense", "uniprefill"), ScoreConfig(top_p=0.9), content_kind="low_entropy", reps=3)
    elapsed = time.perf_counter() - t0
    speed = {(c["length"], c["batch"]): c["speedup"] for c in rep["cells"] if c["mode"] == "uniprefill"}
    ok = elapsed < 600 and all(speed.get((n, b)) is not None for n in (1024, 8192) for b in (1, 4))
    if ok:
        ok = all(speed[(8192, b)] > speed[(1024, b)] > 1.0 for b in (1, 4))
    detail = ", ".join(f"N={n} B={b}: {speed.get((n, b)) or float('nan'):.2f}x" for b in (1, 4) for n in (1024, 8192))
    verdict(9, ok, f"{detail}; {elapsed:.0f}s")
    assert ok


def test_criterion_10_greedy_decode_equivalence():
    rng = np.random.default_rng(1010)
    steps, diverged = 40, []
    for name in ARCHETYPES:
        for std in (0.02, 0.3):
            m = build_model(archetype(name, seed=int(rng.integers(1000)), init_std=std))
            prompt = rng.integers(0, 128, int(rng.integers(32, 300)))
            dense = Engine(m, "dense").run([Request("a", prompt, steps)])["a"].generated
            fast = Engine(m, "uniprefill", ScoreConfig(top_p=1.0)).run([Request("a", prompt, steps)])["a"].generated
            if dense != fast or len(dense) != steps:
                diverged.append((name, std))
    verdict(10, not diverged, f"{steps} greedy steps on {len(ARCHETYPES) * 2} models over all archetypes, "
                              f"{len(diverged)} diverged")
    assert not diverged
