import io
import json
import threading

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from prefill_engine import EngineOptions, ScoreConfig
from prefill_engine.propagation import accelerated_prefill
from prefill_engine.scheduler import (BatchError, Engine, PackedBatch, Phase, Request, RequestState,
                                      patch_metadata, run_isolated)

SC = ScoreConfig(query_window_n=8, block_size_g=8, sink_count_a=4, top_p=0.7)


def batch(lens, phases=None):
    phases = phases or [Phase.PREFILL] * len(lens)
    ids = [f"r{i}" for i in range(len(lens))]
    return PackedBatch.pack(ids, phases, [np.zeros((n, 4), np.float32) for n in lens],
                            [np.arange(n) for n in lens])


def test_patch_keep_all_unchanged():
    b = batch([8, 8])
    out = patch_metadata(b, {"r0": np.ones(8, bool), "r1": np.ones(8, bool)}, 0)
    assert out.cu_seqlens.tolist() == b.cu_seqlens.tolist()


def test_patch_two_prefills():
    keep = np.zeros(8, bool)
    keep[:4] = True
    out = patch_metadata(batch([8, 8]), {"r0": keep}, 0)
    assert out.cu_seqlens.tolist() == [0, 4, 12]
    meta = out.layer_meta[-1]
    assert meta.layer == 1 and meta.num_actual_tokens == 12


def test_patch_mixed_batch():
    keep = np.zeros(8, bool)
    keep[4:] = True
    out = patch_metadata(batch([8, 1], [Phase.PREFILL, Phase.DECODE]), {"r0": keep}, 2)
    assert out.cu_seqlens.tolist() == [0, 4, 5]
    assert out.positions.tolist() == [4, 5, 6, 7, 0]


def test_patch_rejects_decode_drops_and_bad_masks():
    b = batch([8, 1], [Phase.PREFILL, Phase.DECODE])
    with pytest.raises(BatchError):
        patch_metadata(b, {"r1": np.zeros(1, bool)}, 0)
    with pytest.raises(BatchError):
        patch_metadata(b, {"r0": np.ones(7, bool)}, 0)


def test_pack_rejects_empty_segment():
    with pytest.raises(BatchError):
        batch([3, 0])


def test_phase_transitions():
    st_ = RequestState("a", 4, 2, 0)
    st_.advance(Phase.DECODE)
    st_.advance(Phase.FINISHED)
    with pytest.raises(BatchError):
        st_.advance(Phase.DECODE)
    with pytest.raises(BatchError):
        RequestState("b", 4, 2, 0, phase=Phase.DECODE).advance(Phase.PREFILL)


def test_single_prefill_equals_accelerated_prefill(models):
    m = models["full"]
    x = np.random.default_rng(0).standard_normal((90, 64)).astype(np.float32)
    eng = Engine(m, "uniprefill", SC)
    eng.run([Request("a", x, 1)])
    res = accelerated_prefill(m, x, SC)
    assert np.array_equal(eng.requests["a"].logits[0], m.logits(res.states[-1:])[0])
    assert eng.requests["a"].history.to_list() == res.history.to_list()


def test_two_prefills_batched_vs_separate(models):
    m = models["linear_hybrid"]
    rng = np.random.default_rng(1)
    reqs = [Request("a", rng.integers(0, 128, 100), 3), Request("b", rng.integers(0, 128, 50), 3)]
    eng = Engine(m, "uniprefill", SC)
    eng.run(reqs)
    iso = run_isolated(m, reqs, "uniprefill", SC)
    for r in reqs:
        a, b = np.array(eng.requests[r.request_id].logits), np.array(iso[r.request_id].logits)
        assert np.abs(a - b).max() < 1e-5


def test_decodes_isolated_from_coscheduled_prefill(models):
    m = models["swa_hybrid"]
    rng = np.random.default_rng(2)
    decs = [Request(f"d{i}", rng.integers(0, 128, 30 + i), 4) for i in range(3)]
    late = Request("p", rng.integers(0, 128, 120), 1, arrival_step=1)
    eng = Engine(m, "uniprefill", SC, EngineOptions(audit=True))
    eng.run(decs + [late])
    assert eng.requests["p"].first_token_step == 1
    alone = Engine(m, "uniprefill", SC)
    alone.run(decs)
    for d in decs:
        assert np.array_equal(np.array(eng.requests[d.request_id].logits),
                              np.array(alone.requests[d.request_id].logits))
    assert eng.audit_failures == []


def test_no_cross_request_leakage(models):
    m = models["full"]
    rng = np.random.default_rng(3)
    xs = [rng.standard_normal((n, 64)).astype(np.float32) for n in (40, 70, 25)]
    run = lambda prompts: Engine(m, "uniprefill", SC).run(
        [Request(f"r{i}", p, 3) for i, p in enumerate(prompts)])
    a = run(xs)
    b = run([xs[0], np.zeros_like(xs[1]), xs[2]])
    for rid in ("r0", "r2"):
        assert np.array_equal(np.array(a[rid].logits), np.array(b[rid].logits))


@settings(max_examples=10)
@given(reqs=st.lists(st.tuples(st.integers(1, 80), st.integers(1, 5), st.integers(0, 4)), min_size=1,
                     max_size=6),
       budget=st.integers(16, 200))
def test_liveness_and_metadata(reqs, budget, models):
    m = models["full"]
    eng = Engine(m, "uniprefill", SC, EngineOptions(token_budget=budget, audit=True))
    rng = np.random.default_rng(len(reqs))
    todo = [Request(f"r{i}", rng.integers(0, 128, n), k, a) for i, (n, k, a) in enumerate(reqs)]
    bound = max(a for _, _, a in reqs) + sum(k for _, k, _ in reqs) + len(reqs) + 1
    eng.run(todo, max_steps=bound)
    for r in todo:
        st_ = eng.requests[r.request_id]
        assert st_.phase is Phase.FINISHED and len(st_.generated) == r.max_new_tokens
    for step_meta in eng.layer_meta:
        for meta in step_meta:
            meta.check()
            assert int(meta.seq_lens.sum()) == int(meta.query_start_loc[-1]) == meta.num_actual_tokens
    assert eng.audit_failures == []


def test_oversized_prefill_runs_alone(models):
    eng = Engine(models["full"], "dense", options=EngineOptions(token_budget=32))
    eng.submit(Request("big", np.zeros(50, np.int64), 1))
    eng.submit(Request("small", np.zeros(10, np.int64), 1))
    first = eng.step()
    assert [o.request_id for o in first] == ["big"]
    assert [o.request_id for o in eng.step()] == ["small"]


def test_events_stream_as_json_lines(models):
    sink = io.StringIO()
    eng = Engine(models["full"], "dense", event_sink=sink)
    eng.run([Request("a", np.arange(5), 3)])
    lines = [json.loads(line) for line in sink.getvalue().splitlines()]
    assert [ev["phase"] for ev in lines] == ["prefill", "decode", "decode"]
    assert {"request_id", "step", "token", "phase"} == set(lines[0])


def test_submit_from_other_threads(models):
    eng = Engine(models["full"], "dense")
    threads = [threading.Thread(target=eng.submit, args=(Request(f"t{i}", np.arange(4), 2),)) for i in range(4)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    eng.run()
    assert len(eng.requests) == 4 and all(s.phase is Phase.FINISHED for s in eng.requests.values())


def test_duplicate_request_id(models):
    eng = Engine(models["full"], "dense")
    with pytest.raises(ValueError):
        eng.run([Request("a", np.arange(4), 1), Request("a", np.arange(4), 1)])
