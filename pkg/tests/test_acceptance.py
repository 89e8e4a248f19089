"""Acceptance criteria 1-9, each at its stated tolerance.

Each test records its criterion number and a one-line measurement; the
terminal summary prints one PASS/FAIL line per criterion.
"""

import json
import time

import numpy as np
import pytest

from oracles import enumerate_attend_set, scalar_attention, scalar_max_pool
from votr.attention import AttentionWeights, attend_one, attend_sparse
from votr.backbone import BackboneConfig, BackboneParams, backbone_forward
from votr.bench import run_bench
from votr.cli import EXIT_OK, main
from votr.gradcheck import TOLERANCE, run_gradcheck
from votr.grid import GridSpec, downsample_indices
from votr.hashing import batch_lookup, build_table, scan_lookup
from votr.ranges import KITTI_DILATED, assemble_attend_set, candidate_offsets, gather_attend_rows
from votr.scene import random_indices, random_scene

pytestmark = pytest.mark.slow


def _criterion(record_property, n):
    record_property("criterion", n)
    return lambda detail: (record_property("detail", detail), print(f"criterion {n}: {detail}"))


# 1. hash-backed lookup equals the linear scan exactly on 1,000 scenes

def test_criterion_1_hash_oracle_equivalence(record_property):
    note = _criterion(record_property, 1)
    rng = np.random.default_rng(101)
    t0 = time.perf_counter()
    mismatched = 0
    total_hits = 0
    for _ in range(1000):
        n = int(rng.integers(1, 10_001))
        side = max(4, int(round((n / 0.05) ** (1 / 3))))
        extent = (side, side, side)
        v = random_indices(n, extent, rng)
        table = build_table(v, max(2 * n + 1, 8))
        # half the candidates are stored voxels, half are uniform draws (mostly misses)
        cand = np.concatenate([v[rng.integers(0, n, 5000)],
                               rng.integers(-2, side + 2, size=(5000, 3))])
        rng.shuffle(cand)
        oracle = scan_lookup(v, cand)
        hits, rows = batch_lookup(table, cand)
        want_hits = cand[oracle >= 0]
        if not (np.array_equal(hits, want_hits) and np.array_equal(rows, oracle[oracle >= 0])):
            mismatched += 1
        total_hits += len(rows)
    elapsed = time.perf_counter() - t0
    note(f"1000 scenes, 10k candidates each, {total_hits} hits, {mismatched} mismatching "
         f"scenes, {elapsed:.1f}s (limit 120s)")
    assert mismatched == 0
    assert elapsed < 120


# 2 and 3. range assembly equals the enumeration oracle; budget is never exceeded

def _range_scenes(seed=202, count=100):
    rng = np.random.default_rng(seed)
    for _ in range(count):
        extent = (int(rng.integers(20, 60)), int(rng.integers(20, 60)), int(rng.integers(6, 20)))
        cells = extent[0] * extent[1] * extent[2]
        n = int(rng.integers(20, min(1500, cells // 4)))
        yield extent, random_indices(n, extent, rng)


def test_criterion_2_range_oracle_equivalence(record_property):
    note = _criterion(record_property, 2)
    rng = np.random.default_rng(222)
    queries = untruncated = truncated = bad_full = bad_cut = bad_batch = 0
    for extent, v in _range_scenes():
        table = build_table(v, 2 * len(v) + 1)
        # every query of small scenes, 300 sampled queries of larger ones
        picked = np.arange(len(v)) if len(v) <= 300 else rng.choice(len(v), 300, replace=False)
        for key in ("1", "8-9"):
            cfg = KITTI_DILATED[key]
            offsets, _ = candidate_offsets(cfg)
            rows, counts = gather_attend_rows(v, table, offsets, 48, extent)
            for i in picked:
                q = v[i]
                full, cut = enumerate_attend_set(q, v, cfg.rings, 48, extent=extent)
                a = assemble_attend_set(q, table, cfg, 48, extent=extent)
                # pre-truncation set: a budget as large as the candidate list
                everything = assemble_attend_set(q, table, cfg, len(offsets), extent=extent)
                bad_full += not np.array_equal(everything.rows, full)
                bad_cut += not np.array_equal(a.rows, cut)
                bad_batch += not np.array_equal(rows[i, :counts[i]], cut)
                queries += 1
                truncated += a.truncated
                untruncated += not a.truncated
    note(f"{queries} queries over 100 scenes x 2 configs ({truncated} truncated); mismatches: "
         f"pre-truncation {bad_full}, truncated {bad_cut}, batched {bad_batch}")
    assert truncated > 0 and untruncated > 0
    assert bad_full == bad_cut == bad_batch == 0


def test_criterion_3_budget_bound(record_property):
    note = _criterion(record_property, 3)
    worst = {}
    violations = 0
    queries = 0
    for extent, v in _range_scenes():
        table = build_table(v, 2 * len(v) + 1)
        for key in ("1", "8-9"):
            offsets, _ = candidate_offsets(KITTI_DILATED[key])
            for budget in (24, 32, 48):
                _, counts = gather_attend_rows(v, table, offsets, budget, extent)
                violations += int((counts > budget).sum())
                worst[budget] = max(worst.get(budget, 0), int(counts.max()))
                queries += len(counts)
        for q in v[:20]:
            for budget in (24, 32, 48):
                a = assemble_attend_set(q, table, KITTI_DILATED["1"], budget, extent=extent)
                violations += len(a) > budget
    note(f"{queries} batched queries, max attendees per budget {worst}, {violations} violations")
    assert violations == 0
    assert worst == {24: 24, 32: 32, 48: 48}


# 4 and 5. attention math against scalar loops; softmax and translation invariants

def _attention_instances(seed=404, count=500):
    rng = np.random.default_rng(seed)
    for t in range(count):
        d = (16, 32, 64)[t % 3]
        n_att = int(rng.integers(1, 13))
        w = AttentionWeights.init(d, 4, rng)
        p_i = rng.uniform(-40, 40, 3)
        yield (rng.normal(size=d), rng.normal(size=(n_att, d)), p_i,
               p_i + rng.uniform(-3, 3, (n_att, 3)), w)


def _oracle(q, f_att, p_i, p_att, w):
    return scalar_attention(q.tolist(), f_att.tolist(), p_i.tolist(), p_att.tolist(),
                            w.W_q.tolist(), w.W_k.tolist(), w.W_v.tolist(), w.W_pos.tolist(),
                            w.W_out.tolist())


def test_criterion_4_attention_matches_scalar_loops(record_property):
    note = _criterion(record_property, 4)
    worst_one = worst_sparse = 0.0
    for f_i, f_att, p_i, p_att, w in _attention_instances():
        want, _ = _oracle(f_i, f_att, p_i, p_att, w)
        worst_one = max(worst_one, np.abs(attend_one(f_i, f_att, p_i, p_att, w).value - want).max())
        q = np.array(scalar_max_pool(f_att.tolist()))
        want, _ = _oracle(q, f_att, p_i, p_att, w)
        worst_sparse = max(worst_sparse,
                           np.abs(attend_sparse(p_i, f_att, p_att, w).value - want).max())
    note(f"500 instances, max |dev| attend_one {worst_one:.2e}, attend_sparse "
         f"{worst_sparse:.2e} (limit 1e-10)")
    assert worst_one < 1e-10 and worst_sparse < 1e-10


def test_criterion_5_softmax_and_translation(record_property):
    note = _criterion(record_property, 5)
    rng = np.random.default_rng(505)
    sum_dev = shift_dev = 0.0
    for f_i, f_att, p_i, p_att, w in _attention_instances(seed=505):
        t = rng.uniform(-50, 50, 3)
        for fn, args, moved in (
            (attend_one, (f_i, f_att, p_i, p_att, w), (f_i, f_att, p_i + t, p_att + t, w)),
            (attend_sparse, (p_i, f_att, p_att, w), (p_i + t, f_att, p_att + t, w)),
        ):
            a = fn(*args)
            b = fn(*moved)
            assert (a.attn_weights >= 0).all()
            sum_dev = max(sum_dev, np.abs(a.attn_weights.sum(axis=1) - 1).max())
            shift_dev = max(shift_dev, np.abs(a.value - b.value).max())
    note(f"max |sum(weights) - 1| {sum_dev:.1e} (limit 1e-9), max translation change "
         f"{shift_dev:.1e} (limit 1e-12)")
    assert sum_dev < 1e-9
    assert shift_dev < 1e-12


# 6. gradient check

def test_criterion_6_gradient_check(record_property):
    note = _criterion(record_property, 6)
    t0 = time.perf_counter()
    results = run_gradcheck(trials=100, seed=0)
    elapsed = time.perf_counter() - t0
    worst = max(results, key=lambda r: r.max_error)
    note(f"100 trials, worst relative error {worst.max_error:.2e} on {worst.worst} "
         f"(limit {TOLERANCE:g}), {elapsed:.1f}s (limit 300s)")
    assert worst.max_error < TOLERANCE
    assert elapsed < 300


# 7. backbone shape contract

def test_criterion_7_backbone_shape_contract(record_property):
    note = _criterion(record_property, 7)
    rng = np.random.default_rng(707)
    grids = [GridSpec(),
             GridSpec((0, 0, 0), (0.05, 0.05, 0.1), (97, 61, 13)),
             GridSpec((-5, -5, -1), (0.1, 0.1, 0.2), (40, 40, 9))]
    checked = 0
    for grid, n in zip(grids, (4000, 1500, 800)):
        cfg = BackboneConfig(grid=grid)
        trace = []
        scales = backbone_forward(random_scene(n, grid, rng), cfg, BackboneParams.init(cfg),
                                  trace)
        assert [m.kind for m in trace].count("sparse") == 3
        assert len(scales) == 4
        for prev, cur in zip(scales, scales[1:]):
            np.testing.assert_array_equal(cur.indices, downsample_indices(prev.indices, 2))
            assert cur.grid.voxel_size == tuple(2 * r for r in prev.grid.voxel_size)
        assert scales[-1].grid.extent == tuple(-(-e // 8) for e in grid.extent)
        for m in trace:
            if m.kind == "submanifold":
                assert m.n_in == m.n_out
        assert [s.n_channels for s in scales] == [16, 32, 64, 64]
        checked += 1
    note(f"{checked} scenes: 3 downsamples, final extent ceil(extent/8), "
         "submanifold rows preserved, 64 final channels")


# 8. hash lookup speedup at N_sparse = 90k, N_hash = 400k

def test_criterion_8_fast_voxel_query_speedup(record_property):
    note = _criterion(record_property, 8)
    t0 = time.perf_counter()
    report = run_bench(n_sparse=90_000, n_queries=90_000, n_hash=400_000, per_query=48, seed=0)
    elapsed = time.perf_counter() - t0
    note(f"{report.n_candidates} candidates, hash {report.timing['hash_seconds']:.3f}s, scan "
         f"{report.timing['scan_seconds']:.1f}s, speedup {report.speedup:.0f}x (limit 10x), "
         f"verified={report.verified}, {elapsed:.1f}s (limit 180s)")
    assert report.verified
    assert report.speedup >= 10
    assert elapsed < 180


# 9. determinism of the run command

def test_criterion_9_run_determinism(record_property, tmp_path):
    note = _criterion(record_property, 9)
    outs = []
    for name in ("a", "b"):
        path = tmp_path / f"{name}.json"
        assert main(["run", "--synthetic", "3000", "--seed", "11", "--out", str(path)]) == EXIT_OK
        outs.append(json.loads(path.read_text()))
    stripped = [json.dumps({k: v for k, v in d.items() if k != "timing"}, sort_keys=True)
                for d in outs]
    timing_free = []
    for name in ("c", "d"):
        path = tmp_path / f"{name}.json"
        assert main(["run", "--synthetic", "3000", "--seed", "11", "--no-timing",
                     "--out", str(path)]) == EXIT_OK
        timing_free.append(path.read_bytes())
    note(f"two runs: reports identical excluding timing = {stripped[0] == stripped[1]}, "
         f"--no-timing bytes identical = {timing_free[0] == timing_free[1]}")
    assert stripped[0].encode() == stripped[1].encode()
    assert timing_free[0] == timing_free[1]
