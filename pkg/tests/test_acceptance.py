"""Acceptance gate: one test per criterion, each printing a pass/fail line."""

import json
from pathlib import Path

import numpy as np

from selfres.model import KVCache, ModelConfig, forward_range, init_weights
from selfres.oracle import (PlantedWorkload, baseline_run, brute_force_topk, calibrate_beta,
                            hidden_divergence, pipeline_recall, reference_reflection_logits,
                            reflective_prefill_macs)
from selfres.pipeline import (Prompt, SaliencyTable, Segment, build_path_sequence, run_pipeline,
                              select_salient, self_reflect, split_paths)
from selfres.vision import encode_and_project, sample_frames_uniform

from conftest import ACCEPTANCE_LINES, SMALL, small_video

FIXTURE = json.loads((Path(__file__).parent / "fixtures" / "planted_beta.json").read_text())
DEFAULT = ModelConfig()
WEIGHTS = init_weights(DEFAULT)
PROMPT = Prompt((1, 2, 3, 4), (10, 11, 12, 13))


def record(number, title, ok, detail):
    ACCEPTANCE_LINES.append(f"[{'PASS' if ok else 'FAIL'}] criterion {number}: {title} ({detail})")
    assert ok, detail


def seed_range(pair):
    return range(pair[0], pair[1] + 1)


def reflected_paths(weights, video, T, S, layer, prompt=PROMPT):
    vis = encode_and_project(video, sample_frames_uniform(video.num_frames, T), weights)
    paths = [build_path_sequence(weights, prompt, v, i) for i, v in enumerate(split_paths(vis, S))]
    return self_reflect(paths, weights, layer)


def workload_video(seed, beta=2.0, num_frames=64, patches=8):
    wl = PlantedWorkload(num_frames=num_frames, patches=patches)
    return wl.video(WEIGHTS, seed, beta)


def test_criterion_01_single_path_reduces_to_baseline():
    mismatches, cases = [], 0
    for seed in range(20):
        cfg = SMALL.replace(seed=100 + seed)
        w = init_weights(cfg)
        T = (4, 8, 12, 16)[seed % 4]
        v = small_video(seed=seed, beta=float(seed % 3))
        base = baseline_run(v, Prompt((1, 2, 3), (5, 6, 7)), w, T)
        for mode in ("regular", "smooth"):
            res = run_pipeline(v, Prompt((1, 2, 3), (5, 6, 7)), w, T, T, mode=mode)
            cases += 1
            if res.output_ids != base.output_ids:
                mismatches.append((seed, mode))
    record(1, "R=1 equals baseline in both modes", not mismatches,
           f"{cases - len(mismatches)}/{cases} identical")


def test_criterion_02_sra_matches_oracle():
    worst, cases = 0.0, 0
    for seed in range(50):
        layer = seed % DEFAULT.num_layers + 1
        video = workload_video(seed, beta=float(seed % 4))
        paths, table = reflected_paths(WEIGHTS, video, 16, 8, layer)
        for p in paths:
            ref = reference_reflection_logits(p, WEIGHTS, layer)
            got = table.score[table.path == p.index].astype(np.float64)
            worst = max(worst, float(np.max(np.abs(got - ref))))
            cases += 1
    record(2, "SRA scores match full-attention oracle", cases == 100 and worst <= 1e-5,
           f"{cases} cases, max abs diff {worst:.2e}")


def test_criterion_03_topk_matches_bruteforce():
    rng = np.random.default_rng(2024)
    bad = 0
    for _ in range(200):
        n_visual = int(rng.integers(1, 12))
        R = int(rng.integers(1, 5))
        scores = rng.integers(0, 5, size=R * n_visual) / np.float32(4)
        table = SaliencyTable.from_scores(scores, n_visual)
        keep = int(rng.integers(1, len(table) + 1))
        if select_salient(table, keep).tolist() != brute_force_topk(table, keep):
            bad += 1
    record(3, "top-k selection matches exhaustive sort", bad == 0,
           f"{200 - bad}/200 tables identical")


def test_criterion_04_planted_recall():
    target = FIXTURE["target_recall"]
    details, ok = [], True
    for spec in FIXTURE["workloads"]:
        wl = PlantedWorkload(num_frames=spec["num_frames"], patches=spec["patches"],
                             frames=spec["frames"], segment=spec["segment"],
                             event_frames=tuple(spec["event_frames"]),
                             event_patches=tuple(spec["event_patches"]), prompt=PROMPT)
        cal = calibrate_beta(wl, WEIGHTS, target, seed_range(FIXTURE["calibration_seeds"]))
        direction = wl.direction(WEIGHTS)

        def recall(beta):
            hits = []
            for seed in seed_range(FIXTURE["holdout_seeds"]):
                video = wl.video(WEIGHTS, seed, beta, direction)
                res = run_pipeline(video, wl.prompt, WEIGHTS, wl.frames, wl.segment,
                                   keep=wl.keep_count(), max_new=1)
                hits.append(pipeline_recall(res, wl, video))
            return float(np.mean(hits))

        held, control, chance = recall(spec["beta"]), recall(0.0), wl.chance_recall()
        ok &= cal.beta == spec["beta"] and held >= 0.95 and abs(control - chance) <= 0.1
        details.append(f"R={wl.num_paths}: beta={cal.beta} (fixture {spec['beta']}), "
                       f"held-out {held:.3f}, control {control:.3f} vs chance {chance:.3f}")
    record(4, "planted-event recall", ok, "; ".join(details))


def test_criterion_05_complexity_factor():
    exact = True
    for R, layer in ((2, 5), (3, 1), (4, 8)):
        video = workload_video(R)
        res = run_pipeline(video, PROMPT, WEIGHTS, 8 * R, 8, layer=layer, max_new=1)
        n_r = res.paths[0].length
        exact &= res.reflection_counters.attention_macs == reflective_prefill_macs(
            R, layer, n_r, DEFAULT.model_dim)
    # one system and one query token; 16 patches x 8 frames = 128 visual tokens per path
    prompt = Prompt((1,), (10,))
    ratios, layer = {}, 1
    for R in (2, 4):
        video = workload_video(R, num_frames=64, patches=16)
        res = run_pipeline(video, prompt, WEIGHTS, 8 * R, 8, layer=layer, max_new=1)
        base = baseline_run(video, prompt, WEIGHTS, 8 * R, max_new=1)
        n_r = res.paths[0].length
        assert (n_r - 2) / n_r >= 0.95
        per_reflect = res.reflection_counters.attention_macs / layer
        per_base = base.counters.attention_macs / DEFAULT.num_layers
        ratios[R] = per_base / per_reflect
    close = all(abs(r / R - 1) <= 0.05 for R, r in ratios.items())
    record(5, "attention work reduced by R", exact and close,
           f"closed form exact={exact}; ratios "
           + ", ".join(f"R={R}: {r:.3f}" for R, r in ratios.items()))


def test_criterion_06_layer_invocations():
    L, bad, cases = DEFAULT.num_layers, [], 0
    for R in (2, 3):
        video = workload_video(R)
        for layer in range(1, L + 1):
            for mode, extra in (("regular", L), ("smooth", L - layer)):
                res = run_pipeline(video, PROMPT, WEIGHTS, 8 * R, 8, layer=layer,
                                   mode=mode, max_new=1)
                cases += 1
                if res.counters.layer_invocations != R * layer + extra:
                    bad.append((R, layer, mode, res.counters.layer_invocations))
    record(6, "layer invocations R*l+L and R*l+(L-l)", not bad,
           f"{cases - len(bad)}/{cases} exact")


def test_criterion_07_batch_vs_sequential():
    notes, ok = [], True
    for R in (2, 3, 4):
        video = workload_video(R, beta=2.5)
        for mode in ("regular", "smooth"):
            a = run_pipeline(video, PROMPT, WEIGHTS, 8 * R, 8, mode=mode, execution="batch")
            b = run_pipeline(video, PROMPT, WEIGHTS, 8 * R, 8, mode=mode, execution="seq")
            same = (a.output_ids == b.output_ids
                    and np.array_equal(a.final_logits, b.final_logits)
                    and a.counters.attention_macs == b.counters.attention_macs)
            smaller = b.counters.peak_live_activation_bytes < a.counters.peak_live_activation_bytes
            ok &= same and smaller
            notes.append(f"R={R} {mode}: {b.counters.peak_live_activation_bytes}"
                         f"<{a.counters.peak_live_activation_bytes}")
    record(7, "batch and sequential agree, sequential peak lower", ok, "; ".join(notes))


def test_criterion_08_position_strategies():
    failures, straddled = [], 0
    for R in (2, 3, 4):
        video = workload_video(10 + R, beta=2.0)
        for strategy in ("reassigned", "dup", "inc", "single"):
            res = run_pipeline(video, PROMPT, WEIGHTS, 8 * R, 8, position_strategy=strategy,
                               max_new=1)
            pos = res.context.positions
            vis = res.context.provenance.segments == Segment.VISUAL
            straddles = len(set(res.table.path[res.selected].tolist())) >= 2
            if strategy == "reassigned":
                ok = pos.tolist() == list(range(len(pos)))
            elif strategy == "dup":
                straddled += straddles
                ok = (not straddles) or len(set(pos[vis].tolist())) < int(vis.sum())
            elif strategy == "inc":
                ok = len(set(pos.tolist())) == len(pos)
            else:
                ok = len(set(pos[vis].tolist())) == 1
            if not ok:
                failures.append((R, strategy))
    record(8, "position strategies", not failures and straddled > 0,
           f"{12 - len(failures)}/12 structural checks, {straddled} duplicated runs straddle paths")


def test_criterion_09_system_prefix_invariance():
    bad, cases = 0, 0
    for seed in range(20):
        R = 2 + seed % 3
        layer = seed % DEFAULT.num_layers + 1
        paths, _ = reflected_paths(WEIGHTS, workload_video(seed, beta=1.5), 8 * R, 8, layer)
        rows = paths[0].sequence.system_rows
        same = all(np.array_equal(p.hidden_in[rows], paths[0].hidden_in[rows])
                   and np.array_equal(p.hidden_out[rows], paths[0].hidden_out[rows])
                   for p in paths[1:])
        report = hidden_divergence(paths, layer).for_segment("system")
        cases += 1
        if not (same and report and all(r.l2 == 0.0 for r in report)):
            bad += 1
    record(9, "system-prefix hidden states identical across paths", bad == 0,
           f"{cases - bad}/{cases} configs exact")


def test_criterion_10_causality_and_split_forward():
    L, bad = DEFAULT.num_layers, 0
    for seed in range(50):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(4, 24))
        h = rng.standard_normal((n, DEFAULT.model_dim)).astype(np.float32)
        pos = np.arange(n)
        full, _ = forward_range(WEIGHTS, h, pos, 1, L + 1)
        cut = int(rng.integers(1, L + 1))
        mid, cache = forward_range(WEIGHTS, h, pos, 1, cut, KVCache(L))
        rest, _ = forward_range(WEIGHTS, mid, pos, cut, L + 1, cache)
        j = int(rng.integers(1, n))
        h2 = h.copy()
        h2[j] += rng.standard_normal(DEFAULT.model_dim).astype(np.float32)
        pert, _ = forward_range(WEIGHTS, h2, pos, 1, L + 1)
        if not (np.array_equal(rest, full) and np.array_equal(pert[:j], full[:j])):
            bad += 1
    record(10, "causality and split-forward equivalence", bad == 0, f"{50 - bad}/50 exact")
