"""Acceptance suite: one PASS/FAIL line per criterion, printed in the terminal summary.

The benchmark is the desk-scale A -> B task from ``cpcseg.benchmark``: a toy
encoder warm-fit on synthetic domain A, adapted on 64x64 domain-B images with
a 1-shot support and 20 queries, seeds 0, 1 and 2.  Runs are cached per
session so criteria that share a run pay for it once.

Run alone with ``pytest -m acceptance -s`` (about 10 minutes on one core).
"""

import subprocess
import sys
import time
from pathlib import Path

import numpy as np
import pytest
import torch

from cpcseg.benchmark import ADAPT, TaskSpec, build_task
from cpcseg.data import downsample_mask, guard_trips, reset_guard_trips
from cpcseg.encoder import encode, init_toy_encoder
from cpcseg.evaluation import eval_unseen, random_support_study, sweep_support
from cpcseg.finetune import finetune_sup, run_strategy, support_prototypes, upsample_probs
from cpcseg.prototype import predict_query

import conftest

pytestmark = pytest.mark.acceptance

SEEDS = (0, 1, 2)
ROOT = Path(__file__).resolve().parents[1]

# tolerances and thresholds, as stated by the criteria
UNIT_BUDGET_S = 60
GRAD_BUDGET_S = 120
GAIN_POINTS = 0.10
GAIN_BUDGET_S = 600
ABLATION_SLACK = 0.02
ABLATION_BUDGET_S = 1800
GAP_POINTS = 0.15
PROB_TOL = 1e-5
SUP_WINDOW, SUP_LAG, SUP_ITERS = 50, 500, 600
# "seen ~ unseen" for the frozen encoder; differences come only from fold composition
CONTROL_TOL = 0.05


def record(criterion, passed, detail):
    line = f"[{'PASS' if passed else 'FAIL'}] {criterion}: {detail}"
    conftest.ACCEPTANCE_LINES.append(line)
    print(line)
    return passed


def fmt(values):
    return " ".join(f"{v:.3f}" for v in values)


class Bench:
    """Lazily built tasks and cached runs keyed by (seed, variant)."""

    VARIANTS = {
        "cpc": {},
        "trans_ft": {"strategy": "trans_ft"},
        "no_ce": {"use_ce": False},
        "no_pc": {"use_pc": False},
        "no_bd": {"use_bd": False},
    }

    def __init__(self):
        self.tasks, self.runs, self.seconds = {}, {}, {}

    def task(self, seed):
        if seed not in self.tasks:
            start = time.perf_counter()
            self.tasks[seed] = build_task(TaskSpec(seed=seed))
            self.seconds[(seed, "build")] = time.perf_counter() - start
        return self.tasks[seed]

    def config(self, seed, variant="cpc"):
        return ADAPT.replace(seed=seed, **self.VARIANTS[variant])

    def none(self, seed):
        task = self.task(seed)
        return task.evaluate(task.base_encoder, ADAPT.replace(seed=seed, strategy="none")).mean_iou

    def run(self, seed, variant="cpc"):
        key = (seed, variant)
        if key not in self.runs:
            start = time.perf_counter()
            self.runs[key] = self.task(seed).run(self.config(seed, variant))
            self.seconds[key] = time.perf_counter() - start
        return self.runs[key]

    def iou(self, seed, variant="cpc"):
        return self.run(seed, variant)[0].mean_iou


@pytest.fixture(scope="module")
def bench():
    reset_guard_trips()
    return Bench()


def run_pytest(marker):
    start = time.perf_counter()
    out = subprocess.run([sys.executable, "-m", "pytest", "-q", "-p", "no:cacheprovider", "-m", marker],
                         cwd=ROOT, capture_output=True, text=True)
    summary = out.stdout.strip().splitlines()[-1] if out.stdout.strip() else out.stderr[-200:]
    return out.returncode, time.perf_counter() - start, summary


# -- criterion 1 ----------------------------------------------------------------------------

def test_c1_unit_examples():
    code, seconds, summary = run_pytest("example and not gradcheck and not acceptance")
    ok = record("1 formula unit suite", code == 0 and seconds < UNIT_BUDGET_S,
                f"{summary} in {seconds:.1f}s (budget {UNIT_BUDGET_S}s)")
    assert ok


def test_c1_domain_gap_is_real(bench):
    gaps = []
    for seed in SEEDS:
        task = bench.task(seed)
        a = task.held_out_a(ADAPT.replace(seed=seed, strategy="none")).mean_iou
        gaps.append(a - bench.none(seed))
    median = float(np.median(gaps))
    ok = record("1 derived: domain gap", median >= GAP_POINTS,
                f"held-out A minus B IoU per seed {fmt(gaps)}, median {median:.3f} (need >= {GAP_POINTS})")
    assert ok


def test_c1_sup_ft_loss_trend(bench):
    failures = []
    for seed in SEEDS:
        task = bench.task(seed)
        warm = task.domain_a.subset(task.domain_a.ids[:task.spec.n_warm])
        # the warm fit itself, extended to 600 iterations, from a fresh encoder
        fresh = init_toy_encoder(task.spec.encoder, seed=seed)
        _, runlog = finetune_sup(fresh, warm.samples,
                                 task.spec.warmup.replace(seed=seed, iterations=SUP_ITERS))
        ma = np.convolve(runlog.column("total"), np.ones(SUP_WINDOW) / SUP_WINDOW, mode="valid")
        bad = [t for t in range(len(ma) - SUP_LAG) if ma[t + SUP_LAG] > ma[t]]
        if bad:
            failures.append((seed, bad[0]))
    ok = record("1 derived: Sup-FT moving-average loss(t+500) <= loss(t)", not failures,
                f"window {SUP_WINDOW}, {SUP_ITERS} iterations, seeds {SEEDS}; violations {failures or 'none'}")
    assert ok


def test_c1_cluster_center_row_vs_random_rows(bench):
    task = bench.task(0)
    rows = random_support_study(task.base_encoder, task.domain_b, 1, [0, 1, 2, 3, 4], bench.config(0))
    random_ious = [r["mean_iou"] for r in rows[:-1]]
    centers = rows[-1]["mean_iou"]
    ok = record("1 derived: cluster-center row >= median of random rows",
                centers >= float(np.median(random_ious)),
                f"random {fmt(random_ious)}, centers {centers:.3f}")
    assert ok


def test_c1_cpc_beats_none_every_seed(bench):
    cpc = [bench.iou(s) for s in SEEDS]
    none = [bench.none(s) for s in SEEDS]
    ok = record("1 derived: CPC > none, 3/3 seeds", all(c > n for c, n in zip(cpc, none)),
                f"cpc {fmt(cpc)} vs none {fmt(none)}")
    assert ok


# -- criterion 2 ----------------------------------------------------------------------------

def test_c2_gradient_suite():
    code, seconds, summary = run_pytest("gradcheck")
    ok = record("2 gradient correctness", code == 0 and seconds < GRAD_BUDGET_S,
                f"{summary} in {seconds:.1f}s (budget {GRAD_BUDGET_S}s)")
    assert ok


# -- criteria 3 to 6 ------------------------------------------------------------------------

def test_c3_domain_gap_improvement(bench):
    gains, seconds = [], 0.0
    for seed in SEEDS:
        gains.append(bench.iou(seed) - bench.none(seed))
        seconds += bench.seconds[(seed, "build")] + bench.seconds[(seed, "cpc")]
    wins = sum(g >= GAIN_POINTS for g in gains)
    ok = record("3 domain-gap improvement", wins == 3 and seconds < GAIN_BUDGET_S,
                f"CPC minus none per seed {fmt(gains)} (need >= {GAIN_POINTS} in 3/3), "
                f"{seconds:.0f}s (budget {GAIN_BUDGET_S}s)")
    assert ok


def test_c4_ablation_direction(bench):
    start = time.perf_counter()
    means = {v: float(np.mean([bench.iou(s, v) for s in SEEDS])) for v in ("cpc", "no_ce", "no_pc", "no_bd")}
    seconds = time.perf_counter() - start + sum(bench.seconds[(s, "cpc")] for s in SEEDS)
    full = means["cpc"]
    ok = (all(full >= means[v] - ABLATION_SLACK for v in ("no_ce", "no_pc", "no_bd"))
          and full > means["no_ce"] and seconds < ABLATION_BUDGET_S)
    detail = ", ".join(f"{k} {v:.3f}" for k, v in means.items())
    ok = record("4 ablation direction", ok, f"3-seed means {detail}; {seconds:.0f}s")
    assert ok


def test_c5_distance_trend(bench):
    rows, wins = [], 0
    for seed in SEEDS:
        runlog = bench.run(seed)[1]
        intra, inter = runlog.column("d_intra"), runlog.column("d_inter")
        k = max(1, len(intra) // 10)
        i0, i1 = np.nanmean(intra[:k]), np.nanmean(intra[-k:])
        e0, e1 = np.nanmean(inter[:k]), np.nanmean(inter[-k:])
        wins += bool(i1 < i0 and e1 > e0)
        rows.append(f"seed {seed} intra {i0:.3f}->{i1:.3f} inter {e0:.3f}->{e1:.3f}")
    ok = record("5 distance trend", wins >= 2, f"{wins}/3 seeds; " + "; ".join(rows))
    assert ok


def test_c6_strategy_ranking(bench):
    cpc = [bench.iou(s) for s in SEEDS]
    trans = [bench.iou(s, "trans_ft") for s in SEEDS]
    wins = sum(c >= t for c, t in zip(cpc, trans))
    ok = record("6 strategy ranking", wins >= 2, f"cpc {fmt(cpc)} vs trans-ft {fmt(trans)}, {wins}/3")
    assert ok


# -- criterion 7 ----------------------------------------------------------------------------

def test_c7_support_selection(bench):
    rows, wins, deterministic = [], 0, True
    for seed in SEEDS:
        task = bench.task(seed)
        pool = task.held_out_pool()
        assert len(pool) == 12
        config = ADAPT.replace(seed=seed, strategy="none")
        report = sweep_support(task.base_encoder, pool, config)
        deterministic &= sweep_support(task.base_encoder, pool, config).to_dict() == report.to_dict()
        wins += report.rep >= report.avg
        rows.append(f"seed {seed} rep {report.rep:.3f} avg {report.avg:.3f}")
    ok = record("7 support selection", wins >= 2 and deterministic,
                f"{wins}/3 seeds rep >= avg; bitwise deterministic {deterministic}; " + "; ".join(rows))
    assert ok


# -- criterion 8 ----------------------------------------------------------------------------

def test_c8_seen_unseen(bench):
    rows, wins, control = [], 0, []
    for seed in SEEDS:
        task = bench.task(seed)
        cpc = eval_unseen(task.base_encoder, task.domain_b, bench.config(seed))
        none = eval_unseen(task.base_encoder, task.domain_b, ADAPT.replace(seed=seed, strategy="none"))
        wins += cpc.unseen.mean_iou > none.unseen.mean_iou
        control.append(abs(none.seen.mean_iou - none.unseen.mean_iou))
        rows.append(f"seed {seed} cpc seen {cpc.seen.mean_iou:.3f} unseen {cpc.unseen.mean_iou:.3f}"
                    f" none unseen {none.unseen.mean_iou:.3f}")
    control_ok = max(control) <= CONTROL_TOL
    ok = record("8 seen/unseen generalization", wins >= 2 and control_ok,
                f"{wins}/3 seeds; none |seen-unseen| max {max(control):.3f} (<= {CONTROL_TOL}); "
                + "; ".join(rows))
    assert ok


# -- criterion 9 ----------------------------------------------------------------------------

def test_c9_invariants(bench):
    problems = []
    for seed in SEEDS:
        task = bench.task(seed)
        tuned = bench.run(seed)[2]
        w_un = bench.run(seed)[1].column("w_un")
        if not np.all((w_un > 0) & (w_un <= 1)):
            problems.append(f"seed {seed}: w_un outside (0, 1]")
        config = bench.config(seed)
        with torch.no_grad():
            f_s = encode(tuned, task.support[0].image)
            m_s = downsample_mask(task.support[0].mask, f_s.shape[:2])
            protos = support_prototypes([f_s], [m_s], 1, config, seed)
            for q in task.queries:
                f_q = encode(tuned, q.image)
                for probs in (predict_query(f_q, protos, config.scale)[0],
                              upsample_probs(f_q, protos, config.scale, q.image.shape[:2])):
                    err = float((probs.double().sum(-1) - 1).abs().max())
                    if err > PROB_TOL:
                        problems.append(f"seed {seed} {q.id}: probability sum off by {err:.1e}")
            twice = support_prototypes([f_s, f_s], [m_s, m_s], 1, config, seed)
            for cls in protos.classes:
                if not torch.equal(protos[cls], twice[cls]):
                    problems.append(f"seed {seed}: duplicate-support prototypes differ (class {cls})")
        for strategy in ("cpc", "sup_ft", "trans_ft", "none"):
            same, _ = run_strategy(task.base_encoder, task.support, task.queries,
                                   config.replace(strategy=strategy, iterations=0))
            for (name, a), b in zip(task.base_encoder.state_dict().items(), same.state_dict().values()):
                if not torch.equal(a, b):
                    problems.append(f"seed {seed} {strategy}: zero iterations changed {name}")
    trips = guard_trips()
    if trips:
        problems.append(f"query-mask guard tripped {trips} times")
    ok = record("9 invariant suite", not problems,
                f"w_un range, probability sums, k-shot collapse, guard trips {trips}, zero-iteration no-op; "
                f"{'; '.join(problems[:3]) or 'all hold'}")
    assert ok
