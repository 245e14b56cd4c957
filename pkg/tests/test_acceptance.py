"""Acceptance criteria on the synth-20 B4-C2 benchmark.

Every criterion stores a (passed, detail) pair in ``RESULTS``. The conftest
prints them as one line per criterion at the end of the session. The module
can also be run directly: ``python3 tests/test_acceptance.py``.

The full-size runs are shared through a module cache, so the first criterion
that needs a run pays for it. Expect about ten minutes on one core.
"""

import subprocess
import sys
import time

import numpy as np
import pytest

from ddpcil import cli
from ddpcil.datagen import SyntheticSpec, generate
from ddpcil.metrics import average_precision, f1_scores, false_positive_rate
from ddpcil.protocol import evaluate
from ddpcil.scoring import PcdSchedule, pcd_tau
from oracles import ap_bruteforce, f1_bruteforce, fpr_bruteforce, random_instance

RESULTS: dict[int, tuple[bool, str]] = {}
FINAL = 9


def record(n: int, ok: bool, detail: str) -> bool:
    RESULTS[n] = (bool(ok), detail)
    print(f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}")
    return bool(ok)


@pytest.fixture(scope="module")
def synth20():
    return generate(SyntheticSpec())


class Runs:
    """Full B4-C2 runs keyed by label, each timed and written like ``ddpcil run``."""

    def __init__(self, data, root):
        self.data, self.root = data, root
        self.results, self.seconds = {}, {}

    def get(self, label, *flags):
        if label not in self.results:
            out = self.root / label
            args = cli.build_parser().parse_args(["run", "--out", str(out), *flags])
            m = cli.resolve_manifest(args, env={})
            t0 = time.perf_counter()
            self.results[label] = cli.run_to_dir(m, *self.data, verbose=False)
            self.seconds[label] = time.perf_counter() - t0
        return self.results[label]

    def last_map(self, label, *flags):
        return self.get(label, *flags).report.last["default"]["mAP"]


@pytest.fixture(scope="module")
def runs(synth20, tmp_path_factory):
    return Runs(synth20, tmp_path_factory.mktemp("acceptance"))


def test_c01_gradient_suite(capsys):
    t0 = time.perf_counter()
    code = cli.main(["gradcheck"])
    secs = time.perf_counter() - t0
    out = capsys.readouterr().out
    worst = max(float(line.split("rel_err=")[1].split()[0]) for line in out.splitlines() if "rel_err=" in line)
    ok = record(1, code == 0 and secs < 30, f"exit {code}, worst rel err {worst:.2e}, {secs:.1f}s (< 30s)")
    assert ok, out


@pytest.mark.slow
def test_c02_pcd_keeps_map(runs):
    on = runs.get("class-specific").report
    off = runs.get("pcd-off", "--pcd", "off").report
    diffs = [abs(a.mAP - b.mAP) for a, b in zip(on.records, off.records, strict=True)]
    taus = [r.tau for r in on.by_task("default")]
    ok = record(2, max(diffs) <= 1e-12 and taus[-1] == 7.0,
                f"max per-task |mAP(on) - mAP(off)| = {max(diffs):.1e} over {len(diffs)} records (<= 1e-12)")
    assert ok


@pytest.mark.slow
def test_c03_exact_non_forgetting(runs):
    state = runs.get("class-specific").state
    first = state.schedule.classes(1)
    sp1, sn1 = state.scores[1]
    identical = all(
        state.scores[t][0][:, :len(first)].tobytes() == sp1.tobytes()
        and state.scores[t][1][:, :len(first)].tobytes() == sn1.tobytes()
        for t in range(2, FINAL + 1)
    )
    spread = 0.0
    recs = runs.get("class-specific").report.by_task("default")
    for c in first:
        aps = [r.per_class_ap[str(c)] for r in recs if str(c) in r.per_class_ap]
        spread = max(spread, max(aps) - min(aps))
    ok = record(3, identical and spread <= 1e-12,
                f"task-1 score pairs bit-identical at t=2..{FINAL}: {identical}; AP spread {spread:.1e} (<= 1e-12)")
    assert ok


def test_c04_schedule_endpoints():
    base, total = 4, 20
    good = []
    for tau_max, gamma in ((7.0, 0.2), (3.0, 0.7)):
        s = PcdSchedule(tau_max, gamma, base, total)
        sweep = [pcd_tau(s, x) for x in np.linspace(base, total, 20001)]
        good.append(pcd_tau(s, base) == 1.0 and pcd_tau(s, total) == tau_max
                    and all(b >= a for a, b in zip(sweep, sweep[1:])))
    ok = record(4, all(good), "tau(base) == 1 and tau(total) == tau_max exactly, monotone over 20001 points, "
                              "for (7, 0.2) and (3, 0.7)")
    assert ok


def test_c05_metric_oracles():
    rng = np.random.default_rng(5)
    t0 = time.perf_counter()
    worst = 0.0
    for _ in range(1000):
        scores, labels, dec = random_instance(rng)
        for c in range(labels.shape[1]):
            if labels[:, c].any():
                want = ap_bruteforce(scores[:, c].tolist(), labels[:, c].tolist())
                worst = max(worst, abs(average_precision(scores[:, c], labels[:, c]) - float(want)))
        cf1, of1 = f1_scores(dec, labels)
        wc, wo = f1_bruteforce(dec.tolist(), labels.tolist())
        worst = max(worst, abs(cf1 - float(wc)), abs(of1 - float(wo)))
        if (~labels).any():
            worst = max(worst, abs(false_positive_rate(dec, labels) - float(fpr_bruteforce(dec.tolist(), labels.tolist()))))
    secs = time.perf_counter() - t0
    ok = record(5, worst <= 1e-12 and secs < 10, f"worst deviation {worst:.1e} over 1000 instances, {secs:.2f}s (< 10s)")
    assert ok


@pytest.mark.slow
def test_c06_prompt_mode_ordering(runs):
    modes = ("class-specific", "task-specific", "global", "none")
    maps = {m: runs.last_map(m, "--prompt-mode", m) for m in modes}
    secs = sum(runs.seconds[m] for m in modes)
    ordered = maps["class-specific"] > maps["task-specific"] > maps["global"] > maps["none"]
    gap = maps["class-specific"] - maps["none"]
    detail = ", ".join(f"{m} {100 * v:.1f}" for m, v in maps.items())
    ok = record(6, ordered and gap >= 0.30 and secs < 600,
                f"last mAP {detail}; class - none = {100 * gap:.1f} pts (>= 30); {secs:.0f}s (< 600s)")
    assert ok


@pytest.mark.slow
def test_c07_branch_ordering(runs):
    maps = {b: runs.last_map("class-specific" if b == "both" else b, *(() if b == "both" else ("--branch-mode", b)))
            for b in ("both", "pos-only", "neg-only")}
    gap = maps["both"] - maps["neg-only"]
    ok = maps["both"] >= maps["pos-only"] >= maps["neg-only"] and gap >= 0.02
    detail = ", ".join(f"{b} {100 * v:.1f}" for b, v in maps.items())
    record(7, ok, f"last mAP {detail}; both - neg-only = {100 * gap:.1f} pts (>= 2)")
    assert ok


@pytest.mark.slow
def test_c08_confidence_compression(runs):
    on = runs.get("class-specific").report.by_task("high-confidence")[-1]
    off = runs.get("pcd-off", "--pcd", "off").report.by_task("high-confidence")[-1]
    ok = record(8, on.FPR < off.FPR and abs(on.mAP - off.mAP) <= 1e-12,
                f"final-task high-confidence FPR {100 * on.FPR:.2f}% with PCD (tau {on.tau:g}) "
                f"vs {100 * off.FPR:.2f}% at tau 1; mAP equal")
    assert ok


@pytest.mark.slow
def test_c09_prefix_cache(runs, synth20):
    state = runs.get("class-specific").state
    test = synth20[1]
    saved = state.scores[FINAL]
    try:
        state._prefix.clear()
        t0 = time.perf_counter()
        evaluate(state, FINAL, test, cached=True)
        cached_s = time.perf_counter() - t0
        sp_c, sn_c = state.scores[FINAL]
        t0 = time.perf_counter()
        evaluate(state, FINAL, test, cached=False)
        naive_s = time.perf_counter() - t0
        sp_n, sn_n = state.scores[FINAL]
    finally:
        state.scores[FINAL] = saved
    rng = np.random.default_rng(9)
    rows = rng.integers(0, sp_c.shape[0], 100)
    cols = rng.integers(0, sp_c.shape[1], 100)
    dev = max(np.abs(sp_c[rows, cols] - sp_n[rows, cols]).max(), np.abs(sn_c[rows, cols] - sn_n[rows, cols]).max())
    speedup = naive_s / cached_s
    ok = record(9, dev <= 1e-10 and speedup >= 1.5,
                f"max deviation {dev:.1e} on 100 pairs (<= 1e-10); cached {cached_s:.2f}s vs naive {naive_s:.2f}s "
                f"= {speedup:.1f}x (>= 1.5x)")
    assert ok


@pytest.mark.slow
def test_c10_determinism(runs, tmp_path):
    first = runs.root / "class-specific"
    runs.get("class-specific")
    proc = subprocess.run(
        [sys.executable, "-m", "ddpcil.cli", "run", "--manifest", str(first / "manifest.txt"), "--out", str(tmp_path)],
        capture_output=True, text=True,
    )
    same = {name: (tmp_path / name).read_bytes() == (first / name).read_bytes()
            for name in ("report.json", "prompts.ckpt")} if proc.returncode == 0 else {}
    ok = record(10, proc.returncode == 0 and all(same.values()) and same != {},
                f"rerun from persisted manifest: exit {proc.returncode}, "
                + ", ".join(f"{k} {'identical' if v else 'differs'}" for k, v in same.items()))
    assert ok, proc.stdout + proc.stderr


@pytest.mark.slow
def test_training_loss_falls_on_every_task(runs):
    losses = runs.get("class-specific").state.losses
    assert all(v[-1] <= v[0] for v in losses.values())


@pytest.mark.slow
def test_prompt_free_is_near_chance(runs, synth20):
    rep = runs.get("none", "--prompt-mode", "none").report
    # chance-level AP is the positive rate of each class
    base = synth20[1].labels.mean(axis=0).mean()
    assert abs(rep.last["default"]["mAP"] - base) < 0.05


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-v", "-s"]))
