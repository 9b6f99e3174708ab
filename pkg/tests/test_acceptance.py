"""Acceptance criteria, one test each. Every test prints a single PASS/FAIL line."""

import itertools
import time
from pathlib import Path

import numpy as np
import pytest

from vbb import oracle
from vbb import tensor as T
from vbb.attention import flop_count, global_attention, make_permutation, rs_win_attention
from vbb.backbone import VBBModel
from vbb.harness import cli
from vbb.harness.ablate import RUNS
from vbb.harness.bench import counted
from vbb.harness.checks import TINY_MODEL, model_grad_error, permutation_roundtrip
from vbb.harness.csvio import read_csv
from vbb.tensor import Tensor

CONFIGS = Path(__file__).resolve().parent.parent / "configs"
GRID = list(itertools.product((1, 2), (4, 9, 16, 32), (6, 12), (1, 3)))


@pytest.fixture
def report(capsys):
    def emit(number, title, ok, detail):
        with capsys.disabled():
            print(f"\n[criterion {number}] {'PASS' if ok else 'FAIL'} {title}: {detail}")
        assert ok, detail

    return emit


def run(*argv):
    return cli.main([str(a) for a in argv])


def _grid_inputs(B, L, C, seed):
    rng = np.random.default_rng(seed)
    return rng.normal(size=(B, L, C)), rng.normal(size=(C, 3 * C)) / np.sqrt(C)


def test_1_permutation_correctness(report):
    start = time.perf_counter()
    failures = permutation_roundtrip(1000, seed=0)
    rng = np.random.default_rng(1)
    exact = True
    for case in range(200):
        B, L = int(rng.integers(1, 4)), int(rng.integers(1, 65))
        perm = make_permutation(B, L, case)
        x = Tensor(rng.normal(size=(B, L, 5)))
        exact &= np.array_equal(perm.undo(perm.apply(x.data)), x.data)
        shuffled = T.index_select(x, perm.shuffle, axis=1)
        exact &= np.array_equal(T.index_select(shuffled, perm.restore, axis=1).data, x.data)
        back = T.reshape(T.transpose_last2(T.transpose_last2(x)), (B, L, 5))
        exact &= np.array_equal(back.data, x.data)
    elapsed = time.perf_counter() - start
    report(1, "permutation round trip", failures == 0 and exact and elapsed < 5.0,
           f"{failures}/1000 failing, tensor round trip exact={exact}, {elapsed:.2f}s (< 5s)")


def test_2_rs_win_degenerate_equivalence(report):
    start = time.perf_counter()
    worst = 0.0
    for i, (B, L, C, heads) in enumerate(GRID):
        x, w = _grid_inputs(B, L, C, i)
        got = rs_win_attention(Tensor(x), Tensor(w), heads=heads, window_size=L, rng_seed=i)
        worst = max(worst, oracle.compare(got, oracle.full_attention_oracle(x, heads, w)).max_abs_diff)
    elapsed = time.perf_counter() - start
    report(2, "RS-Win window == L vs full-attention oracle", worst < 1e-9 and elapsed < 30.0,
           f"max abs diff {worst:.3e} over {len(GRID)} cases (< 1e-9), {elapsed:.2f}s (< 30s)")


def test_3_global_degenerate_equivalence(report):
    worst = 0.0
    for i, (B, L, C, heads) in enumerate(GRID):
        x, w = _grid_inputs(B, L, C, 100 + i)
        got = global_attention(Tensor(x), Tensor(w), heads=heads, pool_size=1)
        worst = max(worst, oracle.compare(got, oracle.full_attention_oracle(x, heads, w)).max_abs_diff)
    report(3, "global attention pool == 1 vs full-attention oracle", worst < 1e-9,
           f"max abs diff {worst:.3e} over {len(GRID)} cases (< 1e-9)")


def test_4_tiny_model_gradients(report):
    start = time.perf_counter()
    error = model_grad_error(0)
    model = VBBModel(TINY_MODEL)
    rng = np.random.default_rng(0)
    images = rng.normal(size=(2, 3, 8, 8))
    T.cross_entropy_with_logits(model.forward(images), rng.integers(0, 3, 2)).backward()
    scales = [t for stage in model.stages for b in stage.blocks for t in (b.alpha, b.beta, b.lam)]
    nonzero = all(t.grad is not None and np.all(t.grad != 0) for t in scales)
    elapsed = time.perf_counter() - start
    report(4, "tiny model gradient check", error < 1e-4 and nonzero and elapsed < 300.0,
           f"max relative error {error:.3e} (< 1e-4), {len(scales)} scaling weights nonzero={nonzero}, "
           f"{elapsed:.1f}s (< 300s)")


def test_5_complexity(report):
    C, heads, window, keys = 36, 3, 16, 64
    mismatches = 0
    for mech in ("conv", "rs_win", "global", "full"):
        for L in (16, 32, 64):
            pool = max(1, L // keys)
            entry = flop_count(mech, L, C, heads, window_size=window, pool_size=pool)
            mismatches += counted(mech, L, C, heads, window, pool) != (entry.mixing, entry.projection)

    def mixing(mech, L):
        return flop_count(mech, L, C, heads, window_size=window, pool_size=L // keys).mixing

    ratios = {m: [mixing(m, b) / mixing(m, a) for a, b in ((256, 512), (512, 1024))] for m in ("rs_win", "global", "full")}
    want = {"rs_win": 2.0, "global": 2.0, "full": 4.0}
    ok = mismatches == 0 and all(r == [want[m]] * 2 for m, r in ratios.items())
    report(5, "multiply-add counts and scaling", ok, f"{mismatches} counter mismatches for L <= 64, ratios {ratios}")


@pytest.mark.slow
def test_6_zero_padding_positional_signal(report, tmp_path):
    start = time.perf_counter()
    assert run("train", "--config", CONFIGS / "quadrant.cfg", "--out", tmp_path / "pos") == 0
    pos_time = time.perf_counter() - start
    best = max(float(r["train_accuracy"]) for r in read_csv(tmp_path / "pos" / "metrics.csv"))

    start = time.perf_counter()
    assert run("train", "--config", CONFIGS / "quadrant_no_position.cfg", "--out", tmp_path / "neg") == 0
    neg_time = time.perf_counter() - start
    neg = [float(r["train_accuracy"]) for r in read_csv(tmp_path / "neg" / "metrics.csv")]
    ok = best >= 0.95 and all(0.15 <= a <= 0.35 for a in neg) and max(pos_time, neg_time) < 600.0
    report(6, "zero padding carries position", ok,
           f"best train accuracy {best:.3f} (>= 0.95) in {pos_time:.0f}s; negative control range "
           f"[{min(neg):.3f}, {max(neg):.3f}] (0.25 +/- 0.1) in {neg_time:.0f}s (< 600s each)")


@pytest.mark.slow
def test_7_ablation_structure(report, tmp_path):
    assert run("ablate", "--config", CONFIGS / "ablate.cfg", "--out", tmp_path) == 0
    rows = read_csv(tmp_path / "ablation.csv")
    acc = {r["run"]: float(r["final_train_accuracy"]) for r in rows}
    violated = [k for k, v in acc.items() if k != "VBB" and v > acc["VBB"]]
    note = (tmp_path / "ablation_note.txt").exists()
    ok = [r["run"] for r in rows] == [label for label, _ in RUNS] and note == bool(violated)
    ordering = "full model >= every ablation" if not violated else f"note written, beaten by {violated}"
    report(7, "ablation table", ok, f"{len(rows)} rows, accuracies {acc}; {ordering}")


@pytest.mark.parametrize("command,config,extra", [
    ("train", "quadrant.cfg", "epochs=3\nsamples=128\ntest_samples=64\n"),
    ("bench", "bench.cfg", ""),
    ("ablate", "ablate.cfg", "epochs=2\nsamples=96\ntest_samples=32\n"),
    ("check", "check.cfg", ""),
])
def test_8_determinism(report, tmp_path, command, config, extra):
    cfg = tmp_path / config
    cfg.write_text((CONFIGS / config).read_text() + extra)
    for name in ("a", "b"):
        assert run(command, "--config", cfg, "--out", tmp_path / name, "--seed", 7) in (0, 1)
    outputs = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*.csv"))
    same = all((tmp_path / "a" / p).read_bytes() == (tmp_path / "b" / p).read_bytes() for p in outputs)
    report(8, f"determinism ({command})", bool(outputs) and same,
           f"{len(outputs)} CSV files byte-identical across two runs: {same}")
