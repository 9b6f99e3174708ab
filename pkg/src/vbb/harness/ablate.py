"""Remove-one-mechanism ablation runs."""

from __future__ import annotations

import os
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from vbb.harness.config import RunConfig
from vbb.harness.training import train

# label, model overrides; row order of the reference ablation table
RUNS = (
    ("Remove CNN", {"disable_cnn": True}),
    ("Remove RS-Win", {"disable_rswin": True}),
    ("Remove GA", {"disable_ga": True}),
    ("VBB", {}),
)
HEADER = ["run", "final_train_accuracy", "best_train_accuracy", "final_test_accuracy", "final_loss",
          "num_parameters", "conv_parameters"]


def slug(label: str) -> str:
    return label.lower().replace(" ", "_").replace("-", "")


def _one(cfg: RunConfig, label: str, out_dir) -> list:
    result = train(cfg, Path(out_dir) / slug(label))
    conv = sum(t.data.size for name, t in result.model.named_parameters() if ".conv." in name)
    return [label, result.final_accuracy, result.best_accuracy, result.test_accuracy[-1], result.losses[-1],
            result.model.num_parameters(), conv]


def worker_count() -> int:
    raw = os.environ.get("VBB_THREADS", "")
    try:
        return max(1, int(raw)) if raw else 1
    except ValueError:
        return 1


def run_ablation(cfg: RunConfig, out_dir) -> list[list]:
    """Train the four variants with a shared seed; rows follow ``RUNS``."""
    jobs = [(cfg.with_model(**overrides), label) for label, overrides in RUNS]
    workers = min(worker_count(), len(jobs))
    if workers == 1:
        return [_one(c, label, out_dir) for c, label in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        futures = [pool.submit(_one, c, label, out_dir) for c, label in jobs]
        return [f.result() for f in futures]


def ordering_violations(rows: list[list]) -> list[str]:
    """Ablated runs whose final train accuracy beats the full model."""
    full = next(r for r in rows if r[0] == "VBB")
    return [r[0] for r in rows if r[0] != "VBB" and r[1] > full[1]]
