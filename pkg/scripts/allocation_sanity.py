#!/usr/bin/env python
# scripts/allocation_sanity.py
"""
Does the importance score rank the ranks the right way round?

For each seed: run the ablation strategy on the desk-scale copy task, score
the final super-network on a validation batch, then mask the bottom-r1 and
the top-r1 ranks by IS and compare cross-entropy on a fresh test batch.
Bottom-r1 pruning must hurt strictly less, on every seed. Also checks that
the Active total never exceeded R_target and equals it whenever every
round grew.

Run:  python scripts/allocation_sanity.py [--seeds 5] [--output runs/sanity]
"""
import argparse
import logging
import sys
import time
from pathlib import Path

import numpy as np
import pandas as pd

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "ranklab"))

from ml.tensor import set_precision  # noqa: E402
from ml.transformer import build_supernetwork  # noqa: E402
from schemas.config import RunConfig  # noqa: E402
from services.allocator import importance_scores, pruning_damage  # noqa: E402
from services.strategies import run_alora  # noqa: E402
from services.trainer import Trainer  # noqa: E402
from tasks.synthetic import gen_task  # noqa: E402

TEST_BATCH_STREAM = 6


def budget_ok(history, R_target: int) -> bool:
    totals = [sum(r.rank_map.values()) for r in history.rounds]
    if any(t > R_target for t in totals):
        return False
    if history.rounds and all(r.delta.grown_module is not None for r in history.rounds):
        return totals[-1] == R_target
    return True


def check_seed(seed: int) -> dict:
    config = RunConfig(seed=seed, task={"seed": seed})
    set_precision(config.precision)
    data = gen_task(config.task)
    model = build_supernetwork(
        config.model, config.allocator.initial_ranks, np.random.default_rng([seed, 0]),
        config.optimizer.adapter_init, config.optimizer.adapter_init_std,
    )
    model, history = run_alora(model, data, config, Trainer(model, config, data))

    a = config.allocator
    b_val = data.val.sample(a.val_batch_size, np.random.default_rng([seed, 3, a.N_A + 1]))
    report = importance_scores(model, b_val, a.N_A + 1, n_jobs=a.n_jobs)
    b_test = data.test.sample(a.val_batch_size, np.random.default_rng([seed, TEST_BATCH_STREAM]))
    bottom = pruning_damage(model, report, b_test, a.r1, "bottom")
    top = pruning_damage(model, report, b_test, a.r1, "top")
    return {
        "seed": seed,
        "ce_bottom_pruned": bottom,
        "ce_top_pruned": top,
        "ordered": bottom < top,
        "budget_ok": budget_ok(history, a.R_target),
        "active": model.total_active(),
    }


if __name__ == "__main__":
    parser = argparse.ArgumentParser()
    parser.add_argument("--seeds", type=int, default=5)
    parser.add_argument("--output", type=Path, default=None, help="write the per-seed table as CSV")
    args = parser.parse_args()
    logging.basicConfig(level=logging.WARNING)

    print("\n" + "=" * 60)
    print("  ranklab – allocation sanity")
    print("=" * 60 + "\n")

    started = time.perf_counter()
    rows = []
    for n, seed in enumerate(range(args.seeds), 1):
        row = check_seed(seed)
        rows.append(row)
        mark = "✅" if row["ordered"] and row["budget_ok"] else "❌"
        print(
            f"[{n}] seed {seed}: CE bottom-pruned {row['ce_bottom_pruned']:.4f} "
            f"vs top-pruned {row['ce_top_pruned']:.4f}, active {row['active']}  {mark}"
        )

    table = pd.DataFrame(rows)
    if args.output is not None:
        args.output.mkdir(parents=True, exist_ok=True)
        table.to_csv(args.output / "allocation_sanity.csv", index=False)
        print(f"\n✅ Saved table → {args.output / 'allocation_sanity.csv'}")

    passed = bool(table["ordered"].all() and table["budget_ok"].all())
    print(f"\n{'✅' if passed else '❌'} {int(table['ordered'].sum())}/{len(table)} seeds ordered, "
          f"budget held on {int(table['budget_ok'].sum())}/{len(table)} "
          f"({time.perf_counter() - started:.0f}s)")
    sys.exit(0 if passed else 1)
