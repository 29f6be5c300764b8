"""Desk-scale ablation tables (regularization, criterion, class count, hard samples).

Usage: python3 scripts/ablation.py [--config configs/acceptance.yaml] [--modes regularization criterion]
       [--seeds 0 1 2] [--out runs/ablation]
"""
import argparse
import time
from pathlib import Path

from sasl.cli import COMPARE_MODES, compare, write_comparison
from sasl.experiments import ExperimentConfig

ROOT = Path(__file__).resolve().parents[1]


def main() -> None:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--config", default=str(ROOT / "configs" / "acceptance.yaml"))
    p.add_argument("--modes", nargs="+", default=["regularization", "criterion", "hard-fraction"],
                   choices=COMPARE_MODES)
    p.add_argument("--seeds", nargs="+", type=int)
    p.add_argument("--out", default="runs/ablation")
    args = p.parse_args()
    cfg = ExperimentConfig.load(args.config)
    if args.seeds:
        cfg.seeds = args.seeds
    cfg.output_dir = args.out
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cache = {}
    for mode in args.modes:
        start = time.perf_counter()
        result = compare(cfg, mode, with_reference=True, cache=cache)
        write_comparison(out, result)
        print(f"== {mode} ({time.perf_counter() - start:.0f}s, seeds {cfg.seeds})")
        for r in result["rows"]:
            print(f"{r['arm']:>12}  FLOPs↓ {r['flops_reduction_pct']:6.2f}  ACC {r['accuracy_pct']:6.2f}"
                  f" ± {r['accuracy_std']:.2f}  ACC↓ {r['accuracy_drop_pct']:6.2f}"
                  f"  sparsified {r['sparsified_fraction']:.3f}")


if __name__ == "__main__":
    main()
