"""Train the default desk-scale plain CNN on the default synthetic task and report test accuracy.

This is the full-size profile (8 classes, 24x24, 800 training images per
class); on one CPU core it takes roughly 20-25 minutes.
"""
import argparse
import time

from sasl.experiments import ExperimentConfig, init_model, load_data
from sasl.trainer import train_normal


def main() -> None:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--epochs", type=int)
    args = p.parse_args()
    cfg = ExperimentConfig().with_seed(args.seed)
    if args.epochs is not None:
        cfg.sparsity.epochs = args.epochs
    data = load_data(cfg.data)
    model = init_model(cfg, data)
    start = time.perf_counter()
    result = train_normal(model, data.train, cfg.sparsity.train_config(), eval_data=data.test)
    for e in result.logs:
        print(f"epoch {e.epoch:2d}  loss {e.task_loss:.4f}  train {100 * e.train_accuracy:.2f}%"
              f"  test {100 * e.test_accuracy:.2f}%")
    print(f"final test accuracy {100 * result.logs[-1].test_accuracy:.2f}% in {time.perf_counter() - start:.0f}s")


if __name__ == "__main__":
    main()
