"""A short federated run of every method on MissBoth data.

Uses fewer rounds than the default so it finishes in a couple of minutes;
pass a round count on the command line for longer runs.  Metrics go to
./runs/demo/<method>/metrics.csv.
"""
import sys

from mmfedprompt.orchestrator import RunConfig, output_root, run

rounds = int(sys.argv[1]) if len(sys.argv) > 1 else 10
root = output_root() / "demo"
for method in ("fed-prime", "fed-inter", "fed-intra", "fedavg-p", "centralized-p"):
    cfg = RunConfig(method=method, train_scenario="miss-both", eta=0.7, rounds=rounds, seed=0)
    res = run(cfg, out_dir=root / method)
    first, last = res.metrics[0], res.metrics[-1]
    print(f"{method:14s} acc {res.initial.test_acc:.3f} -> {last.test_acc:.3f}  "
          f"loss {first.test_loss:.3f} -> {last.test_loss:.3f}  inter/pattern pool {last.pool_size}")

refs = res.references
print(f"references: majority {refs['majority_class']:.3f}, nearest mean {refs['nearest_mean']:.3f}, "
      f"uniform {refs['uniform']:.3f}")
