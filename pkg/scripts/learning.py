"""Train GNN+FR and plain GNN on the 30-node grid for several seeds and compare with the mean baseline."""
import argparse
from pathlib import Path

from lmplab import jsonio
from lmplab.experiments import COUNT, LEARNING_SEEDS, default_grid, learning_run


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seeds", default=",".join(map(str, LEARNING_SEEDS)))
    ap.add_argument("--count", type=int, default=COUNT)
    ap.add_argument("--out", type=Path, default=Path("results"))
    args = ap.parse_args()
    args.out.mkdir(parents=True, exist_ok=True)
    grid = default_grid()
    print("seed\tcongested\tl2_fr\tl2_mse\tl2_base\tviol_fr\tviol_mse\tseconds_fr")
    rows = []
    for seed in (int(s) for s in args.seeds.split(",")):
        r = learning_run(seed, grid, args.count)
        print(r.seed, f"{r.congested_fraction:.3f}", f"{r.fr.normalized_l2:.4f}", f"{r.mse.normalized_l2:.4f}",
              f"{r.baseline.normalized_l2:.4f}", f"{r.fr.violation_rate:.2e}", f"{r.mse.violation_rate:.2e}",
              f"{r.fr_seconds:.0f}", sep="\t", flush=True)
        rows.append(r.numbers())
    (args.out / "learning.json").write_text(jsonio.dumps(rows) + "\n", encoding="utf-8")


if __name__ == "__main__":
    main()
