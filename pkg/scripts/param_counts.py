"""Parameter totals of GNN, GiDNN and FCNN on synthetic grids of growing size."""
import argparse

from lmplab.grid import generate_synthetic_grid
from lmplab.nn import count_parameters


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--sizes", default="10,20,40,80,118")
    ap.add_argument("--width", type=int, default=32, help="hidden per-node width")
    ap.add_argument("--K", type=int, default=2)
    args = ap.parse_args()
    dims = (4, args.width, args.width, 1)
    print("N\tE\tN+2E\tgnn\tgidnn\tfcnn")
    for n in (int(s) for s in args.sizes.split(",")):
        g = generate_synthetic_grid(n, 2.5, 1.0, seed=n)
        counts = [count_parameters(k, dims, g, K=args.K) for k in ("gnn", "gidnn", "fcnn")]
        print(n, g.n_edges, n + 2 * g.n_edges, *counts, sep="\t")


if __name__ == "__main__":
    main()
