"""Pre-train GNN+FR on the 30-node grid, then fine-tune after removing one or two lines."""
import argparse
from pathlib import Path

from lmplab import jsonio
from lmplab.experiments import COUNT, TRANSFER_SEEDS, default_grid, learning_run, transfer_runs
from lmplab.transfer import summarize, write_per_sample_tsv


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seeds", default=",".join(map(str, TRANSFER_SEEDS)))
    ap.add_argument("--count", type=int, default=COUNT)
    ap.add_argument("--finetune-epochs", type=int, default=5)
    ap.add_argument("--out", type=Path, default=Path("results"))
    args = ap.parse_args()
    args.out.mkdir(parents=True, exist_ok=True)
    grid = default_grid()
    base = learning_run(0, grid, args.count, with_mse=False)
    print(f"pre-trained test L2 {base.fr.normalized_l2:.4f}")
    seeds = tuple(int(s) for s in args.seeds.split(","))
    exps, secs = transfer_runs(base.regressor, seeds, grid, count=args.count,
                               finetune_epochs=args.finetune_epochs)
    print("seed\tremoved\tpretrained\tfinetuned\tscratch")
    for e in exps:
        print(e.perturb_seed, e.removed_edges, *(f"{e.metrics(v).normalized_l2:.4f}" for v in e.VARIANTS),
              sep="\t")
    med = summarize(exps)
    print("median", "", *(f"{med[v]['normalized_l2']:.4f}" for v in exps[0].VARIANTS), sep="\t")
    print(f"{secs:.0f}s for {len(exps)} experiments")
    doc = {"experiments": [e.to_dict() for e in exps], "summary": med}
    (args.out / "transfer.json").write_text(jsonio.dumps(doc) + "\n", encoding="utf-8")
    write_per_sample_tsv(exps, args.out / "transfer_per_sample.tsv")


if __name__ == "__main__":
    main()
