"""HG2M+ accuracy across the reliable-node proportion p and the supervision weight lambda."""
from _common import mean_std, parser, setup, write_rows

from hg2m.evalproto import MLP, PipelineConfig, Variant, run_seed


def main():
    ap = parser(__doc__)
    ap.add_argument("--ps", default="0.5,0.6,0.7,0.8,0.9,1.0")
    ap.add_argument("--lambdas", default="0,0.2,0.4,0.6,0.8,1.0")
    args = ap.parse_args()
    (g, target, split, _), seeds = setup(args)
    variants = [MLP]
    variants += [Variant(f"p={p}", p=float(p)) for p in args.ps.split(",")]
    variants += [Variant(f"lambda={lam}", lam=float(lam)) for lam in args.lambdas.split(",")]
    acc = {v.name: [] for v in variants}
    for s in seeds:
        # one teacher per seed; artifacts are cached per p inside run_seed
        r = run_seed(g, target, split, PipelineConfig(), s, variants)
        for name, a in r.accuracy.items():
            acc[name].append(a["tran"])
    rows = [[*v.name.split("="), *mean_std(acc[v.name])] for v in variants[1:]]
    rows.append(["baseline", "MLP", *mean_std(acc["MLP"])])
    write_rows(args.out / "p_lambda.csv", ["parameter", "value", "mean", "std"], rows)


if __name__ == "__main__":
    main()
