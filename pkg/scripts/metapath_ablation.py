"""RMPD with each meta-path alone, all of them, and none."""
from _common import mean_std, parser, setup, write_rows

from hg2m.evalproto import HG2M_PLUS, PipelineConfig, Variant, default_metapaths, run_seed


def main():
    args = parser(__doc__).parse_args()
    (g, target, split, _), seeds = setup(args)
    names = [str(mp) for mp in default_metapaths(g, target.target_type)]
    variants = [Variant("none", metapaths=())]
    variants += [Variant(n, metapaths=(n,)) for n in names]
    variants.append(HG2M_PLUS)
    acc = {v.name: [] for v in variants}
    for s in seeds:
        r = run_seed(g, target, split, PipelineConfig(), s, variants)
        for name, a in r.accuracy.items():
            acc[name].append(a["tran"])
    write_rows(args.out / "metapaths.csv", ["metapaths", "mean", "std"],
               [["all" if n == HG2M_PLUS.name else n, *mean_std(v)] for n, v in acc.items()])


if __name__ == "__main__":
    main()
