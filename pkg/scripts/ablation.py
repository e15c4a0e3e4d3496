"""Component ablation: HG2M, +RND, +RMPD, HG2M+ against MLP and the teacher."""
import logging

from _common import mean_std, parser, setup, write_rows

from hg2m.evalproto import HG2M, HG2M_PLUS, HG2M_RMPD, HG2M_RND, MLP, TEACHER, PipelineConfig, run_seed

VARIANTS = (MLP, TEACHER, HG2M, HG2M_RND, HG2M_RMPD, HG2M_PLUS)


def main():
    args = parser(__doc__).parse_args()
    (g, target, split, _), seeds = setup(args)
    acc = {v.name: [] for v in VARIANTS}
    diag = []
    for s in seeds:
        r = run_seed(g, target, split, PipelineConfig(), s, VARIANTS, diagnostics=True)
        for name, a in r.accuracy.items():
            acc[name].append(a["tran"])
        diag.append(r.diagnostics)
        logging.info("seed %d %s", s, {k: round(v["tran"], 4) for k, v in r.accuracy.items()})
    write_rows(args.out / "ablation.csv", ["model", "mean", "std"],
               [[name, *mean_std(v)] for name, v in acc.items()])
    rows = [[s, d["acc_unlabeled"], d["acc_reliable_unlabeled"], name, m["homophily_raw"],
             m["homophily_selected_unlabeled"], m["pairs_raw"], m["pairs_selected"]]
            for s, d in zip(seeds, diag) for name, m in d["metapaths"].items()]
    write_rows(args.out / "reliability.csv", ["seed", "acc_unlabeled", "acc_reliable_unlabeled", "metapath",
                                              "homophily_raw", "homophily_selected", "pairs_raw", "pairs_selected"],
               rows)


if __name__ == "__main__":
    main()
