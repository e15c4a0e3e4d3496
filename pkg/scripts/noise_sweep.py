"""Accuracy of MLP, teacher and HG2M+ as target features are mixed with Gaussian noise."""
import logging

from _common import mean_std, parser, setup, write_rows

from hg2m.evalproto import HG2M_PLUS, MLP, TEACHER, PipelineConfig, run_seed


def main():
    ap = parser(__doc__, preset="structural")
    ap.add_argument("--alphas", default="0,0.25,0.5,0.75,1")
    args = ap.parse_args()
    (g, target, split, _), seeds = setup(args)
    rows = []
    for alpha in (float(a) for a in args.alphas.split(",")):
        acc = {}
        for s in seeds:
            r = run_seed(g, target, split, PipelineConfig(noise_alpha=alpha), s, (MLP, TEACHER, HG2M_PLUS))
            for name, a in r.accuracy.items():
                acc.setdefault(name, []).append(a["tran"])
        for name, v in acc.items():
            rows.append([alpha, name, *mean_std(v)])
        logging.info("alpha %.2f done", alpha)
    write_rows(args.out / "noise.csv", ["alpha", "model", "mean", "std"], rows)


if __name__ == "__main__":
    main()
