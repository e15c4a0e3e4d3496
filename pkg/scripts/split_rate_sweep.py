"""Production accuracy as the share of inductive test nodes grows."""
from _common import parser, setup, write_rows

from hg2m.evalproto import DEFAULT_VARIANTS, PipelineConfig, run_production_eval


def main():
    ap = parser(__doc__, preset="separable")
    ap.add_argument("--rates", default="0.1,0.2,0.3,0.4,0.5")
    args = ap.parse_args()
    (g, target, split, _), seeds = setup(args)
    rows = []
    for rate in (float(r) for r in args.rates.split(",")):
        rep = run_production_eval(g, target, split, PipelineConfig(), seeds, rate, DEFAULT_VARIANTS)
        for m in rep.models:
            rows.append([rate, m, *(rep.mean(m, s) for s in ("tran", "ind", "prod"))])
    write_rows(args.out / "split_rate.csv", ["ind_rate", "model", "tran", "ind", "prod"], rows)


if __name__ == "__main__":
    main()
