"""Student width sweep: accuracy and single-target MLP latency per hidden size."""
from dataclasses import replace

import numpy as np
from _common import mean_std, parser, setup, write_rows

from hg2m.bench import time_call
from hg2m.evalproto import HG2M_PLUS, MLP, PipelineConfig, run_seed


def main():
    ap = parser(__doc__)
    ap.add_argument("--hidden", default="16,32,64,128,256")
    args = ap.parse_args()
    (g, target, split, _), seeds = setup(args)
    base = PipelineConfig()
    x = g.features[0]
    rows = []
    for h in (int(v) for v in args.hidden.split(",")):
        cfg = replace(base, student=replace(base.student, hidden=h))
        acc = {"MLP": [], "HG2M+": []}
        lat = []
        for s in seeds:
            r = run_seed(g, target, split, cfg, s, (MLP, HG2M_PLUS), keep_models=True)
            for name in acc:
                acc[name].append(r.accuracy[name]["tran"])
            model = r.students["HG2M+"]
            lat.append(time_call(lambda: model.predict(x[:1]), repeats=50, warmup=5).median_ns / 1e6)
        rows.append([h, *mean_std(acc["MLP"]), *mean_std(acc["HG2M+"]), float(np.median(lat))])
    write_rows(args.out / "hidden.csv", ["hidden", "mlp_mean", "mlp_std", "hg2m_plus_mean", "hg2m_plus_std",
                                         "latency_ms"], rows)


if __name__ == "__main__":
    main()
