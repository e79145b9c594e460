"""Headroom check: zero-shot vs adapted accuracy as measurement noise grows."""

import sys

from _common import base_config, emit, parser, two_way

if __name__ == "__main__":
    p = parser(__doc__)
    p.add_argument("--levels", type=float, nargs="+", default=[0.3, 1.0, 3.0, 5.0])
    args = p.parse_args()
    rows = []
    for sigma in args.levels:
        args.noise = sigma
        cfg = base_config(args)
        for s in range(args.seeds):
            for k in ("zero-shot", "none", "mse", "fourier"):
                rows.append((sigma, s, k, round(two_way(cfg, s, k), 6)))
    emit(rows, ("noise_sigma", "seed", "supervision", "two_way"), args.csv)
    for sigma in args.levels:
        m = {k: [r[3] for r in rows if r[0] == sigma and r[2] == k]
             for k in ("zero-shot", "none", "mse", "fourier")}
        print(f"# sigma {sigma:4.1f}  " + "  ".join(f"{k} {sum(v) / len(v):.4f}"
                                                 for k, v in m.items()), file=sys.stderr)
