"""One-shot stimulus selection: density-max, density-min and random picks."""

from _common import base_config, emit, parser, summarize, two_way

if __name__ == "__main__":
    args = parser(__doc__, seeds=5).parse_args()
    cfg = base_config(args)
    rows = [(s, st, round(two_way(cfg, s, "fourier", 1, st), 6))
            for s in range(args.seeds) for st in ("kda_max", "kda_min", "random")]
    emit(rows, ("seed", "strategy", "two_way"), args.csv)
    summarize(rows, 1, 2)
