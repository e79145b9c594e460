"""Compare adapter supervision (none / mse / amp / fourier) against zero-shot."""

from _common import base_config, emit, parser, summarize, two_way

KINDS = ("zero-shot", "none", "mse", "amp", "fourier")

if __name__ == "__main__":
    args = parser(__doc__).parse_args()
    cfg = base_config(args)
    rows = [(s, k, round(two_way(cfg, s, k), 6)) for s in range(args.seeds) for k in KINDS]
    emit(rows, ("seed", "supervision", "two_way"), args.csv)
    summarize(rows, 1, 2)
