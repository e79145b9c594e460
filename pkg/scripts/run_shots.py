"""Few-shot scaling: fourier-supervised adaptation with 1, 2 and 3 stimuli per class."""

from _common import base_config, emit, parser, summarize, two_way

if __name__ == "__main__":
    args = parser(__doc__).parse_args()
    cfg = base_config(args)
    rows = [(s, f"{k}-shot", round(two_way(cfg, s, "fourier", k), 6))
            for s in range(args.seeds) for k in (1, 2, 3)]
    emit(rows, ("seed", "shots", "two_way"), args.csv)
    summarize(rows, 1, 2)
