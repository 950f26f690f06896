"""FLOP-ledger fits and a prefill wall-clock sweep, full vs CCA.

    python scripts/scaling_sweep.py [--lengths 4096 8192 16384] [--out sweep.csv]

Prints the quadratic/linear R^2 of the ledger, the doubling ratios, and the
measured full/cca prefill time ratio per length; writes the timed records to CSV.
"""
import argparse

import numpy as np

from cca_attention.attention import AttentionConfig
from cca_attention.bench import fit_r2, flops_attention, run_suite


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--lengths", type=int, nargs="+", default=[4096, 8192, 16384])
    ap.add_argument("-g", type=int, default=16)
    ap.add_argument("-s", type=int, default=256)
    ap.add_argument("--groups", type=int, default=256, help="m for the fixed-group ledger fit")
    ap.add_argument("--repeats", type=int, default=5)
    ap.add_argument("--out", default="sweep.csv")
    args = ap.parse_args()

    cfg = AttentionConfig(group_size=args.g, local_window=args.s, n_heads=1, head_dim=16)
    Ls = np.array([1024, 2048, 4096, 8192])
    full = [flops_attention("full", int(L), cfg) for L in Ls]
    cca = [flops_attention("cca", int(L), cfg, fixed_groups=args.groups) for L in Ls]
    print(f"ledger R^2: full ~ L^2 {fit_r2(Ls.astype(float) ** 2, full):.6f}, "
          f"cca(m={args.groups}) ~ L {fit_r2(Ls, cca):.6f}")
    print("doubling ratios  full: " + " ".join(f"{b / a:.3f}" for a, b in zip(full, full[1:]))
          + "   cca: " + " ".join(f"{b / a:.3f}" for a, b in zip(cca, cca[1:])))

    recs = run_suite(cfg, args.lengths, ["full", "cca"], args.out, modes=["prefill"],
                     repeats=args.repeats)
    by = {(r.variant, r.L): r.wall_ms for r in recs}
    for L in args.lengths:
        f, c = by[("full", L)], by[("cca", L)]
        print(f"L={L:6d}  full {f:9.2f} ms  cca {c:9.2f} ms  ratio {f / c:5.2f}")
    print(f"wrote {args.out}")


if __name__ == "__main__":
    main()
