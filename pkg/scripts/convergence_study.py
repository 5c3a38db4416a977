"""Grid self-convergence of the root value for the desk put and the smooth call.

    python3 scripts/convergence_study.py --levels 4 --out out/convergence.csv
"""
import argparse
import csv

from branch_target import hjb
from branch_target.model import OffspringLaw, fintech_scenario

CASES = {
    "desk-put": (dict(b=0.1, c=0.2, r=0.02, kappa=0.1), hjb.GridSpec(-6.0, 2.0, 101, 10, depth=1)),
    "smooth-call": (dict(b=0.1, c=0.2, r=0.02, kappa=1.5, option="call"), hjb.GridSpec(-2.0, 2.0, 101, 10, depth=0)),
}


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--levels", type=int, default=3)
    ap.add_argument("--out", default="out/convergence.csv")
    args = ap.parse_args()
    law = OffspringLaw(0.5, ((2, 1.0),))
    rows = []
    for name, (params, grid) in CASES.items():
        sc = fintech_scenario(**params)
        vals, ratios = hjb.self_convergence(sc.model, law, sc.target, grid, 0.0, levels=args.levels)
        for lvl, v in enumerate(vals):
            ratio = ratios[lvl - 2] if lvl >= 2 else ""
            rows.append([name, lvl, grid.nx * 2**lvl - (2**lvl - 1), repr(v), ratio])
            print(f"{name:>12} level {lvl}: v={v:.8f} {'' if ratio == '' else f'ratio={ratio:.3f}'}")
    with open(args.out, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["case", "level", "nx", "root_value", "ratio"])
        w.writerows(rows)


if __name__ == "__main__":
    main()
