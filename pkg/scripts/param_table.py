"""Parameter counts for every pooling/head combination at full and desk resolution."""
import argparse

from texiris.models import FULL_RESOLUTION, CombNetVariant, combnet_spec, count_params


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--classes", type=int, default=227)
    ap.add_argument("--verbose", action="store_true", help="print per-layer tables")
    args = ap.parse_args()

    rows = []
    for hw in (FULL_RESOLUTION, (32, 128)):
        for pool, head in (("max", "fc"), ("eap", "fc"), ("eap", "tel")):
            report = count_params(combnet_spec(CombNetVariant(pool, head, "random"), args.classes, hw))
            rows.append((f"{hw[0]}x{hw[1]}", f"{pool}+{head}", report.total))
            if args.verbose:
                print(f"{pool}+{head} at {hw[0]}x{hw[1]}\n{report.table()}\n")

    print(f"{'input':<8} {'variant':<8} {'params':>14} {'millions':>9}")
    for hw, name, total in rows:
        print(f"{hw:<8} {name:<8} {total:>14,} {total / 1e6:>9.3f}")
    fc = next(t for hw, n, t in rows if n == "max+fc" and hw == "64x512")
    tel = next(t for hw, n, t in rows if n == "eap+tel" and hw == "64x512")
    print(f"fc/tel ratio at full resolution: {fc / tel:.2f}")


if __name__ == "__main__":
    main()
