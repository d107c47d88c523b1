"""Grid-search block depths at C=32 against target parameter and FLOP counts (128x128)."""
import argparse
import itertools

from panmamba.model import NetworkConfig, build_model, count_flops, count_params


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--params", type=float, default=0.1827e6)
    ap.add_argument("--flops", type=float, default=3.0088e9)
    ap.add_argument("--top", type=int, default=8)
    ap.add_argument("--allow-ablation", action="store_true", help="also consider nets without swap or cross blocks")
    args = ap.parse_args()
    rows = []
    lo = 0 if args.allow_ablation else 1
    for de, ds, dc in itertools.product(range(1, 7), range(lo, 4), range(lo, 4)):
        cfg = NetworkConfig(depth_extract=de, depth_swap=max(ds, 1), depth_cross=max(dc, 1),
                            enable_swap=ds > 0, enable_cross=dc > 0)
        p = count_params(build_model(cfg))
        f = count_flops(cfg, 128, 128)
        err = max(abs(p / args.params - 1), abs(f / args.flops - 1))
        rows.append((err, de, ds, dc, p, f))
    rows.sort()
    print("extract swap cross   params      GFLOPs   worst dev")
    for err, de, ds, dc, p, f in rows[:args.top]:
        print(f"{de:7d} {ds:4d} {dc:5d}   {p:8d}  {f / 1e9:9.4f}   {err:8.2%}")


if __name__ == "__main__":
    main()
