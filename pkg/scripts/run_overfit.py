"""Overfit one synthetic 64x64 scene with the default network and training recipe."""
import argparse
import time

from panmamba.data import bicubic_upsample, synthetic_triple
from panmamba.model import NetworkConfig, build_model
from panmamba.train import TrainConfig, train


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--steps", type=int, default=500)
    ap.add_argument("--size", type=int, default=64)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--log", help="write per-step CSV here")
    args = ap.parse_args()

    triple = synthetic_triple(args.size, seed=args.seed)
    base = abs(bicubic_upsample(triple.lrms, 4) - triple.gt).mean()
    print(f"bicubic L1 {base:.5f}")
    model = build_model(NetworkConfig(), seed=args.seed)
    t0 = time.perf_counter()

    def on_epoch(epoch, _m, log):
        if epoch % 25 == 0 or epoch == args.steps - 1:
            print(f"step {epoch:4d}  lr {log.step_lr[-1]:.2e}  L1 {log.step_loss[-1]:.5f}  "
                  f"{time.perf_counter() - t0:6.0f}s", flush=True)

    _, log = train(model, [triple], TrainConfig(epochs=args.steps, batch_size=1, seed=args.seed), on_epoch=on_epoch)
    print(f"final L1 {log.step_loss[-1]:.5f} in {time.perf_counter() - t0:.0f}s")
    if args.log:
        log.write_steps_csv(args.log)


if __name__ == "__main__":
    main()
