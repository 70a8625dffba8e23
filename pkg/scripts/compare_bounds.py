"""Mean authentication radius of protected vs clean models under each bound method.

    python3 scripts/compare_bounds.py --out-dir runs/lenet [-n 5] [--methods ibp crown crown-full]

``crown-full`` back-substitutes every intermediate ReLU box and costs about a
minute per radius on LeNet, so keep ``-n`` small.
"""

import argparse
import time
from pathlib import Path

from authnet import certify as C
from authnet.cli import AUTH, CLEAN, KEY
from authnet.dataio import load_checkpoint, load_key, load_mnist

if __name__ == "__main__":
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out-dir", default="runs/lenet")
    ap.add_argument("--data-dir", default="data/mnist")
    ap.add_argument("-n", type=int, default=5)
    ap.add_argument("--methods", nargs="+", default=["ibp", "crown"], choices=sorted(C.BOUNDS))
    args = ap.parse_args()
    out = Path(args.out_dir)
    te = load_mnist(args.data_dir, "test")
    x, y = te.images[:args.n], te.labels[:args.n]
    protected, clean = load_checkpoint(out / AUTH)[0], load_checkpoint(out / CLEAN)[0]
    key = load_key(out / KEY)
    print("method      protected      clean    ratio   seconds")
    for m in args.methods:
        t0 = time.perf_counter()
        mp, _ = C.mean_auth_radius(protected, x, y, key, method=m)
        mc, _ = C.mean_auth_radius(clean, x, y, None, method=m)
        print(f"{m:10s} {mp:10.6f} {mc:10.6f} {mp / mc if mc else float('inf'):8.3f} "
              f"{time.perf_counter() - t0:9.1f}", flush=True)
