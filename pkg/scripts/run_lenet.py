"""Full LeNet/MNIST run: pipeline, certification, refuse domain and every attack.

    python3 scripts/run_lenet.py [--config configs/lenet.cfg] [--out-dir runs/lenet] [--skip-certify]

Each step goes through the CLI, so artifacts and config echoes land in the
output directory exactly as they would from the command line.
"""

import argparse
import sys
import time

from authnet.cli import ATTACKS, main

STEPS = ["train-clean", "invert-key", "finetune-tail", "eval", "certify-auth", "refuse-domain"]


def run(argv):
    t0 = time.perf_counter()
    code = main(argv)
    print(f"  [{time.perf_counter() - t0:7.1f}s] {' '.join(argv[:2])}", flush=True)
    if code != 0:
        sys.exit(code)


if __name__ == "__main__":
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", default="configs/lenet.cfg")
    ap.add_argument("--out-dir", default=None)
    ap.add_argument("--skip-certify", action="store_true", help="skip certify-auth and refuse-domain")
    args = ap.parse_args()
    common = ["--config", args.config] + (["--out-dir", args.out_dir] if args.out_dir else [])
    steps = STEPS[:4] if args.skip_certify else STEPS
    for step in steps:
        run([step, *common])
    for kind in ATTACKS:
        run(["attack", kind, *common])
