"""Hyper-parameter studies (auth bits, gate stage, gamma) on an existing clean checkpoint.

    python3 scripts/sweeps.py [--config configs/lenet.cfg] [--out-dir runs/lenet] [param ...]

Needs clean.ckpt in the output directory (run ``authnet train-clean`` first).
"""

import argparse
import sys

from authnet.cli import SWEEPS, main

if __name__ == "__main__":
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("params", nargs="*", default=sorted(SWEEPS), choices=sorted(SWEEPS))
    ap.add_argument("--config", default="configs/lenet.cfg")
    ap.add_argument("--out-dir", default=None)
    args = ap.parse_args()
    common = ["--config", args.config] + (["--out-dir", args.out_dir] if args.out_dir else [])
    for p in args.params:
        code = main(["sweep", p, *common])
        if code:
            sys.exit(code)
