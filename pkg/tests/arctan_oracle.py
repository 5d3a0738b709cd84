"""Test fixture: serve the arctan map over the stdio oracle protocol.

Usage: python arctan_oracle.py [--dim N] [--err-on-flow]
"""

import argparse
import sys

import numpy as np

from gpmorse.oracle import serve_stdio


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--dim", type=int, default=1)
    ap.add_argument("--err-on-flow", action="store_true")
    args = ap.parse_args()

    def flow(tau, x):
        if args.err_on_flow:
            raise RuntimeError("refusing to propagate")
        return np.arctan(x)

    serve_stdio(flow, args.dim)


if __name__ == "__main__":
    main()
