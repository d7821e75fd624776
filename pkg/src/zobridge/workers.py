"""Built-in demo workers speaking the wire protocol.

Run as ``python -m zobridge.workers <demo> ...``; used by tests and docs to
exercise subprocess-backed opaque stages. Kept out of the package's import
graph so running it with ``-m`` does not re-execute an imported module.
"""

from __future__ import annotations

import argparse
import sys

import numpy as np

from .wire import serve


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(prog="zobridge.workers",
                                     description="serve a demo worker")
    sub = parser.add_subparsers(dest="demo", required=True)

    p = sub.add_parser("identity")
    p.add_argument("--n", type=int, default=2)

    p = sub.add_parser("affine")
    p.add_argument("--rows", type=int, required=True)
    p.add_argument("--cols", type=int, required=True)
    p.add_argument("--values", required=True,
                   help="row-major matrix entries, comma separated")
    p.add_argument("--bias", default="")

    p = sub.add_parser("scale", help="y = x * p elementwise; p arrives as params")
    p.add_argument("--n", type=int, default=2)

    p = sub.add_parser("flaky", help="identity that errors when x[0] < 0")
    p.add_argument("--n", type=int, default=2)

    args = parser.parse_args(argv)

    if args.demo == "identity":
        serve(lambda x: x, args.n, args.n)
    elif args.demo == "affine":
        flat = np.asarray([float(v) for v in args.values.split(",")])
        a = flat.reshape(args.rows, args.cols)
        b = (np.asarray([float(v) for v in args.bias.split(",")])
             if args.bias else np.zeros(args.rows))
        serve(lambda x: a @ x + b, args.cols, args.rows)
    elif args.demo == "scale":
        serve(lambda x, p: x * p, args.n, args.n, n_params=args.n)
    elif args.demo == "flaky":
        def flaky(x):
            if x[0] < 0:
                raise ValueError("cannot evaluate negative leading input")
            return x
        serve(flaky, args.n, args.n)
    return 0


if __name__ == "__main__":
    sys.exit(main())
