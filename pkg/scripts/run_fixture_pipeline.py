"""Build a fixture workspace and run cluster -> fetch -> train -> explain -> evaluate on it.

Everything is offline; the fetch step reads the mock fixtures. Prints the
path of metrics.csv at the end.
"""
import argparse
import sys
import time
from pathlib import Path

from accident_hud import cli
from accident_hud.synthetic import fixture_workspace

STEPS = ("cluster", "fetch", "train", "explain", "evaluate")


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("root", nargs="?", default="fixture_run")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--epochs", type=int, default=2)
    p.add_argument("--set", dest="overrides", action="append", default=[])
    args = p.parse_args()

    cfg = fixture_workspace(args.root, seed=args.seed, epochs=args.epochs)
    extra = [a for o in args.overrides for a in ("--set", o)]
    for step in STEPS:
        t0 = time.time()
        code = cli.main([step, "-c", str(cfg), *extra])
        print(f"{step:9s} exit={code} {time.time() - t0:6.1f}s", file=sys.stderr)
        if code:
            return code
    print(Path(args.root) / "run" / "metrics.csv")
    return 0


if __name__ == "__main__":
    sys.exit(main())
