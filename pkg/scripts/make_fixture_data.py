"""Write a synthetic collision CSV, mock Street View fixtures and a run config.

    python scripts/make_fixture_data.py /tmp/fx --seed 0 --epochs 2
"""
import argparse

from accident_hud.synthetic import fixture_workspace


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("root")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--epochs", type=int, default=2)
    p.add_argument("--hotspots", type=int, default=4)
    p.add_argument("--scattered", type=int, default=40)
    args = p.parse_args()
    cfg = fixture_workspace(args.root, seed=args.seed, epochs=args.epochs,
                            n_hotspots=args.hotspots, n_scattered=args.scattered)
    print(cfg)


if __name__ == "__main__":
    main()
