"""Run the three windshield scenarios and print a short summary of each.

    python scripts/simulate_windshield.py [outdir]
"""
import sys
from pathlib import Path

import yaml

from accident_hud import hud

HERE = Path(__file__).parent / "scenarios"


def main(outdir="sim_out"):
    out = Path(outdir)
    out.mkdir(parents=True, exist_ok=True)
    for path in sorted(HERE.glob("*.yaml")):
        name, cfg = hud.load_simulation(yaml.safe_load(path.read_text()))
        steps = hud.simulate(name, cfg)
        hud.write_trajectory(out / f"{path.stem}_trajectory.csv", steps)
        hud.write_plot_data(out / f"{path.stem}_plot.csv", steps)
        shown = len(hud.notifications(steps))
        xs = [s.point.x for s in steps]
        print(f"{path.stem}: {len(steps)} steps, {shown} inside the glass, "
              f"X range [{min(xs):.3f}, {max(xs):.3f}] m")


if __name__ == "__main__":
    main(*sys.argv[1:])
