#!/usr/bin/env python3
"""CLI wrapper: dented vs. intact sphere under a frontal and an oblique light.

All logic lives in data_metrics.dent_experiment; this writes the 2x2 contact
sheet and prints the frontal/oblique difference ratio.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent.parent))

from data_metrics import SyntheticScene, dent_experiment, oblique_light


def main() -> int:
    parser = argparse.ArgumentParser(description="Render the dent ambiguity contact sheet.")
    parser.add_argument("--out", type=Path, default=Path("dent_sheet.png"))
    parser.add_argument("--width", type=float, default=0.3, help="Dent rim angle in radians.")
    parser.add_argument("--depth", type=float, help="Pit depth below the surface (default: mirrored cap).")
    parser.add_argument("--oblique", type=float, default=80.0, help="Oblique light angle in degrees.")
    parser.add_argument("--size", type=int, default=128)
    args = parser.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")

    intact = SyntheticScene(radius=0.5)
    dented = SyntheticScene(shape="dented", radius=0.5, dent_width=args.width, dent_depth=args.depth)
    report = dent_experiment(intact, dented, (oblique_light(0.0), oblique_light(args.oblique)),
                             size=args.size, sheet=args.out)
    print(report.line())
    print(f"Wrote {args.out}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
