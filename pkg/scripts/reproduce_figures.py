"""
Script to regenerate the data behind the example figures

Runs the CLI pipeline on the bundled three-population game: trajectories from
the uniform start at a few noise levels, the continuation sweep, the contraction
threshold and an agent run compared against the ODE.
"""
import argparse
import os
import sys

# Add project root to path
sys.path.append(os.path.abspath(os.path.join(os.path.dirname(__file__), "..")))

from hetroute.main import main  # noqa: E402

GAME = os.path.join(os.path.dirname(__file__), "..", "games", "konishi.json")
TRAJECTORY_ETAS = ["1", "0.1", "0.02"]


def reproduce(out: str, jobs: str) -> int:
    steps = [
        ["routes", GAME, "--out", os.path.join(out, "routes")],
        *[
            ["simulate", GAME, "--eta", eta, "--t", "50", "--out", os.path.join(out, f"simulate_{eta}")]
            for eta in TRAJECTORY_ETAS
        ],
        ["sweep", GAME, "--eta-max", "1", "--eta-min", "0.005", "--points", "70", "--jobs", jobs, "--out", os.path.join(out, "sweep")],
        ["certify", GAME, "--threshold", "--jobs", jobs, "--out", os.path.join(out, "threshold")],
        ["agents", GAME, "--eta", "0.1", "--n", "2000", "--t", "10", "--compare", "--out", os.path.join(out, "agents")],
    ]
    for argv in steps:
        print(f"hetroute {' '.join(argv)}")
        code = main(argv)
        if code != 0:
            print(f"Step failed with exit code {code}")
            return code
    return 0


if __name__ == "__main__":
    parser = argparse.ArgumentParser(description=__doc__.strip().splitlines()[0])
    parser.add_argument("--out", default="out/figures")
    parser.add_argument("--jobs", default="1")
    args = parser.parse_args()
    sys.exit(reproduce(args.out, args.jobs))
