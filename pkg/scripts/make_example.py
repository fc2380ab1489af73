"""Regenerate the example scene bundled with the package."""
import argparse
from pathlib import Path

from roadpose.formats import save_frame
from roadpose.synthbench import NoiseSpec, RoadProfile, SceneSpec, VehicleSpec, generate


def example_spec():
    vehicles = (VehicleSpec(14.0, -2.0, 15.0), VehicleSpec(18.0, 2.5, -10.0), VehicleSpec(30.0, 0.5, 5.0))
    return SceneSpec(RoadProfile("pitched", 12.0, 8.0), vehicles, NoiseSpec(keypoint_sigma=1.0), seed=11,
                     scene_id="example")


if __name__ == "__main__":
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default=str(Path(__file__).resolve().parents[1] / "src/roadpose/data/example"))
    args = ap.parse_args()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    scene = generate(example_spec())
    save_frame(scene.frame, out / "frame.json")
    print("wrote", out / "frame.json")
