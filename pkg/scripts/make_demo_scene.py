#!/usr/bin/env python3
"""Write a ready-to-run demo: cube-on-plane OBJ plus a CLI config.

    python scripts/make_demo_scene.py demo/
    sartrace simulate --config demo/run.ini
    sartrace learn --config demo/run.ini --refs demo/out/view_*.sarf --out demo/learned
"""

import argparse
import os

from sartrace.cli import SceneConfig, serialize_config
from sartrace.scene import write_obj
from sartrace.scenes import cube_plane_scene


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("directory", nargs="?", default="demo")
    args = ap.parse_args()
    os.makedirs(args.directory, exist_ok=True)

    mesh, plane_ids, cube_ids = cube_plane_scene(plane_size=8.0, cube_size=2.0)
    write_obj(mesh, os.path.join(args.directory, "scene.obj"))

    cfg = SceneConfig(
        mesh_path="scene.obj", init=(0.005, 0.01, 25.0, 0.05), init_csv=None,
        frequency=9.6e9, polarization="HH", psd="exponential",
        start=(-1.25, 4.243, 4.243), end=(1.25, 4.243, 4.243),
        num_azimuth=16, alpha_start_deg=25.0, alpha_stop_deg=65.0, num_angles=24,
        range_res=0.05, azimuth_res=0.1667, spua=2, seed=7,
        view_azimuths_deg=(0.0, 120.0, 240.0), scene_center=(0.0, 0.0, 0.0),
        lambda_sim=1.0, lambda_mat=0.0, normalize=True,
        lr=0.05, iters=150, beta1=0.9, beta2=0.99, eps_adam=1e-8, lr_decay=1.0,
        train_vertices=f"{plane_ids.size}:{mesh.num_vertices}", tie=True,
        freeze_channels=("tau",), out_dir="out")
    path = os.path.join(args.directory, "run.ini")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(serialize_config(cfg))
    print(f"wrote {path} and scene.obj ({mesh.num_facets} facets); try:")
    print(f"  sartrace simulate --config {path}")


if __name__ == "__main__":
    main()
