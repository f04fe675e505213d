#!/usr/bin/env python3
"""Smoke test for the certpose_py extension module.

Builds expectations against the library's contracts: registration round
trips, the robust corrector fixing perturbed keypoints, certificates
accepting the true pose and rejecting a shifted one, and the GNC centroid
rejecting outliers.

Build the extension first:

    cargo build --release -p certpose-py

then run:

    python3 python/smoke_test.py
"""

import math
import pathlib
import random
import shutil
import sys
import tempfile


def import_extension():
    root = pathlib.Path(__file__).resolve().parent.parent
    candidates = [
        root / "target" / "release" / "libcertpose_py.so",
        root / "target" / "debug" / "libcertpose_py.so",
        root / "target" / "release" / "libcertpose_py.dylib",
        root / "target" / "debug" / "libcertpose_py.dylib",
    ]
    built = next((c for c in candidates if c.exists()), None)
    if built is None:
        sys.exit(
            "certpose_py extension not found; run "
            "`cargo build --release -p certpose-py` first"
        )
    stage = pathlib.Path(tempfile.mkdtemp(prefix="certpose_py_"))
    suffix = ".so" if built.suffix == ".so" else ".so"
    shutil.copy2(built, stage / f"certpose_py{suffix}")
    sys.path.insert(0, str(stage))
    import certpose_py

    return certpose_py


def main():
    cp = import_extension()
    model = cp.CadModel.builtin("box", [0.12, 0.18, 0.24], 7)
    diameter = model.diameter
    expected = math.sqrt(0.12**2 + 0.18**2 + 0.24**2)
    assert abs(diameter - expected) < 1e-9, diameter
    assert len(model.keypoints) == 8
    assert len(model) == 2048
    print(f"model: diameter {diameter:.4f} m, {len(model.keypoints)} keypoints")

    # Registration round trip.
    pose = cp.Pose([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]], [0.1, -0.2, 1.5])
    moved = pose.transform(model.keypoints)
    recovered = cp.register(moved, model)
    err = max(
        abs(a - b)
        for ra, rb in zip(recovered.rotation, pose.rotation)
        for a, b in zip(ra, rb)
    )
    assert err < 1e-9, err
    print(f"registration round trip: max rotation error {err:.2e}")

    # A clean scene certifies at the true pose and fails a shifted pose.
    scene = cp.generate_scene(model, seed=3)
    good = cp.certify(scene, scene.true_pose, model)
    assert good.oc and good.oc3d and good.oc2d, vars(good)
    shifted = cp.Pose(
        scene.true_pose.rotation,
        [scene.true_pose.translation[0] + diameter, *scene.true_pose.translation[1:]],
    )
    bad = cp.certify(scene, shifted, model)
    assert not bad.oc, vars(bad)
    print(f"certificate: true pose oc={good.oc}, shifted pose oc={bad.oc}")

    # The robust corrector repairs heavily perturbed keypoints.
    noisy = cp.perturb_keypoints(scene.true_keypoints, 0.6, 0.8, diameter, seed=11)
    correction = cp.solve_correction(noisy, model, scene.points)
    adds = cp.adds_metric(correction.corrected_pose, scene.true_pose, model) / diameter
    assert adds < 0.05, adds
    uncorrected = cp.register(noisy, model)
    adds_plain = cp.adds_metric(uncorrected, scene.true_pose, model) / diameter
    assert adds < adds_plain
    print(
        f"corrector: normalized ADD-S {adds:.4f} (uncorrected {adds_plain:.4f}, "
        f"{correction.iterations} iterations)"
    )

    # GNC centroid rejects 30% outliers.
    rng = random.Random(5)
    center = (1.0, 1.0, 1.0)
    pts = []
    for _ in range(70):
        while True:
            v = [rng.uniform(-0.02, 0.02) for _ in range(3)]
            if sum(c * c for c in v) <= 0.02**2:
                pts.append(tuple(c + o for c, o in zip(center, v)))
                break
    for _ in range(30):
        pts.append(tuple(rng.uniform(-1.0, 1.0) for _ in range(3)))
    centroid, weights = cp.robust_centroid(pts, 0.1)
    err = math.dist(centroid, center)
    assert err < 0.02, err
    assert all(0.0 <= w <= 1.0 for w in weights)
    print(f"robust centroid: error {err:.4f} m with 30% outliers")

    # FPS picks the far endpoint of a line first.
    line = [(float(i), 0.0, 0.0) for i in range(11)]
    sel = cp.fps_indices(line, 2, seed=0)
    assert sel == [0, 10], sel
    clean_loss = cp.loss_self(scene.points, scene.true_pose, model, 0.1 * diameter)
    assert clean_loss < 1e-12, clean_loss
    print(f"fps + loss_self checks passed (clean-scene loss {clean_loss:.2e})")

    print("smoke test: all checks passed")


if __name__ == "__main__":
    main()
