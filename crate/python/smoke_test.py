#!/usr/bin/env python3
"""End-to-end smoke test of the Python bindings.

Build the extension first:
    cargo build --release -p objvid-py
then run:
    python3 python/smoke_test.py
"""
import json
import os
import shutil
import sys
import tempfile

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))


def import_bindings():
    candidates = [
        os.path.join(ROOT, "target", "release", "libobjvid_py.so"),
        os.path.join(ROOT, "target", "debug", "libobjvid_py.so"),
        os.path.join(ROOT, "target", "release", "libobjvid_py.dylib"),
        os.path.join(ROOT, "target", "debug", "libobjvid_py.dylib"),
    ]
    built = [p for p in candidates if os.path.exists(p)]
    if not built:
        sys.exit("extension not built; run: cargo build --release -p objvid-py")
    stage = tempfile.mkdtemp(prefix="objvid_py_")
    shutil.copy(built[0], os.path.join(stage, "objvid_py.so"))
    sys.path.insert(0, stage)
    import objvid_py

    return objvid_py


def main():
    m = import_bindings()
    work = tempfile.mkdtemp(prefix="objvid_smoke_")

    # Tensor container round trip.
    t = m.Tensor([2, 3], [1.0, 2.0, 3.0, 4.0, 5.0, 6.0])
    path = os.path.join(work, "t.o3vt")
    t.save(path)
    back = m.Tensor.load(path)
    assert back.shape == [2, 3]
    assert back.tolist() == t.tolist()
    assert m.psnr(t, back) == float("inf")

    # Gradient self-checks.
    checks = m.grad_check(0)
    assert len(checks) > 30
    failed = [name for (name, err, tol, ok) in checks if not ok]
    assert not failed, f"gradient checks failed: {failed}"

    # Tiny dataset with exact ground truth.
    ds = os.path.join(work, "dataset")
    summary = json.loads(
        m.make_dataset(
            ds,
            count=3,
            seed=11,
            config_json=json.dumps(
                {"height": 16, "width": 16, "frames": 2, "gt_voxel_res": 8,
                 "bg_rings": 16, "bg_sectors": 32, "max_objects": 2}
            ),
        )
    )
    assert summary["sequences"] == 3
    iou, mre, ap = m.data_self_check(ds, 0)
    assert iou == 1.0 and mre == 0.0 and ap == 1.0

    # A few training steps on a micro model, then the full tool chain.
    run_cfg = {
        "model": {
            "scene_dim": 8, "camera_dim": 16, "object_dim": 8,
            "frames": 2, "height": 16, "width": 16,
            "grid_dims": [1, 1, 1], "grid_min": [-1.0, 0.0, 1.0],
            "grid_max": [1.0, 0.8, 3.0], "voxel_res": 4,
            "voxel_extent": 0.8, "bg_rings": 8, "bg_sectors": 16,
            "bg_radius": 4.0, "obj_rings": 8, "obj_sectors": 16,
            "obj_radius": 0.3, "width_mult": 0.25,
        },
        "batch_size": 1,
        "checkpoint_every": 2,
    }
    out = os.path.join(work, "run")
    result = json.loads(
        m.train(ds, out, steps=2, seed=3, config_json=json.dumps(run_cfg))
    )
    assert result["steps"] == 2 and result["skipped"] == 0
    ckpt = result["checkpoint"]

    report = json.loads(m.evaluate(ckpt, ds, split="train"))
    for key in ["fg_iou", "sc", "msc", "sc_track", "msc_track", "mre", "frac125", "ap_3d"]:
        assert key in report, f"missing metric {key}"

    m.reconstruct(ckpt, ds, [0], os.path.join(work, "recon"))
    assert os.path.exists(os.path.join(work, "recon", "seq_000000", "recon_0.ppm"))

    presences = m.generate(ckpt, 5, 2, os.path.join(work, "samples"))
    assert len(presences) == 2

    # Metric helper on raw id buffers.
    assert m.fg_iou([1, 1, 3], [1, 0, 0], [2, 2, 0]) == 0.5

    print("smoke test passed;", len(checks), "gradient checks green")


if __name__ == "__main__":
    main()
