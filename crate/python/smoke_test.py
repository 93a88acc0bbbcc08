#!/usr/bin/env python3
"""Smoke test for the fusionsketch_py extension.

Build the module first, then run this script from anywhere:

    cargo build -p fusionsketch-py
    python3 python/smoke_test.py

The script stages the built cdylib into a temp directory under the import
name Python expects, so no packaging step is needed.
"""

import json
import math
import random
import shutil
import sys
import tempfile
import traceback
from pathlib import Path

REPO_ROOT = Path(__file__).resolve().parent.parent


def load_module():
    candidates = [
        REPO_ROOT / "target" / profile / "libfusionsketch_py.so"
        for profile in ("release", "debug")
    ]
    built = [p for p in candidates if p.exists()]
    if not built:
        sys.exit("build the extension first: cargo build -p fusionsketch-py")
    # Newest build wins if both profiles are present.
    src = max(built, key=lambda p: p.stat().st_mtime)
    stage = Path(tempfile.mkdtemp(prefix="fusionsketch-py-"))
    shutil.copy2(src, stage / "fusionsketch_py.so")
    sys.path.insert(0, str(stage))
    import fusionsketch_py

    return fusionsketch_py


fs = load_module()

CHECKS = []


def check(fn):
    CHECKS.append(fn)
    return fn


def rel_err(got, want):
    scale = max(1.0, max(abs(v) for v in want))
    return max(abs(g - w) for g, w in zip(got, want)) / scale


@check
def params_are_deterministic():
    a = fs.CountSketchParams(24, 8, seed=7)
    b = fs.CountSketchParams(24, 8, seed=7)
    c = fs.CountSketchParams(24, 8, seed=8)
    assert a.buckets() == b.buckets() and a.signs() == b.signs()
    assert (a.buckets(), a.signs()) != (c.buckets(), c.signs())
    assert all(0 <= h < 8 for h in a.buckets())
    assert all(s in (-1, 1) for s in a.signs())
    assert (a.input_dim, a.sketch_dim, a.seed) == (24, 8, 7)


@check
def count_sketch_matches_manual_projection():
    rng = random.Random(1)
    p = fs.CountSketchParams(24, 8, seed=3)
    x = [rng.gauss(0, 1) for _ in range(24)]
    got = fs.count_sketch(x, p)
    want = [0.0] * 8
    for i, (h, s) in enumerate(zip(p.buckets(), p.signs())):
        want[h] += s * x[i]
    assert rel_err(got, want) < 1e-12, rel_err(got, want)


@check
def tensor_sketch_matches_outer_product_sketch():
    rng = random.Random(2)
    c1, c2, d = 9, 7, 16
    p1 = fs.CountSketchParams(c1, d, seed=1)
    p2 = fs.CountSketchParams(c2, d, seed=2)
    x = [rng.gauss(0, 1) for _ in range(c1)]
    y = [rng.gauss(0, 1) for _ in range(c2)]
    got = fs.tensor_sketch([x, y], [p1, p2])

    # Sketch the outer product directly with the combined hash.
    b1, s1, b2, s2 = p1.buckets(), p1.signs(), p2.buckets(), p2.signs()
    want = [0.0] * d
    for i in range(c1):
        for j in range(c2):
            want[(b1[i] + b2[j]) % d] += s1[i] * s2[j] * x[i] * y[j]
    assert rel_err(got, want) < 1e-9, rel_err(got, want)

    # Same thing as an explicit convolution of the two count sketches.
    conv = fs.circular_convolve(fs.count_sketch(x, p1), fs.count_sketch(y, p2))
    assert rel_err(conv, want) < 1e-9, rel_err(conv, want)


@check
def generalized_layout_covers_all_subsets():
    op = fs.FusionOperator(fs.FusionSpec.generalized(4096), [1024, 1024, 1024])
    assert op.output_dim == 3 * 1024 + 4 * 4096 == 19456
    rng = random.Random(3)
    xs = [[rng.gauss(0, 1) for _ in range(1024)] for _ in range(3)]
    fused = op.fuse(xs)
    assert len(fused.values) == op.output_dim

    layout = fused.layout
    assert [seg.kind for seg in layout] == ["single"] * 3 + ["subset_sketch"] * 4
    assert [seg.indices for seg in layout] == [
        [0], [1], [2], [0, 1], [0, 2], [1, 2], [0, 1, 2],
    ]
    offset = 0
    for seg in layout:
        assert seg.offset == offset
        offset += seg.len
    assert offset == op.output_dim
    # Single segments are identity copies.
    assert fused.values[: 1024] == xs[0]

    assert fs.FusionOperator(fs.FusionSpec.concat(), [4, 5]).output_dim == 9


@check
def tensor_sketch_backward_passes_gradient_check():
    rng = random.Random(4)
    dims, d = [5, 4], 8
    ps = [fs.CountSketchParams(c, d, seed=10 + m) for m, c in enumerate(dims)]
    xs = [[rng.gauss(0, 1) for _ in range(c)] for c in dims]
    w = [rng.gauss(0, 1) for _ in range(d)]

    def loss(inputs):
        return sum(a * b for a, b in zip(w, fs.tensor_sketch(inputs, ps)))

    grads = fs.tensor_sketch_backward_all(w, xs, ps)
    step = 1e-5
    worst = 0.0
    for m, c in enumerate(dims):
        single = fs.tensor_sketch_backward(w, xs, ps, m)
        assert rel_err(single, grads[m]) < 1e-12
        for i in range(c):
            bumped = [list(x) for x in xs]
            bumped[m][i] += step
            up = loss(bumped)
            bumped[m][i] -= 2 * step
            down = loss(bumped)
            fd = (up - down) / (2 * step)
            worst = max(worst, abs(fd - grads[m][i]) / max(abs(grads[m][i]), 1e-3))
    assert worst < 1e-5, worst


@check
def fusion_backward_passes_gradient_check():
    rng = random.Random(5)
    dims = [5, 4, 3]
    op = fs.FusionOperator(fs.FusionSpec.generalized(8), dims)
    xs = [[rng.gauss(0, 1) for _ in range(c)] for c in dims]
    w = [rng.gauss(0, 1) for _ in range(op.output_dim)]

    def loss(inputs):
        return sum(a * b for a, b in zip(w, op.fuse(inputs).values))

    grads = op.backward(w, xs)
    step = 1e-5
    worst = 0.0
    for m, c in enumerate(dims):
        for i in range(c):
            bumped = [list(x) for x in xs]
            bumped[m][i] += step
            up = loss(bumped)
            bumped[m][i] -= 2 * step
            down = loss(bumped)
            fd = (up - down) / (2 * step)
            worst = max(worst, abs(fd - grads[m][i]) / max(abs(grads[m][i]), 1e-3))
    assert worst < 1e-5, worst


EXPERIMENT_CONFIG = {
    "seed": 5,
    "data": {
        "source": "synthetic",
        "spec": {
            "num_subjects": 4,
            "modalities": [
                {"dim": 5, "noise_std": 0.0, "distortion_rate": 0.0},
                {"dim": 3, "noise_std": 0.0, "distortion_rate": 0.0},
            ],
            "samples_per_subject_modality": 3,
            "latent_dim": 3,
            "seed": 1,
        },
    },
    "sets_per_subject": 8,
    "sets_per_subject_test": 8,
    "model": {"hidden_dims": [], "embedding_dim": 8, "joint_dim": 8},
    "train": {
        "epochs_stage1": 5,
        "epochs_stage2": 25,
        "batch_size": 8,
        "learning_rate_stage1": 0.05,
        "learning_rate_stage2": 0.05,
    },
    "experiment": {
        "methods": [
            {"name": "unimodal"},
            {
                "name": "generalized",
                "fusion": {"kind": "generalized_compact_bilinear", "sketch_dim": 16},
            },
        ],
        "repetitions": 1,
    },
}


@check
def experiment_learns_noiseless_data():
    cfg = json.dumps(EXPERIMENT_CONFIG)
    csv = fs.run_experiment(cfg)
    lines = csv.strip().split("\n")
    header = lines[0].split(",")
    assert header[:3] == ["method", "subset", "accuracy_mean"]
    rows = [line.split(",") for line in lines[1:]]
    assert len(rows) >= 2
    by_method = {row[0]: float(row[2]) for row in rows}
    assert all(0.0 <= acc <= 1.0 for acc in by_method.values())
    assert by_method["generalized"] >= 0.99, by_method
    # Same table regardless of worker count.
    assert fs.run_experiment(cfg, threads=2) == csv


@check
def train_is_deterministic():
    cfg = dict(EXPERIMENT_CONFIG)
    del cfg["experiment"]
    cfg["train"] = {"epochs_stage1": 1, "epochs_stage2": 2, "batch_size": 8}
    cfg["fusion"] = {"kind": "generalized_compact_bilinear", "sketch_dim": 16}
    cfg = json.dumps(cfg)
    checkpoint, metrics = fs.train(cfg)
    assert (checkpoint, metrics) == fs.train(cfg)

    parsed = json.loads(checkpoint)
    assert parsed["format_version"] == 1
    assert len(parsed["networks"]) == 2
    assert len(json.loads(metrics)) == 3  # one record per epoch


@check
def usage_errors_become_value_errors():
    try:
        fs.count_sketch([1.0, 2.0], fs.CountSketchParams(24, 8, seed=0))
    except ValueError:
        pass
    else:
        raise AssertionError("dimension mismatch not raised")

    bad = dict(EXPERIMENT_CONFIG)
    bad["sets_per_subject"] = 0
    try:
        fs.run_experiment(json.dumps(bad))
    except ValueError as e:
        assert "sets_per_subject" in str(e)
    else:
        raise AssertionError("invalid config not raised")


def main():
    failures = 0
    for fn in CHECKS:
        name = fn.__name__
        try:
            fn()
        except Exception:
            failures += 1
            print(f"FAIL: {name}")
            traceback.print_exc()
        else:
            print(f"ok: {name}")
    if failures:
        sys.exit(f"{failures} of {len(CHECKS)} checks failed")
    print(f"smoke test passed ({len(CHECKS)} checks)")


if __name__ == "__main__":
    main()
