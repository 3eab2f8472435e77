"""Smoke test for the agrgan Python extension.

Builds the extension with cargo when it is not importable, then exercises
the main types and operations on a tiny synthetic dataset.

    python3 python/smoke_test.py
"""

import os
import shutil
import subprocess
import sys
import tempfile

HERE = os.path.dirname(os.path.abspath(__file__))
ROOT = os.path.dirname(HERE)


def build_extension():
    subprocess.run(
        ["cargo", "build", "--release", "-p", "agrgan-py", "--features", "extension-module"],
        cwd=ROOT,
        check=True,
    )
    target = os.environ.get("CARGO_TARGET_DIR", os.path.join(ROOT, "target"))
    lib = os.path.join(target, "release", "libagrgan_py.so")
    if not os.path.exists(lib):
        lib = os.path.join(target, "release", "libagrgan_py.dylib")
    shutil.copyfile(lib, os.path.join(HERE, "agrgan.so"))


try:
    import agrgan
except ImportError:
    build_extension()
    sys.path.insert(0, HERE)
    import agrgan


def main():
    assert agrgan.AGE_GROUPS == 10
    assert agrgan.age_to_group(3) == 0
    assert agrgan.age_to_group(70.5) == 9
    cond = agrgan.encode_condition(4, 1)
    assert len(cond) == 12 and cond[4] == 1.0 and cond[11] == 1.0
    assert agrgan.normalize([0.0, 255.0]) == [-1.0, 1.0]
    assert agrgan.denormalize([-1.0, 1.0]) == [0.0, 255.0]

    assert agrgan.compute_eer([0.9, 0.8], [0.1, 0.2]) == 0.0
    assert abs(agrgan.compute_eer([0.5, 0.6], [0.5, 0.6]) - 0.5) < 1e-12
    roc = agrgan.roc_curve([0.9, 0.8], [0.1, 0.2])
    assert roc[0] == (0.0, 0.0) and roc[-1] == (1.0, 1.0) and (0.0, 1.0) in roc
    assert agrgan.auc([0.9, 0.8], [0.1, 0.2]) == 1.0

    data = agrgan.Dataset.synthetic(identities=5, per_identity=10, size=32, seed=3)
    assert len(data) == 50
    assert sorted(set(data.groups())) == list(range(10))
    train, held = data.split()
    assert set(held.identities()) == {4}
    images = data.images()
    assert images.shape == [50, 3, 32, 32]

    profile = agrgan.ScaleProfile.desk()
    model = agrgan.Model(profile, seed=1)
    batch = agrgan.Tensor([2, 3, 32, 32], images.tolist()[: 2 * 3 * 32 * 32])
    out = model.transform(batch, [0, 9], [0, 1])
    assert out.shape == batch.shape
    assert all(-1.0 <= v <= 1.0 for v in out.tolist())
    assert model.encode(batch).shape == [2, profile.enc_dim]

    with tempfile.TemporaryDirectory() as tmp:
        path = os.path.join(tmp, "m.agr")
        model.save(path)
        again = agrgan.Model.load(path, profile)
        assert again.to_bytes() == model.to_bytes()
        try:
            agrgan.Model.load(path, agrgan.ScaleProfile.paper())
        except ValueError as e:
            assert "`" in str(e)
        else:
            raise AssertionError("profile mismatch was accepted")
        sha = data.write(os.path.join(tmp, "ds"))
        assert len(sha) == 64
        assert len(agrgan.Dataset.read(os.path.join(tmp, "ds"))) == 50

    print("python smoke test passed")


if __name__ == "__main__":
    main()
