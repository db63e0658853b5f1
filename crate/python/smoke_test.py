"""Smoke test for the rbdm_py extension.

Build the module first, for example with
    maturin develop -m crates/python/Cargo.toml
or
    cargo build --release -p rbdm-python --features extension-module
    cp target/release/librbdm_py.so python/rbdm_py.so
"""

import math
import os
import sys
import tempfile

sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

import rbdm_py as rb


def check(cond, what):
    if not cond:
        raise SystemExit(f"FAIL: {what}")
    print(f"ok: {what}")


def main():
    s = rb.Schedule(15, 2.0, 1.0)
    betas = s.betas()
    check(len(betas) == 16 and betas[0] == 0.0 and betas[-1] == 1.0, "schedule endpoints")
    state, clean, var = s.posterior(1)
    check(state == 0.0 and clean == 1.0 and var == 0.0, "posterior at t=1 returns the clean estimate")

    grid = rb.PatchGrid(8, 8, 4, 2)
    check(len(grid.offsets()) == 9, "patch grid offsets")
    check(max(grid.coverage()) == 4, "patch grid coverage")

    h, w = 16, 16
    data = [math.sin(0.3 * i) for i in range(3 * h * w)]
    img = rb.Image(h, w, 3, data)
    check(img.shape == (h, w, 3), "image shape")
    check(rb.psnr(img, img) == 100.0 and rb.ssim(img, img) == 1.0, "metrics on identical images")

    hazy = rb.apply_asm(img, [0.9, 0.9, 0.9], 1.0, [0.0] * (h * w))
    check(hazy.data() == img.data(), "zero depth leaves the image unchanged")

    with tempfile.TemporaryDirectory() as tmp:
        n = rb.gen_dataset(2, 32, tmp, seed=3, mode="mixed")
        check(n == 2 and os.path.exists(os.path.join(tmp, "hazy", "00001.png")), "dataset generation")
        loaded = rb.Image.load(os.path.join(tmp, "clear", "00000.png"))
        check(loaded.shape == (32, 32, 3), "png load")

    ckpt = os.environ.get("RBDM_CKPT")
    if ckpt:
        model = rb.Model.load(ckpt)
        out = model.dehaze(rb.Image(40, 24, 3, [0.0] * (40 * 24 * 3)), seed=1)
        check(out.shape == (40, 24, 3), "checkpoint dehaze keeps the size")
    print("all checks passed")


if __name__ == "__main__":
    main()
