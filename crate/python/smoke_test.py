"""Smoke test for the zipnet_py extension.

Build and run:
    cargo build --release -p zipnet-py --features extension-module
    cp target/release/libzipnet_py.so python/zipnet_py.so
    python3 python/smoke_test.py
"""

import json
import os
import sys
import tempfile

sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

import zipnet_py as z


def read_ppm(path):
    with open(path, "rb") as f:
        data = f.read()
    parts = data.split(maxsplit=4)
    assert parts[0] == b"P6"
    w, h = int(parts[1]), int(parts[2])
    pixels = parts[4]
    assert len(pixels) == w * h * 3
    return w, h, list(pixels)


def main():
    assert abs(z.iou([0, 0, 10, 10], [0, 0, 10, 10]) - 1.0) < 1e-12
    assert abs(z.iou([0, 0, 10, 10], [5, 0, 15, 10]) - 1.0 / 3.0) < 1e-12
    keep = z.nms([[0, 0, 10, 10], [1, 1, 11, 11], [50, 50, 60, 60]], [0.9, 0.8, 0.7], 0.5)
    assert keep == [0, 2], keep

    anchor = [10, 20, 50, 40]
    gt = [12, 18, 60, 44]
    back = z.decode_offset(z.encode_offset(anchor, gt), anchor)
    assert max(abs(a - b) for a, b in zip(back, gt)) < 1e-9

    report = json.loads(z.evaluate([[[0, 0, 20, 20]]], [[[0, 0, 20, 20, 1.0]]], [1, 10]))
    assert report["ar_at"]["1"] == 1.0

    with tempfile.TemporaryDirectory() as tmp:
        data = os.path.join(tmp, "data")
        assert z.gen_data(data, 3, side=64, seed=4) == 3

        cfg = json.dumps({
            "model": {"stem_width": 4, "widths": [4, 6, 8], "head_channels": 4, "res_blocks": 1},
            "train": {"min_side": 64, "max_side": 64, "pre_nms_top_n": 300, "post_nms_top_n": 50, "lr": 0.001},
            "test": {"scales": [64], "pre_nms_top_n": 300, "max_proposals": 50, "top_k": 10},
        })
        net = z.Network(cfg, ["seed=7"])
        assert net.parameter_count() > 0
        assert net.load_data(data) == 3
        losses = net.train(3)
        assert len(losses) == 3 and all(l == l for l in losses)
        assert net.iteration == 3

        manifest = json.load(open(os.path.join(data, "manifest.json")))
        w, h, px = read_ppm(os.path.join(data, manifest["images"][0]["file"]))
        props = net.propose(w, h, px)
        assert 0 < len(props) <= 10
        assert all(props[i][4] >= props[i + 1][4] for i in range(len(props) - 1))

        ckpt = os.path.join(tmp, "model.bin")
        net.save(ckpt)
        other = z.Network(cfg, ["seed=8"])
        other.load(ckpt)
        assert other.propose(w, h, px) == props

        try:
            z.Network(cfg, ["model.q=0"])
        except ValueError as e:
            assert "model.q" in str(e)
        else:
            raise AssertionError("invalid config accepted")

    print("zipnet_py smoke test passed")


if __name__ == "__main__":
    main()
