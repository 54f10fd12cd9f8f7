"""Smoke test for the qnncert Python module.

Build and import either with maturin:

    pip install maturin && maturin develop -m crates/python/Cargo.toml

or straight from cargo:

    cargo build -p qnncert-py --release --features extension-module
    cp target/release/libqnncert.so python/qnncert.so
"""

import json
import os
import sys
import tempfile

sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

import qnncert  # noqa: E402


def main():
    points = [(32, 1), (96, 0), (160, 2)]
    net = qnncert.construct(points, eps=8)
    assert net.input_shape == [1]
    assert net.class_count == 3
    for x, label in points:
        assert net.classify([x]) == label
        r = qnncert.verify(net, [x], 7, timeout=None)
        assert r["verdict"] == "robust", r
        assert qnncert.brute_force_verify(net, [x], 7) == ("robust", None)

    # Halfway between two classes the ball crosses the decision boundary.
    r = qnncert.verify(net, [64], 40, timeout=None)
    assert r["verdict"] == "vulnerable", r
    assert abs(r["witness"][0] - 64) <= 40
    assert net.classify(r["witness"]) != r["reference_class"]
    base = qnncert.verify(net, [64], 40, timeout=None, baseline=True)
    assert base["verdict"] in ("vulnerable", "undecided")

    lo, hi = net.propagate([90], [100])
    y = net.forward([95])
    assert all(l <= v <= h for l, v, h in zip(lo, y, hi))

    again = qnncert.Network.from_json(net.to_json())
    assert again.to_json() == net.to_json()

    try:
        qnncert.construct([(10, 0), (18, 1)], eps=5)
    except qnncert.QnnCertError as e:
        assert str(e).startswith("gap_violation")
    else:
        raise AssertionError("gap violation not reported")

    with tempfile.TemporaryDirectory() as d:
        cfg = os.path.join(d, "run.toml")
        with open(cfg, "w") as f:
            f.write(
                '[data]\nsource = "two_band"\nsamples = 200\n'
                '[model]\narch = "tiny-dense"\n'
                "[train]\nbatch_size = 32\npretrain_steps = 200\npretrain_lr = 0.01\n"
                "total_steps = 300\nlearning_rate = 0.002\nlog_every = 100\n"
            )
        trained, rows = qnncert.train(cfg)
        assert rows[-1]["step"] == 500
        path = os.path.join(d, "model.json")
        trained.save(path)
        loaded = qnncert.Network.load(path)
        assert loaded.classify([10, 50]) == 0
        assert loaded.classify([250, 50]) == 1
        r = qnncert.verify(loaded, [10, 50], 4, timeout=None)
        assert r["verdict"] == "robust", r

    print(json.dumps({"smoke_test": "ok", "network": repr(net)}))


if __name__ == "__main__":
    main()
