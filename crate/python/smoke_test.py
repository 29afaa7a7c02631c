"""Smoke test for the pmfnet_py extension.

Build first:  maturin develop -m crates/py/Cargo.toml --release
Then run:     python python/smoke_test.py
"""

import math
import os
import tempfile

import pmfnet_py as pm


def close(a, b, tol=1e-9):
    return all(abs(x - y) <= tol for x, y in zip(a, b))


def main():
    # Tensors and .pmft files.
    t = pm.Tensor([2, 3], [1, 2, 3, 4, 5, 6], dtype="f32")
    assert t.shape == [2, 3] and t.dtype == "f32" and len(t) == 6
    with tempfile.TemporaryDirectory() as tmp:
        path = os.path.join(tmp, "t.pmft")
        t.save(path)
        raw = open(path, "rb").read()
        assert raw[:15] == bytes.fromhex("504D46540101020200000003000000"), raw[:15].hex()
        back = pm.Tensor.load(path)
        assert back.shape == [2, 3] and back.tolist() == t.tolist()

    # Ops.
    eye = pm.Tensor([3, 3], [1, 0, 0, 0, 1, 0, 0, 0, 1])
    b = pm.Tensor([3, 2], [1, 2, 3, 4, 5, 6])
    assert pm.matmul(eye, b).tolist() == b.tolist()
    s = pm.softmax(pm.Tensor([2], [0.0, math.log(3.0)]))
    assert close(s.tolist(), [0.25, 0.75])
    assert pm.pool(pm.Tensor([3, 1, 1], [1, 5, 2]), "channel_max").tolist() == [5.0]
    ln = pm.layer_norm(pm.Tensor([1, 3], [1, 2, 3]))
    assert close(ln.tolist(), [-1.2247, 0.0, 1.2247], tol=1e-4)
    try:
        pm.matmul(pm.Tensor([2, 3], [0] * 6), pm.Tensor([4, 5], [0] * 20))
    except ValueError as e:
        assert "[2, 3]" in str(e)
    else:
        raise AssertionError("shape mismatch accepted")

    # Metrics.
    assert round(pm.f1_score(0.70, 0.93), 2) == 0.80
    m = pm.metrics([0.9, 0.7, 0.2, 0.1], [1, 1, 0, 0])
    assert all(v == 1.0 for v in m.values()), m

    # Config.
    cfg = pm.Config("tiny")
    assert cfg.get("model.frames") == "4"
    assert pm.Config.parse(cfg.to_text()).to_text() == cfg.to_text()
    try:
        cfg.set("synth.noise_std", "-1")
    except ValueError as e:
        assert "synth.noise_std" in str(e)
    else:
        raise AssertionError("negative noise accepted")

    # Pipeline on the tiny preset.
    with tempfile.TemporaryDirectory() as tmp:
        data, ck = os.path.join(tmp, "data"), os.path.join(tmp, "ck")
        pm.synth(cfg, data)
        logs = pm.train(cfg, data, ck)
        assert len(logs) == 2 and logs[0].startswith("epoch=1 loss=")
        res = pm.evaluate(ck, data, "train")
        assert sorted(res) == ["acc", "auc", "f1", "p", "r"]
        last = dict(kv.split("=") for kv in logs[-1].split()[2:])
        assert all(f"{res[k]:.6f}" == last[k] for k in res), (res, last)
        sample = os.path.join(data, "test", sorted(os.listdir(os.path.join(data, "test")))[0])
        p, alpha, att = pm.predict(ck, sample)
        assert 0.0 < p < 1.0
        assert alpha.shape == [4, 3] and att.shape == [1, 2, 4, 4]
        rows = alpha.tolist()
        assert all(abs(sum(rows[i:i + 3]) - 1) < 1e-6 for i in range(0, 12, 3))

    ok, err, n = pm.gradcheck()
    assert ok, err
    print(f"smoke test ok: gradcheck {n} params, max rel err {err:.2e}")


if __name__ == "__main__":
    main()
