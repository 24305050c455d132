"""Smoke test for the kvevict Python module.

    pip install --no-build-isolation -e crates/python
    python crates/python/python/smoke_test.py
"""

import os
import tempfile

import numpy as np

import kvevict


def reference_attention(q, k, v):
    q, k, v = map(np.asarray, (q, k, v))
    s, d = k.shape
    off = s - q.shape[0]
    z = q @ k.T / np.sqrt(d)
    z[np.arange(q.shape[0])[:, None] + off < np.arange(s)[None, :]] = -np.inf
    a = np.exp(z - z.max(axis=1, keepdims=True))
    a /= a.sum(axis=1, keepdims=True)
    return a, a @ v


def check_scores():
    inst = kvevict.AttentionInstance.random(12, 5, q_len=8, seed=3)
    a, o = reference_attention(inst.q, inst.k, inst.v)
    assert np.allclose(inst.a, a, atol=1e-12)
    assert np.allclose(inst.o, o, atol=1e-12)

    w = 3
    v = np.asarray(inst.v)
    value = ((a[w - 1 :] ** 2) * (v**2).sum(axis=1)).sum(axis=0)
    assert np.allclose(kvevict.score(inst, "value", w), value, rtol=1e-10)
    assert np.allclose(kvevict.score(inst, "attn_l1", w), np.abs(a[w - 1 :]).sum(axis=0))

    parts = kvevict.joint_parts(inst, w)
    joint = kvevict.score(inst, "joint", w)
    assert np.allclose(np.add(np.add(parts["value"], parts["key"]), parts["cross"]), joint)

    taylor = kvevict.taylor_residual(inst, 11, kind="value", window_start=w)
    assert abs(taylor[-1][2] - 1.0) < 1e-2, taylor


def check_needle():
    recall = []
    for seed in range(20):
        inst, next_query = kvevict.AttentionInstance.needle(seed=seed)
        truth = kvevict.true_eviction_errors(inst, next_query)
        last_row = kvevict.window_start_for_size(inst.q_len, 1)
        joint = kvevict.score(inst, "joint", last_row)
        recall.append(kvevict.topk_recall(truth, joint, 4))
        exact = kvevict.exact_eviction_errors(inst, window_start=1)
        assert len(exact) == inst.seq_len
    assert np.mean(recall) > 0.8, recall
    assert kvevict.topk_recall([1.0, 2.0, 3.0], [3.0, 2.0, 1.0], 3) == 1.0


def check_policy():
    cfg = kvevict.PolicyConfig(6, "key", sink_count=1, recent_window=2)
    retained, evicted = kvevict.select_retained([5.0, 1.0, 9.0, 0.5, 7.0, 2.0, 3.0, 4.0, 8.0, 6.0], cfg)
    assert retained == [0, 2, 4, 7, 8, 9] and evicted == [1, 3, 5, 6], (retained, evicted)
    assert kvevict.pool_scores([0.0, 3.0, 1.0, 0.0], 3, 1) == [3.0, 3.0, 3.0, 1.0]

    steps = kvevict.decode_workload(40, d=16, seed=1)
    preset = kvevict.PolicyConfig.preset("key", 12)
    sim = kvevict.DecodeSimulator(16, preset)
    for q, k, v in steps:
        rec = sim.step(q, k, v)
        assert rec["len_after"] <= 12
    assert len(sim) == 12 and sim.positions[:4] == [0, 1, 2, 3]

    report = kvevict.simulate_decode(steps, kvevict.PolicyConfig.preset("h2o", 64), "h2o")
    assert report["max_perturbation"] == 0.0


def check_trace():
    trace = kvevict.Trace.generate(layers=1, kv_heads=1, q_heads=2, d=4, prompt_len=6, decode_len=2, seed=5)
    with tempfile.TemporaryDirectory() as tmp:
        path = os.path.join(tmp, "t.kvt")
        trace.write(path)
        back = kvevict.Trace.read(path)
        assert back.header == trace.header
        assert back.instance(0, 1).seq_len == 6
        assert len(back.steps(0, 0)) == 8
        with open(path, "r+b") as f:
            f.write(b"XXXX")
        try:
            kvevict.Trace.read(path)
        except kvevict.DataError:
            pass
        else:
            raise AssertionError("bad magic accepted")
    try:
        kvevict.score(kvevict.AttentionInstance.random(4, 2), "key", 9)
    except kvevict.ConfigError:
        pass
    else:
        raise AssertionError("window outside the query rows accepted")


def check_recall():
    report = kvevict.oracle_recall("random", 8, 4, instances=3, ks=[8], windows=[1], reserves=[0])
    assert all(e["mean_recall"] == 1.0 for e in report["recall"])


if __name__ == "__main__":
    check_scores()
    check_needle()
    check_policy()
    check_trace()
    check_recall()
    print("smoke test ok")
