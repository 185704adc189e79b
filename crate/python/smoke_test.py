"""Smoke test for the `apts` extension module.

    cd crates/python && maturin develop --release
    python python/smoke_test.py
"""

import tempfile
from pathlib import Path

import numpy as np

import apts

ROOT = Path(__file__).resolve().parent.parent


def check_mlp():
    mlp = apts.Mlp([784, 32, 32, 10])
    assert mlp.param_count == 26506 and mlp.segment_count == 6
    small = apts.Mlp([4, 3, 2])
    params = small.init_params(7)
    rng = np.random.default_rng(0)
    x = rng.uniform(size=(5, 4))
    y = [0, 1, 1, 0, 1]
    loss, grad = small.loss_and_grad(params, x.ravel().tolist(), 4, y)
    h = 1e-6
    for i in range(0, len(params), 3):
        up, down = list(params), list(params)
        up[i] += h
        down[i] -= h
        fd = (small.loss(up, x.ravel().tolist(), 4, y) - small.loss(down, x.ravel().tolist(), 4, y)) / (2 * h)
        assert abs(fd - grad[i]) < 1e-6, (i, fd, grad[i])
    _, acc = small.evaluate(params, x.ravel().tolist(), 4, y)
    assert 0.0 <= acc <= 1.0
    print(f"mlp: loss {loss:.4f}, gradient matches finite differences")


def check_lsr1_and_obs():
    rng = np.random.default_rng(1)
    n = 6
    h = np.diag([3.0, -1.0, 2.0, 0.5, 4.0, -2.0])
    mem = apts.Lsr1Memory(n)
    q, _ = np.linalg.qr(rng.normal(size=(n, n)))
    for s in q.T:
        assert mem.update(s.tolist(), (h @ s).tolist())
    b = np.array(mem.to_dense(n))
    assert np.allclose(b, h, atol=1e-10)

    g = rng.normal(size=n)
    delta = 0.7
    sol = apts.solve_obs(mem, g.tolist(), delta)
    s = np.array(sol["step"])
    assert np.linalg.norm(s) <= delta * (1 + 1e-10)
    # dense reference: bisection on the secular equation
    lam, v = np.linalg.eigh(h)
    gt = v.T @ g
    lo, hi = max(0.0, -lam[0]) + 1e-12, 1e6
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if np.linalg.norm(gt / (lam + mid)) > delta:
            lo = mid
        else:
            hi = mid
    ref = -v @ (gt / (lam + hi))
    model = lambda p: g @ p + 0.5 * p @ h @ p
    assert abs(model(s) - model(ref)) < 1e-8, (model(s), model(ref))
    print(f"lsr1/obs: recovered H exactly, step kind {sol['kind']}, model {model(s):.6f}")


def check_partition_and_batches():
    parts = apts.make_partition(6, 4, 0)
    flat = sorted(i for p in parts for i in p)
    assert flat == list(range(6)) and sorted(map(len, parts)) == [1, 1, 2, 2]
    batches = apts.make_batches(5950, 2, 0.0, 0)
    assert [len(b) for b in batches] == [2975, 2975]
    assert not set(batches[0]) & set(batches[1])
    print(f"partition {parts}, batch sizes {[len(b) for b in batches]}")


def check_rosenbrock():
    x, iters, converged = apts.rosenbrock_tr([-1.2, 1.0])
    assert max(abs(x[0] - 1), abs(x[1] - 1)) < 1e-6, x
    print(f"rosenbrock: ({x[0]:.8f}, {x[1]:.8f}) after {iters} iterations, converged {converged}")


def check_experiment():
    config = """
label = "smoke"
epochs = 3
trials = 1
seed = 0

[model]
layers = [2, 8, 2]

[data]
source = "synthetic"
kind = "two_gaussians"
train_samples = 200
test_samples = 50

[optimizer]
kind = "apts"

[apts]
subdomains = 2
"""
    with tempfile.TemporaryDirectory() as tmp:
        path = Path(tmp) / "smoke.toml"
        path.write_text(config)
        rows = apts.run_experiment(str(path), out_dir=tmp)
        assert len(rows) == 4 and rows[-1]["train_loss"] < rows[0]["train_loss"]
        assert (Path(tmp) / "smoke_summary.csv").exists()
    print(f"experiment: train loss {rows[0]['train_loss']:.4f} -> {rows[-1]['train_loss']:.4f}")


if __name__ == "__main__":
    check_mlp()
    check_lsr1_and_obs()
    check_partition_and_batches()
    check_rosenbrock()
    check_experiment()
    print("all checks passed")
