import os
import subprocess
import sys

import numpy as np
import pytest

from pseudoweight import kernels


def random_instance(rng, n_c=None, n_s=None, k=3):
    n_c = n_c or int(rng.integers(10, 300))
    n_s = n_s or int(rng.integers(10, 300))
    qc = rng.normal(size=n_c)
    qs = rng.normal(rng.uniform(-2, 2), 1, n_s)
    Xc = np.column_stack([np.ones(n_c), rng.normal(size=(n_c, k - 1))])
    Xs = np.column_stack([np.ones(n_s), rng.normal(size=(n_s, k - 1))])
    omega = rng.uniform(1, 100, n_s)
    return qc, qs, Xc, Xs, omega


@pytest.mark.parametrize("kind", kernels.KERNEL_KINDS)
def test_weight_backends_agree(kind, rng):
    for _ in range(10):
        qc, qs, _, _, omega = random_instance(rng)
        h = float(rng.uniform(0.05, 1.5))
        w_pub, fb_pub = kernels.kw_weight_sums(qc, qs, omega, kind, h)
        w_np, fb_np = kernels._kw_weights_np(qc, qs, omega, kind, h)
        assert fb_pub == fb_np
        np.testing.assert_allclose(w_pub, w_np, rtol=1e-12, atol=1e-12)


@pytest.mark.parametrize("kind", kernels.KERNEL_KINDS)
def test_jacobian_backends_agree(kind, rng):
    for _ in range(10):
        qc, qs, Xc, Xs, omega = random_instance(rng)
        h = float(rng.uniform(0.1, 1.5))
        j_pub = kernels.kw_jacobian_dense(qc, qs, Xc, Xs, omega, kind, h)
        j_np = kernels._kw_jacobian_np(qc, qs, Xc, Xs, omega, kind, h)
        np.testing.assert_allclose(j_pub, j_np, rtol=1e-10, atol=1e-10)


def test_backends_agree_with_duplicate_scores(rng):
    # duplicated and tied scores exercise the sorted-path tie handling
    qc = np.repeat(rng.normal(size=20), 3)
    qs = np.concatenate([qc[::4] + 0.01, np.array([40.0, -40.0])])
    omega = rng.uniform(1, 10, qs.size)
    for kind in kernels.KERNEL_KINDS:
        w_pub, fb_pub = kernels.kw_weight_sums(qc, qs, omega, kind, 0.2)
        w_np, fb_np = kernels._kw_weights_np(qc, qs, omega, kind, 0.2)
        assert fb_pub == fb_np
        np.testing.assert_allclose(w_pub, w_np, rtol=1e-12, atol=1e-12)


def test_env_flag_selects_numpy_backend():
    env = dict(os.environ, PSEUDOWEIGHT_BACKEND="numpy")
    out = subprocess.run(
        [sys.executable, "-c",
         "from pseudoweight.kernels import active_backend; print(active_backend())"],
        env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "numpy"


def test_env_flag_rejects_unknown_backend():
    env = dict(os.environ, PSEUDOWEIGHT_BACKEND="cuda")
    out = subprocess.run(
        [sys.executable, "-c", "import pseudoweight.kernels"],
        env=env, capture_output=True, text=True)
    assert out.returncode != 0
    assert "PSEUDOWEIGHT_BACKEND" in out.stderr
