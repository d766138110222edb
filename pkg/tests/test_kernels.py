"""Both kernel paths (jitted and numpy) agree with each other and with references."""

import itertools

import numpy as np
import pytest
from scipy.optimize import linear_sum_assignment

from wflow import _kernels
from wflow.metrics import sq_dists


def _assignment_cost(cost, cols):
    return float(cost[np.arange(len(cols)), cols].sum())


@pytest.mark.parametrize("m", [1, 2, 5, 8, 40, 128])
def test_assignment_paths_agree_and_match_scipy(m):
    rng = np.random.default_rng(m)
    cost = sq_dists(rng.normal(size=(m, 2)), rng.normal(size=(m, 2)) + 0.5)
    loops = _kernels._assignment_loops(cost)
    vectorized = _kernels._assignment_numpy(cost)
    r, c = linear_sum_assignment(cost)
    want = float(cost[r, c].sum())
    assert _assignment_cost(cost, loops) == pytest.approx(want, rel=1e-12)
    assert _assignment_cost(cost, vectorized) == pytest.approx(want, rel=1e-12)
    if _kernels.NUMBA_ENABLED:
        jitted = _kernels._assignment_jit(cost)
        assert np.array_equal(jitted, loops)


def test_assignment_exhaustive_small():
    rng = np.random.default_rng(99)
    for m in (2, 3, 4, 5, 6):
        cost = rng.uniform(size=(m, m))
        best = min(
            sum(cost[i, p[i]] for i in range(m))
            for p in itertools.permutations(range(m)))
        got = _kernels.solve_assignment(cost)
        assert _assignment_cost(cost, got) == pytest.approx(best, rel=1e-12)


def test_assignment_handles_ties():
    cost = np.zeros((4, 4))
    cols = _kernels.solve_assignment(cost)
    assert sorted(cols) == [0, 1, 2, 3]


def test_assignment_rejects_nonsquare():
    with pytest.raises(ValueError):
        _kernels.solve_assignment(np.zeros((3, 4)))


def test_mmd_permutation_paths_agree():
    rng = np.random.default_rng(7)
    m, n = 30, 25
    joint = rng.normal(size=(m + n, 2))
    K = np.exp(-sq_dists(joint, joint))
    perms = np.stack([rng.permutation(m + n) for _ in range(20)]).astype(np.int64)
    a = _kernels._mmd2_perm_numpy(K, m, perms, np.empty(20))
    b = _kernels._mmd2_perm_loops(K, m, perms.copy(), np.empty(20))
    assert np.allclose(a, b, atol=1e-12)
    if _kernels.NUMBA_ENABLED:
        c = _kernels._mmd2_perm_jit(K, m, perms, np.empty(20))
        assert np.allclose(a, c, atol=1e-12)


def test_mmd_permutation_identity_matches_direct_ustat():
    from wflow.metrics import mmd_rbf

    rng = np.random.default_rng(8)
    a = rng.normal(size=(40, 2))
    b = rng.normal(size=(35, 2)) + 0.3
    res = mmd_rbf(a, b, bandwidth=1.0)
    joint = np.concatenate([a, b])
    K = np.exp(-sq_dists(joint, joint) / 2.0)
    identity = np.arange(len(joint), dtype=np.int64)[None, :]
    out = _kernels.mmd2_permutations(K, len(a), identity)
    assert out[0] == pytest.approx(res.value, abs=1e-12)


def test_env_flag_disables_numba(tmp_path):
    import subprocess
    import sys

    code = (
        "import os; os.environ['WFLOW_NUMBA'] = '0';"
        "from wflow import _kernels; import numpy as np;"
        "assert not _kernels.NUMBA_ENABLED;"
        "cols = _kernels.solve_assignment(np.array([[1.0, 2.0], [2.0, 1.0]]));"
        "assert list(cols) == [0, 1]"
    )
    subprocess.run([sys.executable, "-c", code], check=True)
