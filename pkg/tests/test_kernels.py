import numpy as np
import pytest

from tcssa import _kernels
from tcssa.numerics import RngState, softmax_rows

pytestmark = pytest.mark.skipif(_kernels.numba is None, reason="numba not installed")


def _probs(seed, n=300, k=7):
    gen = RngState(seed).generator
    p = softmax_rows(gen.normal(size=(n, k)) * 2)
    p[:20] = 1.0 / k  # exact ties
    p[20:40, :3] = p[20:40, [0]]
    return p


@pytest.mark.parametrize("top_k", [1, 2, 3, 7])
def test_topk_paths_agree(top_k):
    p = _probs(top_k)
    i1, v1 = _kernels.topk_numba(p, top_k)
    i2, v2 = _kernels.topk_numpy(p, top_k)
    assert np.array_equal(i1, i2) and np.array_equal(v1, v2)


def test_scatter_and_gather_paths_agree():
    gen = RngState(1).generator
    p = _probs(2)
    idx, w = _kernels.topk_numpy(p, 2)
    x = gen.normal(size=(p.shape[0], 5))
    item = np.sort(gen.integers(0, 3, size=p.shape[0]))
    n1, d1 = _kernels.scatter_slots_numba(x, idx, w, item, 3, 7)
    n2, d2 = _kernels.scatter_slots_numpy(x, idx, w, item, 3, 7)
    np.testing.assert_allclose(n1, n2, atol=1e-12)
    np.testing.assert_allclose(d1, d2, atol=1e-12)
    s = d1 + 1e-9
    c = n1 / s[:, :, None]
    dc = gen.normal(size=c.shape)
    np.testing.assert_allclose(
        _kernels.gather_pooling_grad_numba(x, idx, item, dc, c, s),
        _kernels.gather_pooling_grad_numpy(x, idx, item, dc, c, s),
        atol=1e-12,
    )
