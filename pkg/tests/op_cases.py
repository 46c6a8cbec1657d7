"""Scalar-valued wrappers around every differentiable op, for central-difference checks.

Each case maps an input array to a scalar Tensor; fixed side inputs are
drawn from the same rng so every seed exercises fresh values.
"""
import numpy as np

from refvid import autodiff as ad
from refvid.autodiff import Tensor


def _w(rng, shape):
    return Tensor(rng.standard_normal(shape))


def _pos(rng, shape):
    return np.abs(rng.standard_normal(shape)) + 0.5


def op_cases(rng):
    """List of (name, f, x) with f: Tensor -> scalar Tensor."""
    n, m = int(rng.integers(2, 4)), int(rng.integers(2, 5))
    x = rng.standard_normal((n, m))
    other = _w(rng, (n, m))
    proj = _w(rng, (n, m))  # random projection so sums see distinct weights
    row = _w(rng, (m,))
    right = _w(rng, (m, 3))
    left = _w(rng, (3, n))
    den = Tensor(_pos(rng, (n, m)))

    def red(t):
        return ad.sum(ad.mul(t, proj)) if t.shape == proj.shape else ad.sum(ad.mul(t, Tensor(np.cos(np.arange(t.data.size)).reshape(t.shape))))

    cases = [
        ("add", lambda t: red(ad.add(t, other)), x),
        ("sub", lambda t: red(ad.sub(other, t)), x),
        ("mul", lambda t: red(ad.mul(t, other)), x),
        ("div_num", lambda t: red(ad.div(t, den)), x),
        ("div_den", lambda t: red(ad.div(other, t)), _pos(rng, (n, m))),
        ("neg", lambda t: red(ad.neg(t)), x),
        ("scale", lambda t: red(ad.scale(t, 1.7)), x),
        ("add_const", lambda t: red(ad.add_const(t, 0.3)), x),
        ("mul_const", lambda t: red(ad.mul_const(t, np.linspace(-1, 1, n * m).reshape(n, m))), x),
        ("square", lambda t: red(ad.square(t)), x),
        ("sqrt", lambda t: red(ad.sqrt(t)), _pos(rng, (n, m))),
        ("exp", lambda t: red(ad.exp(t)), x),
        ("tanh", lambda t: red(ad.tanh(t)), x),
        ("silu", lambda t: red(ad.silu(t)), x),
        ("gelu", lambda t: red(ad.gelu(t)), x),
        ("sum", lambda t: ad.sum(ad.square(t)), x),
        ("mean", lambda t: ad.mean(ad.square(t)), x),
        ("sum_last", lambda t: red(ad.sum_last(ad.square(t))), x),
        ("matmul_left", lambda t: red(ad.matmul(t, right)), x),
        ("matmul_right", lambda t: red(ad.matmul(left, t)), x),
        ("transpose", lambda t: red(ad.transpose(t)), x),
        ("reshape", lambda t: red(ad.reshape(t, (n * m,))), x),
        ("add_row", lambda t: red(ad.add_row(t, row)), x),
        ("add_row_bias", lambda t: red(ad.add_row(other, t)), rng.standard_normal(m)),
        ("mul_row", lambda t: red(ad.mul_row(t, row)), x),
        ("mul_row_scale", lambda t: red(ad.mul_row(other, t)), rng.standard_normal(m)),
        ("concat_rows", lambda t: red(ad.concat_rows([t, other])), x),
        ("concat_cols", lambda t: red(ad.concat_cols([other, t])), x),
        ("slice_rows", lambda t: red(ad.slice_rows(t, 1, n)), x),
        ("slice_cols", lambda t: red(ad.slice_cols(t, 0, m - 1)), x),
        ("gather_rows", lambda t: red(ad.gather_rows(t, [0, n - 1, 0, 1])), x),
        ("softmax_rows", lambda t: red(ad.softmax_rows(t)), x),
        ("softmax_rows_masked", lambda t: red(ad.softmax_rows(t, np.arange(m) != m - 1)), x),
        ("layer_norm", lambda t: red(ad.layer_norm(t)), x),
        ("layer_norm_affine", lambda t: red(ad.layer_norm(other, ad.reshape(ad.slice_rows(t, 0, 1), (m,)), ad.reshape(ad.slice_rows(t, 1, 2), (m,)))), rng.standard_normal((2, m))),
    ]
    return cases


def mlp_loss(params, x, y):
    h = ad.tanh(ad.add_row(ad.matmul(x, params["w1"]), params["b1"]))
    out = ad.add_row(ad.matmul(h, params["w2"]), params["b2"])
    return ad.mean(ad.square(ad.sub(out, y)))


def graph_ops(t):
    """Names of every op node reachable from t."""
    seen, stack, ops = set(), [t], set()
    while stack:
        n = stack.pop()
        if id(n) in seen:
            continue
        seen.add(id(n))
        if n.op != "leaf":
            ops.add(n.op)
        stack.extend(n._parents)
    return ops


def covered_ops(seed=0):
    out = set()
    for _name, f, x in op_cases(np.random.default_rng(seed)):
        out |= graph_ops(f(Tensor(x, requires_grad=True)))
    return out
