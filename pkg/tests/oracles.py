"""Independent reference implementations used to freeze expected values.

Everything here is written with plain Python loops and the math module so it
shares no code path with the package under test.
"""
import math


def matmul(a, b):
    n, k = len(a), len(a[0])
    m = len(b[0])
    return [[sum(a[i][p] * b[p][j] for p in range(k)) for j in range(m)] for i in range(n)]


def row_sq_dist_mean(a, b):
    total = 0.0
    for ra, rb in zip(a, b):
        total += sum((x - y) ** 2 for x, y in zip(ra, rb))
    return total / len(a)


def cos_loss(a, b, eps=1e-8):
    acc = 0.0
    for ra, rb in zip(a, b):
        dot = sum(x * y for x, y in zip(ra, rb))
        na = math.sqrt(sum(x * x for x in ra))
        nb = math.sqrt(sum(y * y for y in rb))
        acc += dot / max(na * nb, eps)
    return 1.0 - acc / len(a)


def mse_all(a, b):
    flat_a = list(_flatten(a))
    flat_b = list(_flatten(b))
    return sum((x - y) ** 2 for x, y in zip(flat_a, flat_b)) / len(flat_a)


def _flatten(x):
    if isinstance(x, (list, tuple)):
        for v in x:
            yield from _flatten(v)
    else:
        yield float(x)


def alpha_bar(betas):
    out, acc = [], 1.0
    for b in betas:
        acc *= 1.0 - b
        out.append(acc)
    return out


def linspace(lo, hi, n):
    if n == 1:
        return [lo]
    return [lo + (hi - lo) * i / (n - 1) for i in range(n)]


def adamw_scalar(p, g, lr, b1=0.9, b2=0.95, wd=0.001, eps=1e-8, m=0.0, v=0.0, step=0):
    step += 1
    m = b1 * m + (1 - b1) * g
    v = b2 * v + (1 - b2) * g * g
    mhat = m / (1 - b1 ** step)
    vhat = v / (1 - b2 ** step)
    p = p - lr * wd * p
    p = p - lr * mhat / (math.sqrt(vhat) + eps)
    return p, m, v


def warmup_cosine(step, base=1e-5, warmup=100, cycle=1000, mult=2.0, min_ratio=0.01):
    if step <= warmup:
        return base * step / warmup
    lo = base * min_ratio
    s = step - warmup
    start, length = 0, cycle
    while s >= start + length:
        start += length
        length = length * mult
    return lo + (base - lo) * (1 + math.cos(math.pi * (s - start) / length)) / 2


def binomial_interval(n, p, z=2.5758293035489004):
    """Normal-approximation two-sided interval for a binomial proportion (99% by default)."""
    half = z * math.sqrt(p * (1 - p) / n)
    return p - half, p + half


def softmax(row):
    m = max(row)
    e = [math.exp(v - m) for v in row]
    s = sum(e)
    return [v / s for v in e]
