import numpy as np

from tfanet import numerics as nx


def numeric_grad(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central differences of scalar ``f`` w.r.t. every entry of ``x`` (mutated in place)."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        fp = f()
        x[i] = old - h
        fm = f()
        x[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g


def rel_err(a: np.ndarray, b: np.ndarray) -> float:
    """Max-norm error relative to the larger gradient magnitude."""
    scale = max(np.abs(a).max(), np.abs(b).max(), 1e-12)
    return float(np.abs(a - b).max() / scale)


def check_grads(build, inputs: list) -> float:
    """Worst relative error over all ``inputs`` for ``loss = build(*tensors)``.

    The loss is reduced against a fixed random projection so every output
    entry influences the check.
    """
    tensors = [nx.Tensor(x, requires_grad=True) for x in inputs]
    out = build(*tensors)
    proj = np.random.default_rng(123).normal(size=out.shape)
    with nx.Tape() as tape:
        out = build(*tensors)
        loss = nx.sum(nx.mul(out, proj))
    grads = tape.backward(loss)
    worst = 0.0
    for t in tensors:
        def f():
            return float((build(*tensors).data * proj).sum())
        num = numeric_grad(f, t.data)
        worst = max(worst, rel_err(grads[t], num))
    return worst


_rng = np.random.default_rng(11)
PRIMITIVES = {
    "add_broadcast": (lambda a, b: nx.add(a, b), [_rng.normal(size=(3, 4)), _rng.normal(size=(4,))]),
    "sub": (lambda a, b: nx.sub(a, b), [_rng.normal(size=(3, 4)), _rng.normal(size=(3, 1))]),
    "mul": (lambda a, b: nx.mul(a, b), [_rng.normal(size=(2, 3)), _rng.normal(size=(2, 3))]),
    "div": (lambda a, b: nx.div(a, b), [_rng.normal(size=(2, 3)), _rng.uniform(1, 2, size=(2, 3))]),
    "neg": (lambda a: nx.neg(a), [_rng.normal(size=(4,))]),
    "relu": (lambda a: nx.relu(a), [_rng.normal(size=(10,))]),
    "maximum": (lambda a: nx.maximum(a, 0.1), [_rng.normal(size=(10,))]),
    "gelu": (lambda a: nx.gelu(a), [_rng.normal(size=(3, 5))]),
    "sum_axis": (lambda a: nx.sum(a, axis=1), [_rng.normal(size=(3, 5))]),
    "mean": (lambda a: nx.mean(a, axis=0, keepdims=True), [_rng.normal(size=(3, 5))]),
    "reshape": (lambda a: nx.reshape(a, (5, 3)), [_rng.normal(size=(3, 5))]),
    "transpose": (lambda a: nx.transpose(a, (2, 0, 1)), [_rng.normal(size=(2, 3, 4))]),
    "concat": (lambda a, b: nx.concat([a, b], axis=1), [_rng.normal(size=(2, 3)), _rng.normal(size=(2, 2))]),
    "take": (lambda a: nx.take(a, (slice(None), slice(1, 3))), [_rng.normal(size=(2, 4))]),
    "matmul": (lambda a, b: nx.matmul(a, b), [_rng.normal(size=(3, 4)), _rng.normal(size=(4, 2))]),
    "matmul_batched": (lambda a, b: nx.matmul(a, b), [_rng.normal(size=(2, 3, 4)), _rng.normal(size=(4, 2))]),
    "softmax": (lambda a: nx.softmax_lastdim(a), [_rng.normal(size=(3, 4))]),
    "layer_norm": (lambda a, g, b: nx.layer_norm(a, g, b),
                   [_rng.normal(size=(3, 6)), _rng.normal(size=6), _rng.normal(size=6)]),
    "vector_norm": (lambda a: nx.vector_norm(a, 1e-12), [_rng.normal(size=(4, 3))]),
    "conv2d": (lambda x, w: nx.conv2d(x, w, stride=2, padding=1),
               [_rng.normal(size=(6, 6, 2)), _rng.normal(size=(3, 3, 2, 3))]),
    "bilinear_resize": (lambda x: nx.bilinear_resize(x, 5, 3), [_rng.normal(size=(3, 4, 2))]),
}


CRITERIA: list[str] = []


def criterion(number: int, name: str, passed: bool, detail: str) -> None:
    """Record a pass/fail line for the terminal summary, print it, then assert."""
    line = f"[{'PASS' if passed else 'FAIL'}] criterion {number}: {name} ({detail})"
    CRITERIA.append(line)
    print(line)
    assert passed, line
