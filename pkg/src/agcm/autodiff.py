"""Reverse-mode differentiation kernel.

A small tape-based engine providing exactly the operators the model
composes: dense float64 tensors, a recording graph, and per-operator
backward rules verified against central finite differences (see
gradcheck_all / the `agcm gradcheck` subcommand).

Scope is deliberately narrow: no GPU, no graph fusion, broadcasting only
where the shape rules below allow it, double precision everywhere (the
finite-difference acceptance checks are unreliable at single precision).
"""

import numpy as np

from . import kernels

LOG_EPS = 1e-7          # clamp for log-domain losses; probabilities in [eps, 1-eps]
LEAKY_SLOPE = 0.01      # negative slope of the leaky rectifier
LN_EPS = 1e-5


class ShapeError(ValueError):
    """Operator received non-conforming shapes."""


def _fail(op, *shapes):
    raise ShapeError(f"{op}: incompatible shapes {' vs '.join(str(tuple(s)) for s in shapes)}")


class DTensor:
    """Dense n-dimensional float64 array, optionally tracked for gradients."""

    __slots__ = ("values", "requires_grad", "grad")

    def __init__(self, values, requires_grad=False):
        v = np.asarray(values, dtype=np.float64)  # asarray keeps 0-d scalars 0-d
        if not v.flags["C_CONTIGUOUS"]:
            v = np.ascontiguousarray(v)
        self.values = v
        self.requires_grad = bool(requires_grad)
        self.grad = None

    @property
    def shape(self):
        return self.values.shape

    @property
    def ndim(self):
        return self.values.ndim

    @property
    def size(self):
        return self.values.size

    def item(self):
        return float(self.values.reshape(()))

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"DTensor(shape={self.values.shape}, requires_grad={self.requires_grad})"


def tensor(values, requires_grad=False):
    return DTensor(values, requires_grad=requires_grad)


# ---------------------------------------------------------------------------
# graph

class Node:
    __slots__ = ("out", "bwd")

    def __init__(self, out, bwd):
        self.out = out
        self.bwd = bwd


_GRAPH_STACK = []


class Graph:
    """Recording tape.  Ops executed inside `with Graph() as g:` append nodes
    in execution order, which is a topological order; backward() replays them
    reversed, visiting each node exactly once."""

    def __init__(self):
        self.nodes = []
        self._leaves = set()

    def __enter__(self):
        _GRAPH_STACK.append(self)
        return self

    def __exit__(self, *exc):
        _GRAPH_STACK.pop()
        return False

    def backward(self, loss):
        """Populate grad on every requires_grad leaf with d(loss)/d(leaf).

        Gradients accumulate, so leaves must enter the forward pass with
        grad cleared (zero_grad); the training loop owns that contract.
        """
        if loss.values.size != 1:
            raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
        loss.grad = np.ones_like(loss.values)
        for node in reversed(self.nodes):
            g = node.out.grad
            if g is not None:
                node.bwd(g)
        for leaf in self._leaves:
            if leaf.grad is None:
                leaf.grad = np.zeros_like(leaf.values)


def _active():
    return _GRAPH_STACK[-1] if _GRAPH_STACK else None


def _record(graph, inputs, out, bwd):
    graph.nodes.append(Node(out, bwd))
    produced = graph._leaves
    for t in inputs:
        if t.requires_grad and t.grad is None:
            produced.add(t)


def _accum(t, g):
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float64)
    else:
        t.grad = t.grad + g


def _unbroadcast(g, shape):
    """Reduce a broadcast gradient back to `shape`."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# operators

def matmul(a, b):
    """Matrix product along the last two axes.

    Allowed: (n,k)@(k,m); (...,n,k)@(k,m); (...,n,k)@(...,k,m) with equal
    leading dims.  No other broadcasting.
    """
    av, bv = a.values, b.values
    if av.ndim < 2 or bv.ndim < 2 or av.shape[-1] != bv.shape[-2]:
        _fail("matmul", av.shape, bv.shape)
    if bv.ndim > 2 and av.shape[:-2] != bv.shape[:-2]:
        _fail("matmul", av.shape, bv.shape)
    out = DTensor(np.matmul(av, bv))
    g = _active()
    if g is not None:
        def bwd(gout):
            _accum(a, np.matmul(gout, bv.swapaxes(-1, -2)))
            if bv.ndim == 2 and av.ndim > 2:
                k = av.shape[-1]
                m = gout.shape[-1]
                _accum(b, av.reshape(-1, k).T @ gout.reshape(-1, m))
            else:
                _accum(b, np.matmul(av.swapaxes(-1, -2), gout))
        _record(g, (a, b), out, bwd)
    return out


def _elementwise_pair(op, a, b, fwd, da, db):
    av, bv = a.values, b.values
    try:
        ov = fwd(av, bv)
    except ValueError:
        _fail(op, av.shape, bv.shape)
    out = DTensor(ov)
    g = _active()
    if g is not None:
        def bwd(gout):
            _accum(a, _unbroadcast(da(gout, av, bv), av.shape))
            _accum(b, _unbroadcast(db(gout, av, bv), bv.shape))
        _record(g, (a, b), out, bwd)
    return out


def add(a, b):
    return _elementwise_pair("add", a, b, np.add,
                             lambda g, x, y: g, lambda g, x, y: g)


def sub(a, b):
    return _elementwise_pair("sub", a, b, np.subtract,
                             lambda g, x, y: g, lambda g, x, y: -g)


def mul(a, b):
    return _elementwise_pair("mul", a, b, np.multiply,
                             lambda g, x, y: g * y, lambda g, x, y: g * x)


def scale(a, s):
    """Multiply by a python scalar constant."""
    s = float(s)
    out = DTensor(a.values * s)
    g = _active()
    if g is not None:
        def bwd(gout):
            _accum(a, gout * s)
        _record(g, (a,), out, bwd)
    return out


def sigmoid(a):
    av = a.values
    z = np.exp(-np.abs(av))  # overflow-free: exponent argument is always <= 0
    y = np.where(av >= 0, 1.0 / (1.0 + z), z / (1.0 + z))
    out = DTensor(y)
    g = _active()
    if g is not None:
        def bwd(gout):
            _accum(a, gout * y * (1.0 - y))
        _record(g, (a,), out, bwd)
    return out


def leaky_relu(a, slope=LEAKY_SLOPE):
    out = DTensor(kernels.leaky_relu_fwd(a.values, slope))
    g = _active()
    if g is not None:
        def bwd(gout):
            _accum(a, kernels.leaky_relu_bwd(a.values, gout, slope))
        _record(g, (a,), out, bwd)
    return out


def softmax(a):
    """Softmax over the last axis."""
    av = a.values
    y2 = kernels.softmax_fwd(av.reshape(-1, av.shape[-1]))
    out = DTensor(y2.reshape(av.shape))
    g = _active()
    if g is not None:
        def bwd(gout):
            gx = kernels.softmax_bwd(y2, gout.reshape(y2.shape))
            _accum(a, gx.reshape(av.shape))
        _record(g, (a,), out, bwd)
    return out


def layer_norm(a, gamma, beta, eps=LN_EPS):
    """Normalize over the last axis, then scale and shift."""
    av = a.values
    d = av.shape[-1]
    if gamma.values.shape != (d,) or beta.values.shape != (d,):
        _fail("layer_norm", av.shape, gamma.values.shape)
    x2 = av.reshape(-1, d)
    y2, xhat, rstd = kernels.layernorm_fwd(x2, gamma.values, beta.values, eps)
    out = DTensor(y2.reshape(av.shape))
    g = _active()
    if g is not None:
        def bwd(gout):
            gx, ggamma, gbeta = kernels.layernorm_bwd(xhat, rstd, gamma.values,
                                                      gout.reshape(x2.shape))
            _accum(a, gx.reshape(av.shape))
            _accum(gamma, ggamma)
            _accum(beta, gbeta)
        _record(g, (a, gamma, beta), out, bwd)
    return out


def dropout(a, rate, train, rng):
    """Inverted dropout: train-mode keeps are scaled by 1/(1-rate) so the
    eval path is the exact identity."""
    if not train or rate <= 0.0:
        return a
    keep = (rng.random(a.values.shape) >= rate) / (1.0 - rate)
    out = DTensor(a.values * keep)
    g = _active()
    if g is not None:
        def bwd(gout):
            _accum(a, gout * keep)
        _record(g, (a,), out, bwd)
    return out


def concat(tensors, axis=-1):
    vals = [t.values for t in tensors]
    try:
        joined = np.concatenate(vals, axis=axis)
    except ValueError:
        _fail("concat", *[v.shape for v in vals])
    out = DTensor(joined)
    g = _active()
    if g is not None:
        ax = axis % vals[0].ndim
        sizes = [v.shape[ax] for v in vals]
        offsets = np.cumsum(sizes)[:-1]

        def bwd(gout):
            for t, piece in zip(tensors, np.split(gout, offsets, axis=ax)):
                _accum(t, piece)
        _record(g, tuple(tensors), out, bwd)
    return out


def reshape(a, shape):
    out = DTensor(a.values.reshape(shape))
    g = _active()
    if g is not None:
        def bwd(gout):
            _accum(a, gout.reshape(a.values.shape))
        _record(g, (a,), out, bwd)
    return out


def transpose(a, axes):
    out = DTensor(a.values.transpose(axes))
    g = _active()
    if g is not None:
        inv = np.argsort(axes)

        def bwd(gout):
            _accum(a, gout.transpose(inv))
        _record(g, (a,), out, bwd)
    return out


def broadcast_to(a, shape):
    out = DTensor(np.broadcast_to(a.values, shape))
    g = _active()
    if g is not None:
        def bwd(gout):
            _accum(a, _unbroadcast(gout, a.values.shape))
        _record(g, (a,), out, bwd)
    return out


def tensor_sum(a, axis=None, keepdims=False):
    out = DTensor(a.values.sum(axis=axis, keepdims=keepdims))
    g = _active()
    if g is not None:
        def bwd(gout):
            _accum(a, _spread(gout, a.values.shape, axis, keepdims))
        _record(g, (a,), out, bwd)
    return out


def tensor_mean(a, axis=None, keepdims=False):
    """Mean reduction; with an axis argument this is the sequence-mean operator."""
    out = DTensor(a.values.mean(axis=axis, keepdims=keepdims))
    n = a.values.size if axis is None else a.values.shape[axis]
    g = _active()
    if g is not None:
        def bwd(gout):
            _accum(a, _spread(gout, a.values.shape, axis, keepdims) / n)
        _record(g, (a,), out, bwd)
    return out


def _spread(g, shape, axis, keepdims):
    if axis is None:
        return np.broadcast_to(g, shape)
    if not keepdims:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, shape)


def window_mean(a, grid_hw, win):
    """Spatially smooth attention scores: rows of a (B, H*W) array are
    mean-filtered on the H x W grid with a win x win window."""
    h, w = grid_hw
    av = a.values
    if av.ndim != 2 or av.shape[1] != h * w:
        _fail("window_mean", av.shape, (h, w))
    out = DTensor(kernels.window_mean_fwd(av, h, w, win))
    g = _active()
    if g is not None:
        def bwd(gout):
            _accum(a, kernels.window_mean_bwd(gout, h, w, win))
        _record(g, (a,), out, bwd)
    return out


def cosine_sim(a, b):
    """Cosine similarity over the last axis; zero-norm operands yield 0."""
    av, bv = a.values, b.values
    if av.shape != bv.shape:
        _fail("cosine_sim", av.shape, bv.shape)
    na = np.sqrt((av * av).sum(axis=-1))
    nb = np.sqrt((bv * bv).sum(axis=-1))
    dot = (av * bv).sum(axis=-1)
    denom = na * nb
    ok = denom > 1e-300
    safe = np.where(ok, denom, 1.0)
    sim = np.where(ok, dot / safe, 0.0)
    out = DTensor(sim)
    g = _active()
    if g is not None:
        def bwd(gout):
            gs = np.where(ok, gout, 0.0)[..., None]
            sim_e = sim[..., None]
            na_e = np.where(na > 1e-300, na, 1.0)[..., None]
            nb_e = np.where(nb > 1e-300, nb, 1.0)[..., None]
            _accum(a, gs * (bv / (na_e * nb_e) - sim_e * av / (na_e * na_e)))
            _accum(b, gs * (av / (na_e * nb_e) - sim_e * bv / (nb_e * nb_e)))
        _record(g, (a, b), out, bwd)
    return out


def cross_entropy(logits, labels):
    """Mean over rows of -log softmax(logits)[label]; labels are int indices."""
    lv = logits.values
    lab = np.asarray(labels, dtype=np.int64)
    if lv.ndim != 2 or lab.shape != (lv.shape[0],):
        _fail("cross_entropy", lv.shape, lab.shape)
    m = lv.max(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(lv - m).sum(axis=1))
    rows = np.arange(lv.shape[0])
    out = DTensor((lse - lv[rows, lab]).mean())
    g = _active()
    if g is not None:
        def bwd(gout):
            p = np.exp(lv - lse[:, None])
            p[rows, lab] -= 1.0
            _accum(logits, gout * p / lv.shape[0])
        _record(g, (logits,), out, bwd)
    return out


def bce(probs, targets):
    """Elementwise binary cross-entropy with soft targets.

    Probabilities are clamped to [LOG_EPS, 1-LOG_EPS] to keep the logs
    finite; reduce with tensor_mean / tensor_sum as needed.
    """
    pv = probs.values
    tv = targets.values if isinstance(targets, DTensor) else np.asarray(targets, dtype=np.float64)
    if pv.shape != tv.shape:
        _fail("bce", pv.shape, tv.shape)
    out = DTensor(kernels.bce_fwd(pv, tv, LOG_EPS))
    g = _active()
    if g is not None:
        def bwd(gout):
            _accum(probs, kernels.bce_bwd(pv, tv, gout, LOG_EPS))
        _record(g, (probs,), out, bwd)
    return out


# ---------------------------------------------------------------------------
# parameters

class ParamStore:
    """Ordered name -> parameter registry.

    Model components allocate their tensors here under dotted prefixes;
    the ordering (= allocation order) is what checkpoints serialize.
    """

    def __init__(self):
        self._store = {}

    def add(self, name, t):
        if name in self._store:
            raise ValueError(f"duplicate parameter name {name!r}")
        t.requires_grad = True
        self._store[name] = t
        return t

    def __getitem__(self, name):
        return self._store[name]

    def __contains__(self, name):
        return name in self._store

    def names(self):
        return list(self._store)

    def items(self):
        return self._store.items()

    def tensors(self):
        return list(self._store.values())

    def zero_grad(self):
        for t in self._store.values():
            t.grad = None

    def n_scalars(self):
        return sum(t.size for t in self._store.values())


# ---------------------------------------------------------------------------
# seeded initialization

SCHEMES = ("uniform-scaled", "zeros", "ones")


class Initializer:
    """Deterministic parameter factory.

    Draws come from a Philox stream (a named 64-bit counter-based PRNG), so
    (seed, call ordinal) fully determines every tensor bit-for-bit across
    processes and platforms.
    """

    def __init__(self, seed):
        self.seed = int(seed)
        self.rng = np.random.Generator(np.random.Philox(key=self.seed))

    def draw(self, shape, scheme="uniform-scaled"):
        shape = tuple(int(s) for s in shape)
        if scheme == "zeros":
            return DTensor(np.zeros(shape), requires_grad=True)
        if scheme == "ones":
            return DTensor(np.ones(shape), requires_grad=True)
        if scheme == "uniform-scaled":
            if len(shape) >= 2:
                fan_in = int(np.prod(shape[:-1]))
                fan_out = int(shape[-1])
                bound = np.sqrt(6.0 / (fan_in + fan_out))
            else:
                bound = 1.0 / np.sqrt(max(shape[0], 1))
            vals = self.rng.uniform(-bound, bound, size=shape)
            return DTensor(vals, requires_grad=True)
        raise ValueError(f"unknown init scheme {scheme!r}; expected one of {SCHEMES}")


def seeded_init(shape, scheme, seed):
    """One-shot draw: first tensor of a fresh seed-keyed stream."""
    return Initializer(seed).draw(shape, scheme)


# ---------------------------------------------------------------------------
# finite-difference verification

def numeric_gradient(f, x, h=1e-5):
    """Central-difference gradient of scalar f with respect to ndarray x."""
    g = np.zeros_like(x)
    flat = x.ravel()
    gflat = g.ravel()
    for i in range(flat.size):
        keep = flat[i]
        flat[i] = keep + h
        fp = f()
        flat[i] = keep - h
        fm = f()
        flat[i] = keep
        gflat[i] = (fp - fm) / (2.0 * h)
    return g


def check_case(build, rng, h=1e-5, atol=1e-6, rtol=1e-4):
    """Run one gradient check.  `build(rng)` returns (inputs, forward) where
    forward() recomputes a scalar DTensor from the current input values.
    Returns (ok, max_err) over all differentiable inputs."""
    inputs, forward = build(rng)
    with Graph() as g:
        loss = forward()
    g.backward(loss)
    analytic = [np.array(t.grad) for t in inputs]

    max_err = 0.0
    ok = True
    for t, ana in zip(inputs, analytic):
        num = numeric_gradient(lambda: forward().item(), t.values, h=h)
        err = np.abs(ana - num)
        tol = np.maximum(atol, rtol * np.maximum(np.abs(ana), np.abs(num)))
        max_err = max(max_err, float(err.max(initial=0.0)))
        if np.any(err > tol):
            ok = False
    return ok, max_err


def _rand(rng, shape, lo=-2.0, hi=2.0, avoid_zero=0.0):
    v = rng.uniform(lo, hi, size=shape)
    if avoid_zero > 0.0:
        v = np.where(np.abs(v) < avoid_zero, avoid_zero * np.sign(v) + (v == 0) * avoid_zero, v)
    return v


def _weighted(rng, t):
    w = DTensor(rng.standard_normal(t.shape))
    return tensor_sum(mul(t, w))


def gradcheck_cases():
    """Registry of per-operator gradient-check case builders."""

    def c_matmul(rng):
        n, k, m = rng.integers(1, 5, size=3)
        a = DTensor(_rand(rng, (n, k)), requires_grad=True)
        b = DTensor(_rand(rng, (k, m)), requires_grad=True)
        return [a, b], lambda: _weighted(np.random.Generator(np.random.Philox(key=1)), matmul(a, b))

    def c_matmul_batched(rng):
        bsz, n, k, m = rng.integers(1, 4, size=4)
        a = DTensor(_rand(rng, (bsz, n, k)), requires_grad=True)
        b = DTensor(_rand(rng, (bsz, k, m)), requires_grad=True)
        return [a, b], lambda: _weighted(np.random.Generator(np.random.Philox(key=2)), matmul(a, b))

    def c_matmul_weight(rng):
        bsz, n, k, m = rng.integers(1, 4, size=4)
        a = DTensor(_rand(rng, (bsz, n, k)), requires_grad=True)
        b = DTensor(_rand(rng, (k, m)), requires_grad=True)
        return [a, b], lambda: _weighted(np.random.Generator(np.random.Philox(key=3)), matmul(a, b))

    def _pairwise(op, key):
        def c(rng):
            shape = tuple(rng.integers(1, 5, size=2))
            a = DTensor(_rand(rng, shape), requires_grad=True)
            b = DTensor(_rand(rng, shape), requires_grad=True)
            return [a, b], lambda: _weighted(np.random.Generator(np.random.Philox(key=key)), op(a, b))
        return c

    def c_add_bias(rng):
        n, d = rng.integers(2, 5, size=2)
        a = DTensor(_rand(rng, (n, d)), requires_grad=True)
        b = DTensor(_rand(rng, (d,)), requires_grad=True)
        return [a, b], lambda: _weighted(np.random.Generator(np.random.Philox(key=4)), add(a, b))

    def c_scale(rng):
        a = DTensor(_rand(rng, tuple(rng.integers(1, 5, size=2))), requires_grad=True)
        s = float(rng.uniform(-3, 3))
        return [a], lambda: _weighted(np.random.Generator(np.random.Philox(key=5)), scale(a, s))

    def c_sigmoid(rng):
        a = DTensor(_rand(rng, tuple(rng.integers(1, 5, size=2))), requires_grad=True)
        return [a], lambda: _weighted(np.random.Generator(np.random.Philox(key=6)), sigmoid(a))

    def c_leaky(rng):
        # keep inputs away from the kink at 0 so central differences are valid
        a = DTensor(_rand(rng, tuple(rng.integers(1, 5, size=2)), avoid_zero=1e-2),
                    requires_grad=True)
        return [a], lambda: _weighted(np.random.Generator(np.random.Philox(key=7)), leaky_relu(a))

    def c_softmax(rng):
        a = DTensor(_rand(rng, (int(rng.integers(1, 4)), int(rng.integers(2, 6)))),
                    requires_grad=True)
        return [a], lambda: _weighted(np.random.Generator(np.random.Philox(key=8)), softmax(a))

    def c_layer_norm(rng):
        n, d = int(rng.integers(1, 4)), int(rng.integers(2, 6))
        a = DTensor(_rand(rng, (n, d)), requires_grad=True)
        gamma = DTensor(_rand(rng, (d,), lo=0.5, hi=1.5), requires_grad=True)
        beta = DTensor(_rand(rng, (d,)), requires_grad=True)
        return [a, gamma, beta], lambda: _weighted(
            np.random.Generator(np.random.Philox(key=9)), layer_norm(a, gamma, beta))

    def c_dropout(rng):
        a = DTensor(_rand(rng, (3, 4)), requires_grad=True)
        seed = int(rng.integers(0, 2**31))

        def forward():
            drop_rng = np.random.Generator(np.random.Philox(key=seed))
            return _weighted(np.random.Generator(np.random.Philox(key=10)),
                             dropout(a, 0.3, True, drop_rng))
        return [a], forward

    def c_concat(rng):
        n = int(rng.integers(1, 4))
        a = DTensor(_rand(rng, (n, int(rng.integers(1, 4)))), requires_grad=True)
        b = DTensor(_rand(rng, (n, int(rng.integers(1, 4)))), requires_grad=True)
        return [a, b], lambda: _weighted(np.random.Generator(np.random.Philox(key=11)),
                                         concat([a, b], axis=1))

    def c_reshape(rng):
        a = DTensor(_rand(rng, (2, 6)), requires_grad=True)
        return [a], lambda: _weighted(np.random.Generator(np.random.Philox(key=12)),
                                      reshape(a, (3, 4)))

    def c_transpose(rng):
        a = DTensor(_rand(rng, (2, 3, 4)), requires_grad=True)
        return [a], lambda: _weighted(np.random.Generator(np.random.Philox(key=13)),
                                      transpose(a, (2, 0, 1)))

    def c_broadcast(rng):
        a = DTensor(_rand(rng, (1, 4)), requires_grad=True)
        return [a], lambda: _weighted(np.random.Generator(np.random.Philox(key=14)),
                                      broadcast_to(a, (3, 4)))

    def c_sum(rng):
        a = DTensor(_rand(rng, (3, 4)), requires_grad=True)
        return [a], lambda: scale(tensor_sum(a), 1.0)

    def c_sum_axis(rng):
        a = DTensor(_rand(rng, (3, 4)), requires_grad=True)
        return [a], lambda: _weighted(np.random.Generator(np.random.Philox(key=15)),
                                      tensor_sum(a, axis=0))

    def c_mean(rng):
        a = DTensor(_rand(rng, (3, 4)), requires_grad=True)
        return [a], lambda: scale(tensor_mean(a), 1.0)

    def c_mean_axis(rng):
        a = DTensor(_rand(rng, (2, 5, 3)), requires_grad=True)
        return [a], lambda: _weighted(np.random.Generator(np.random.Philox(key=16)),
                                      tensor_mean(a, axis=1))

    def c_window_mean(rng):
        h, w = int(rng.integers(2, 5)), int(rng.integers(2, 5))
        win = int(rng.integers(1, 4))
        a = DTensor(_rand(rng, (2, h * w)), requires_grad=True)
        return [a], lambda: _weighted(np.random.Generator(np.random.Philox(key=17)),
                                      window_mean(a, (h, w), win))

    def c_cosine(rng):
        n, d = int(rng.integers(1, 4)), int(rng.integers(2, 6))
        a = DTensor(_rand(rng, (n, d), lo=0.2, hi=2.0), requires_grad=True)
        b = DTensor(_rand(rng, (n, d), lo=0.2, hi=2.0), requires_grad=True)
        return [a, b], lambda: _weighted(np.random.Generator(np.random.Philox(key=18)),
                                         cosine_sim(a, b))

    def c_cross_entropy(rng):
        n, k = int(rng.integers(2, 5)), int(rng.integers(2, 5))
        a = DTensor(_rand(rng, (n, k)), requires_grad=True)
        labels = rng.integers(0, k, size=n)
        return [a], lambda: scale(cross_entropy(a, labels), 1.0)

    def c_bce(rng):
        # stay inside the clamp band so the loss is smooth where we probe
        n = int(rng.integers(2, 6))
        p = DTensor(rng.uniform(0.05, 0.95, size=(n,)), requires_grad=True)
        t = DTensor(rng.uniform(0.0, 1.0, size=(n,)))
        return [p], lambda: tensor_mean(bce(p, t))

    return {
        "matmul": c_matmul,
        "matmul_batched": c_matmul_batched,
        "matmul_weight": c_matmul_weight,
        "add": _pairwise(add, 19),
        "add_bias": c_add_bias,
        "sub": _pairwise(sub, 20),
        "mul": _pairwise(mul, 21),
        "scale": c_scale,
        "sigmoid": c_sigmoid,
        "leaky_relu": c_leaky,
        "softmax": c_softmax,
        "layer_norm": c_layer_norm,
        "dropout": c_dropout,
        "concat": c_concat,
        "reshape": c_reshape,
        "transpose": c_transpose,
        "broadcast_to": c_broadcast,
        "sum": c_sum,
        "sum_axis": c_sum_axis,
        "mean": c_mean,
        "mean_axis": c_mean_axis,
        "window_mean": c_window_mean,
        "cosine_sim": c_cosine,
        "cross_entropy": c_cross_entropy,
        "bce": c_bce,
    }


def gradcheck_all(trials=10, seed=0, h=1e-5, atol=1e-6, rtol=1e-4):
    """Gradient-check every operator at `trials` random instances each.

    Returns {op_name: (ok, max_err)} aggregated over trials.
    """
    results = {}
    for name, build in gradcheck_cases().items():
        rng = np.random.Generator(np.random.Philox(key=seed + 1000))
        ok_all = True
        worst = 0.0
        for _ in range(trials):
            ok, err = check_case(build, rng, h=h, atol=atol, rtol=rtol)
            ok_all = ok_all and ok
            worst = max(worst, err)
        results[name] = (ok_all, worst)
    return results
