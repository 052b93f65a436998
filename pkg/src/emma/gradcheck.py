"""Central finite-difference checks for the autograd ops.

The relative error of one entry is ``|a - f| / max(|a|, |f|, floor)`` where
``a`` is the analytic gradient and ``f`` the central difference. The floor
keeps entries whose true gradient is (numerically) zero from dividing noise
by noise; it sits two orders above the truncation/round-off error of a step
of 1e-5 in 64-bit.
"""

import numpy as np

from . import tensor as T
from .errors import ContractError

STEP = 1e-5
TOLERANCE = 1e-4
FLOOR = 1e-6


def numeric_grad(loss_fn, param, step=STEP):
    """Central differences of ``loss_fn()`` with respect to ``param.data``."""
    flat = param.data.reshape(-1)
    out = np.zeros(flat.shape, dtype=np.float64)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        up = float(loss_fn().data)
        flat[i] = orig - step
        down = float(loss_fn().data)
        flat[i] = orig
        out[i] = (up - down) / (2 * step)
    return out.reshape(param.shape)


def relative_error(analytic, numeric, floor=FLOOR):
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / denom))


def check(loss_fn, params, step=STEP, floor=FLOOR):
    """Compare analytic and numeric gradients of ``loss_fn`` for each named param.

    ``params`` must be float64 leaves with ``requires_grad=True``; ``loss_fn``
    rebuilds the graph from them on every call. Returns name -> max relative error.
    """
    for name, p in params.items():
        if p.dtype != np.float64:
            raise ContractError(f"gradcheck: parameter {name} is {p.dtype}, expected float64")
        p.grad = None
    T.backward(loss_fn())
    errors = {}
    for name, p in params.items():
        analytic = p.grad if p.grad is not None else np.zeros(p.shape)
        errors[name] = relative_error(analytic, numeric_grad(loss_fn, p, step), floor)
        p.grad = None
    return errors


def max_error(errors):
    return max(errors.values()) if errors else 0.0


def _probe(out, rng):
    # random weights so that symmetric cancellations (softmax, layer_norm) cannot hide errors
    w = T.Tensor(rng.standard_normal(out.shape), dtype=np.float64)
    return T.sum(T.mul(out, w))


def _leaf(rng, *shape, low=None):
    data = rng.standard_normal(shape)
    if low is not None:
        data = np.sign(data) * (np.abs(data) + low)
    return T.Tensor(data, requires_grad=True, dtype=np.float64)


def op_cases(rng):
    """Yield ``(name, loss_fn, params)`` for every differentiable op."""
    a, b = _leaf(rng, 7, 5), _leaf(rng, 5, 3)
    yield "matmul", lambda: _probe(T.matmul(a, b), rng_fixed(1)), {"a": a, "b": b}
    a3, b3 = _leaf(rng, 2, 3, 4), _leaf(rng, 2, 4, 5)
    yield "matmul_batched", lambda: _probe(T.matmul(a3, b3), rng_fixed(2)), {"a": a3, "b": b3}
    x, w, bias = _leaf(rng, 2, 3, 4), _leaf(rng, 4, 5), _leaf(rng, 5)
    yield "linear", lambda: _probe(T.linear(x, w, bias), rng_fixed(3)), {"x": x, "w": w, "b": bias}
    xt, wt = _leaf(rng, 2, 5, 3), _leaf(rng, 5, 4)
    yield "token_mix", lambda: _probe(T.token_mix(xt, wt), rng_fixed(4)), {"x": xt, "w": wt}
    c1, c2 = _leaf(rng, 2, 3, 4), _leaf(rng, 2, 2, 4)
    yield "concat_tokens", lambda: _probe(T.concat_tokens(c1, c2), rng_fixed(5)), {"a": c1, "b": c2}
    f1, f2 = _leaf(rng, 3, 2), _leaf(rng, 3, 4)
    yield "concat_features", lambda: _probe(T.concat_features(f1, f2), rng_fixed(6)), {"a": f1, "b": f2}
    tr = _leaf(rng, 2, 3, 4)
    yield "transpose", lambda: _probe(T.transpose(tr), rng_fixed(7)), {"x": tr}
    e1, e2 = _leaf(rng, 3, 4), _leaf(rng, 3, 4)
    yield "add", lambda: _probe(T.add(e1, e2), rng_fixed(8)), {"a": e1, "b": e2}
    yield "sub", lambda: _probe(T.sub(e1, e2), rng_fixed(9)), {"a": e1, "b": e2}
    yield "mul", lambda: _probe(T.mul(e1, e2), rng_fixed(10)), {"a": e1, "b": e2}
    yield "scale", lambda: _probe(T.scale(e1, -2.5), rng_fixed(11)), {"x": e1}
    s = _leaf(rng, 1)
    yield "scale_by", lambda: _probe(T.scale_by(e1, s), rng_fixed(12)), {"x": e1, "s": s}
    yield "exp", lambda: _probe(T.exp(e1), rng_fixed(13)), {"x": e1}
    r = _leaf(rng, 4, 5, low=0.1)
    yield "relu", lambda: _probe(T.relu(r), rng_fixed(14)), {"x": r}
    xb, bb = _leaf(rng, 2, 3, 4), _leaf(rng, 3, 4)
    yield "add_bias", lambda: _probe(T.add_bias(xb, bb), rng_fixed(15)), {"x": xb, "b": bb}
    sm = _leaf(rng, 2, 3, 5)
    mask = np.array([[1, 1, 0, 1, 0]], dtype=bool)
    yield "softmax_rows", lambda: _probe(T.softmax_rows(sm, mask), rng_fixed(16)), {"x": sm}
    ln, gamma, beta = _leaf(rng, 2, 3, 6), _leaf(rng, 6), _leaf(rng, 6)
    yield "layer_norm", lambda: _probe(T.layer_norm(ln, gamma, beta), rng_fixed(17)), {"x": ln, "gamma": gamma, "beta": beta}
    nr = _leaf(rng, 3, 4)
    yield "l2_normalize", lambda: _probe(T.l2_normalize(nr), rng_fixed(18)), {"x": nr}
    mp = _leaf(rng, 2, 4, 3)
    pmask = np.array([[1, 1, 0, 1], [1, 0, 0, 0]])
    yield "mean_pool_rows", lambda: _probe(T.mean_pool_rows(mp, pmask), rng_fixed(19)), {"x": mp}
    yield "sum", lambda: T.sum(T.mul(e1, e1)), {"x": e1}
    yield "mean", lambda: T.mean(T.mul(e1, e2)), {"a": e1, "b": e2}
    table = _leaf(rng, 6, 3)
    ids = np.array([[0, 2, 2], [5, 1, 0]])
    yield "embedding", lambda: _probe(T.embedding(table, ids), rng_fixed(20)), {"table": table}
    logits = _leaf(rng, 3, 5)
    labels = np.array([0, 3, 4])
    yield "cross_entropy", lambda: T.cross_entropy(logits, labels), {"logits": logits}


def rng_fixed(k):
    return np.random.Generator(np.random.Philox(k))


def check_ops(seed=0):
    """Run every op case; returns op name -> max relative error."""
    rng = rng_fixed(seed + 1000)
    return {name: max_error(check(fn, params)) for name, fn, params in op_cases(rng)}


def pipeline_case(kind, seed=0):
    """Encoders, projection, alignment and readout composed into one loss, in float64.

    Adapter weights are perturbed away from their identity/zero init so every
    path carries gradient.
    """
    from . import adaptation as A
    from . import encoders as E
    from .pipeline import ReadoutHead, composed_loss
    from .world import WorldConfig, generate

    wc = WorldConfig(grid_h=2, grid_w=2, patch=2, m=7, vocab_size=20)
    ec = E.EncoderConfig(grid_h=2, grid_w=2, p_in=wc.p_in, m=7, d=6, d_prime=5, depth=2, vocab_size=20, embed_dim=4)
    rng = rng_fixed(seed + 2000)
    stack = E.EncoderStack.init(ec, seed, dtype=np.float64)
    adapter = A.Adapter.init(kind, ec, seed, dtype=np.float64)
    for p in adapter.params.values():
        p.data += 0.1 * rng.standard_normal(p.shape)
    head = ReadoutHead.init("visual_plus_instruction", ec, 5, seed, dtype=np.float64)
    samples = generate(wc, seed, 0, 3)
    images = np.stack([s.patches for s in samples]).astype(np.float64)
    instructions = [s.instruction for s in samples]
    answers = np.array([s.answer for s in samples])
    params = {"enc." + k: v for k, v in stack.params.items() if not k.endswith("proj") and k != "logit_scale"}
    params.update({"adapter." + k: v for k, v in adapter.params.items()})
    params.update({"head." + k: v for k, v in head.params.items()})
    for p in params.values():
        p.requires_grad = True

    def loss():
        return composed_loss(stack, adapter, head, images, instructions, answers, E.LayerTap.FINAL)

    return loss, params


def check_pipeline(seed=0):
    """Max relative error over the composed pipeline with each adapter kind."""
    errors = []
    for kind in ("linear", "cross_attention"):
        loss, params = pipeline_case(kind, seed)
        errors.append(max_error(check(loss, params)))
    return max(errors)
