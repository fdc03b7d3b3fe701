"""Central finite-difference oracle for TinyNet gradients.

ReLU and max-pool are not differentiable where a pre-activation crosses zero
or a pooling argmax changes. When a +/-h probe flips any such decision the
difference quotient is meaningless, so the coordinate is retried with a
smaller step; coordinates that still straddle a kink are reported separately.
"""
import numpy as np


def loss_of(net, x, y):
    probs, cache = net.forward(x)
    logits = net.logits(cache)
    shifted = logits - logits.max(axis=1, keepdims=True)
    logp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    return float(-logp[np.arange(len(y)), y].mean()), cache


def pattern(net, cache):
    parts = []
    for i, spec in enumerate(net.layers):
        if spec.kind == "relu":
            parts.append((cache["acts"][i] > 0).tobytes())
        elif spec.kind == "maxpool":
            parts.append(cache["aux"][i].tobytes())
    return tuple(parts)


def _probe(net, x, y, setter, h):
    setter(+h)
    lp, cp = loss_of(net, x, y)
    setter(-h)
    lm, cm = loss_of(net, x, y)
    setter(0.0)
    return (lp - lm) / (2 * h), pattern(net, cp), pattern(net, cm)


def rel_err(a, b, floor=1e-10):
    scale = max(abs(a), abs(b))
    if scale < floor:
        return 0.0
    return abs(a - b) / scale


def check(net, x, y, h=1e-4, fallback_steps=(1e-6, 1e-7)):
    """Return ``(worst_rel_err, n_checked, kinked)`` over all parameters and the input."""
    y = np.asarray(y)
    _, grads, input_grad, _ = net.backward(x, y)
    _, base_cache = loss_of(net, x, y)
    base = pattern(net, base_cache)
    worst, checked, kinked = 0.0, 0, []

    def run(label, analytic, setter):
        nonlocal worst, checked
        for step in (h, *fallback_steps):
            fd, pp, pm = _probe(net, x, y, setter, step)
            if pp == base and pm == base:
                worst = max(worst, rel_err(fd, analytic))
                checked += 1
                return
        kinked.append(label)

    for li, p in enumerate(net.params):
        if p is None:
            continue
        for key in ("W", "b"):
            arr = p[key]
            flat = arr.reshape(-1)
            g = grads[li][key].reshape(-1)
            for j in range(flat.size):
                orig = flat[j]

                def setter(d, flat=flat, j=j, orig=orig):
                    flat[j] = orig + d

                run((li, key, j), g[j], setter)
    xf = x.reshape(-1)
    gi = input_grad.reshape(-1)
    for j in range(xf.size):
        orig = xf[j]

        def setter(d, j=j, orig=orig):
            xf[j] = orig + d

        run(("input", j), gi[j], setter)
    return worst, checked, kinked
