"""Shared test utilities: the finite-difference gradient oracle."""

import numpy as np

from arq import nn


def _loss_and_relu_masks(net, xb, yb):
    logits, caches = nn.run_forward(net, xb, want_cache=True)
    loss, _ = nn.softmax_cross_entropy(logits, yb)
    masks = [c[1] for c in caches if c[0] == "relu"]
    return loss, masks


def finite_diff_check(net, batches, h=1e-4, tol=1e-4):
    """Central-difference check of every parameter gradient.

    The difference quotient is only a valid derivative oracle when the +-h
    perturbation does not flip any ReLU activation mask; parameters whose
    probe crosses a kink on one batch are re-probed on the next candidate
    batch.  Returns (worst relative error, number of re-probed parameters);
    raises AssertionError if some parameter cannot be probed cleanly or
    misses the tolerance.
    """
    analytic = {}
    for bi, (xb, yb) in enumerate(batches):
        grads, _ = nn.compute_gradients(net, xb, yb)
        analytic[bi] = grads
    worst = 0.0
    retried = 0
    for li, p in enumerate(net.params):
        for key in p:
            flat = p[key].ravel()
            for i in range(flat.size):
                ok = False
                for bi, (xb, yb) in enumerate(batches):
                    _, masks0 = _loss_and_relu_masks(net, xb, yb)
                    orig = flat[i]
                    flat[i] = orig + h
                    lp, masks_p = _loss_and_relu_masks(net, xb, yb)
                    flat[i] = orig - h
                    lm, masks_m = _loss_and_relu_masks(net, xb, yb)
                    flat[i] = orig
                    clean = all(np.array_equal(a, b) and np.array_equal(a, c)
                                for a, b, c in zip(masks0, masks_p, masks_m))
                    if not clean:
                        continue
                    fd = (lp - lm) / (2 * h)
                    an = analytic[bi][li][key].ravel()[i]
                    rel = abs(fd - an) / max(abs(fd), abs(an), 1e-6)
                    worst = max(worst, rel)
                    assert rel < tol, (
                        f"layer {li} {key}[{i}]: fd={fd} analytic={an} rel={rel}")
                    if bi > 0:
                        retried += 1
                    ok = True
                    break
                assert ok, f"no kink-free probe batch for layer {li} {key}[{i}]"
    return worst, retried
