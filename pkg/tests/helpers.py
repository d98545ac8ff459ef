"""Shared test utilities: finite-difference gradient checking."""

import numpy as np


def flat_params(net):
    return np.concatenate([p.ravel() for p in net.params()])


def set_flat_params(net, flat):
    off = 0
    for p in net.params():
        n = p.size
        p[...] = flat[off:off + n].reshape(p.shape)
        off += n


def flat_grads(net):
    return np.concatenate([g.ravel() for g in net.grads()])


def gradcheck(net, loss_and_grad, h=1e-6):
    """Max relative error between backprop and central differences.

    loss_and_grad(net, compute_grad) returns the scalar loss; when
    compute_grad is True it must also run net.backward so grads accumulate.
    """
    net.zero_grads()
    loss_and_grad(net, True)
    analytic = flat_grads(net)
    net.zero_grads()
    theta = flat_params(net)
    numeric = np.zeros_like(analytic)
    for i in range(len(theta)):
        orig = theta[i]
        theta[i] = orig + h
        set_flat_params(net, theta)
        lp = loss_and_grad(net, False)
        theta[i] = orig - h
        set_flat_params(net, theta)
        lm = loss_and_grad(net, False)
        theta[i] = orig
        numeric[i] = (lp - lm) / (2 * h)
    set_flat_params(net, theta)
    denom = np.maximum(np.abs(analytic) + np.abs(numeric), 1e-8)
    return np.abs(analytic - numeric) / denom
