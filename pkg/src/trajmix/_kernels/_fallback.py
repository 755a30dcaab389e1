"""Numpy implementation of the EM pass; used when the compiled kernel is absent."""
import numpy as np

_LOG_2PI = np.log(2.0 * np.pi)


def log_joint(y, m, mu, sigma, log_pi):
    d = y[:, None, :] - mu[None, :, :]
    ss = np.einsum("it,ikt->ik", m, d * d)
    nobs = m.sum(axis=1)[:, None]
    var = sigma * sigma
    return log_pi[None, :] - 0.5 * (nobs * (_LOG_2PI + np.log(var))[None, :] + ss / var[None, :])


def em_pass(y, m, mu, sigma, log_pi):
    a = log_joint(y, m, mu, sigma, log_pi)
    amax = a.max(axis=1, keepdims=True)
    e = np.exp(a - amax)
    tot = e.sum(axis=1, keepdims=True)
    w = e / tot
    ll = float(np.sum(amax[:, 0] + np.log(tot[:, 0])))
    return ll, w, w.T @ m, w.T @ y, w.T @ (y * y)
