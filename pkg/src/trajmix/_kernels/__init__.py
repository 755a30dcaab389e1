"""Hot EM kernels.

The compiled extension is used when importable; set ``TRAJMIX_PURE_PYTHON=1``
to force the numpy fallback. Both expose the same functions:

``em_pass(y, m, mu, sigma, log_pi) -> (loglik, W, S, R, Q)``
    ``y`` (N, T) measurements with zeros at missing cells, ``m`` (N, T) 0/1
    mask, ``mu`` (K, T) group means on the grid, ``sigma`` (K,), ``log_pi``
    (K,). Returns the mixture log-likelihood, the posterior ``W`` (N, K) and
    the per-group, per-age sums of ``W*m``, ``W*y`` and ``W*y**2``.

``log_joint(y, m, mu, sigma, log_pi) -> (N, K)``
    ``log pi_k + log f_k(Y_i)``.
"""
import os

from . import _fallback

if os.environ.get("TRAJMIX_PURE_PYTHON", "") not in ("", "0"):
    from ._fallback import em_pass, log_joint

    BACKEND = "python"
else:
    try:
        from ._em import em_pass, log_joint

        BACKEND = "cython"
    except ImportError:
        from ._fallback import em_pass, log_joint

        BACKEND = "python"

fallback = _fallback

__all__ = ["em_pass", "log_joint", "BACKEND", "fallback"]
