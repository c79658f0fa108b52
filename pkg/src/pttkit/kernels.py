"""Kernel backend selection.

The compiled extension ``pttkit._kernels`` is used when it imports; otherwise
the numpy implementations in :mod:`pttkit._kernels_py` are used.  Setting
``PTTKIT_KERNELS=python`` forces the fallback.  ``BACKEND`` names the choice.
"""

from __future__ import annotations

import os

import numpy as np

from . import _kernels_py

_impl = _kernels_py
BACKEND = "python"
if os.environ.get("PTTKIT_KERNELS", "").lower() != "python":
    try:
        from . import _kernels as _compiled  # type: ignore[attr-defined]
    except ImportError:
        _compiled = None
    if _compiled is not None:
        _impl = _compiled
        BACKEND = "cython"


def _c(a):
    return np.ascontiguousarray(a, dtype=np.complex128)


def _i(a):
    return np.ascontiguousarray(a, dtype=np.int64)


def chain_forward(T, R, idx, iR, impl=None):
    """See :func:`pttkit._kernels_py.chain_forward`."""
    return (impl or _impl).chain_forward(_c(T), _c(R), _i(idx), _i(iR))


def chain_backward(T, R, idx, iR, g, impl=None):
    """See :func:`pttkit._kernels_py.chain_backward`."""
    return (impl or _impl).chain_backward(_c(T), _c(R), _i(idx), _i(iR), _c(g))


def pauli_forward(sites, site_idx, perm, phase, p_out, p_in, Lb, iL, Rb, iR, impl=None):
    """See :func:`pttkit._kernels_py.pauli_forward`."""
    return (impl or _impl).pauli_forward(
        _c(sites), _i(site_idx), _i(perm), _c(phase), _i(p_out), _i(p_in), _c(Lb), _i(iL), _c(Rb), _i(iR)
    )


def pauli_backward(sites, site_idx, perm, phase, p_out, p_in, Lb, iL, Rb, iR, g, impl=None):
    """See :func:`pttkit._kernels_py.pauli_backward`."""
    return (impl or _impl).pauli_backward(
        _c(sites), _i(site_idx), _i(perm), _c(phase), _i(p_out), _i(p_in), _c(Lb), _i(iL), _c(Rb), _i(iR), _c(g)
    )
