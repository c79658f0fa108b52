"""Pure numpy reference implementations of the hot chain kernels.

Both kernels are linear (or sesquilinear) chains of small matrices, gathered
per chain from shared tables.  The compiled module ``_kernels`` implements
the same signatures; :mod:`pttkit.kernels` picks one at import.

Gradients use the real/imaginary convention documented in
:mod:`pttkit.autodiff`.
"""

from __future__ import annotations

import numpy as np


def chain_forward(T, R, idx, iR):
    """Evaluate ``T[idx[n,S-1]] @ ... @ T[idx[n,0]] @ R[iR[n]]``.

    Parameters
    ----------
    T : (RT, m, m) complex array
        Transfer-matrix table.
    R : (RR, m, r) complex array
        Boundary table.
    idx : (N, S) int array
        Row of ``T`` used at each step of each chain.
    iR : (N,) int array
        Row of ``R`` starting each chain.

    Returns
    -------
    (N, m, r) complex array
    """
    h = R[iR]
    for s in range(idx.shape[1]):
        h = np.matmul(T[idx[:, s]], h)
    return h


def chain_backward(T, R, idx, iR, g):
    """Gradients of a real loss with respect to the tables, given ``g = dL/dh``."""
    hs = [R[iR]]
    for s in range(idx.shape[1]):
        hs.append(np.matmul(T[idx[:, s]], hs[-1]))
    gT = np.zeros_like(T)
    gR = np.zeros_like(R)
    gh = g
    for s in range(idx.shape[1] - 1, -1, -1):
        Ts = T[idx[:, s]]
        np.add.at(gT, idx[:, s], np.matmul(gh, np.conj(hs[s]).transpose(0, 2, 1)))
        gh = np.matmul(np.conj(Ts).transpose(0, 2, 1), gh)
    np.add.at(gR, iR, gh)
    return gT, gR


def _step_inputs(sites, site_idx, perm, phase, p_out, p_in, s):
    G = sites[site_idx[:, s]]  # (N, D, D, c, c)
    po, pi = p_out[:, s], p_in[:, s]
    coef = phase[po][:, :, None] * phase[pi][:, None, :]
    n = np.arange(G.shape[0])[:, None, None]
    Gp = G[n, perm[po][:, :, None], perm[pi][:, None, :]]
    return G, Gp, coef


def pauli_forward(sites, site_idx, perm, phase, p_out, p_in, Lb, iL, Rb, iR):
    """Pauli expectation values of a locally purified chain.

    For chain ``n`` the left boundary ``v = Lb[iL[n]]`` is pushed through the
    doubled transfer of every slot ``s``::

        v'[r, r'] = sum_{o,i,l,l'} c[o,i] G[o,i,l,r] v[l,l'] conj(G[po(o),pi(i),l',r'])

    where ``G = sites[site_idx[n,s]]`` and ``(po, c)`` encode the Pauli
    matrices ``P[po(o), o] = phase[o]`` on the output and input legs.  The
    result is ``sum(Rb[iR[n]] * v)``.
    """
    v = Lb[iL]
    for s in range(site_idx.shape[1]):
        G, Gp, coef = _step_inputs(sites, site_idx, perm, phase, p_out, p_in, s)
        v = np.einsum("noi,noilr,nlm,noims->nrs", coef, G, v, np.conj(Gp), optimize=True)
    return np.einsum("nrs,nrs->n", Rb[iR], v)


def pauli_backward(sites, site_idx, perm, phase, p_out, p_in, Lb, iL, Rb, iR, g):
    """Gradients with respect to ``sites``, ``Lb`` and ``Rb`` given ``g = dL/dvalue``."""
    vs = [Lb[iL]]
    steps = []
    for s in range(site_idx.shape[1]):
        G, Gp, coef = _step_inputs(sites, site_idx, perm, phase, p_out, p_in, s)
        steps.append((G, Gp, coef))
        vs.append(np.einsum("noi,noilr,nlm,noims->nrs", coef, G, vs[-1], np.conj(Gp), optimize=True))
    gsites = np.zeros_like(sites)
    gLb = np.zeros_like(Lb)
    gRb = np.zeros_like(Rb)
    np.add.at(gRb, iR, g[:, None, None] * np.conj(vs[-1]))
    gv = g[:, None, None] * np.conj(Rb[iR])
    N = site_idx.shape[0]
    for s in range(site_idx.shape[1] - 1, -1, -1):
        G, Gp, coef = steps[s]
        v = vs[s]
        cc = np.conj(coef)
        # y = c A^T v C with A = G[o,i], C = conj(G[po(o), pi(i)])
        gA = np.einsum("noi,nlm,noims,nrs->noilr", cc, np.conj(v), Gp, gv, optimize=True)
        gGp = np.einsum("noi,nlm,noilr,nrs->noims", coef, v, G, np.conj(gv), optimize=True)
        gv = np.einsum("noi,noilr,nrs,noims->nlm", cc, np.conj(G), gv, Gp, optimize=True)
        rows = site_idx[:, s]
        np.add.at(gsites, rows, gA)
        po, pi = p_out[:, s], p_in[:, s]
        D = sites.shape[1]
        n_idx = np.broadcast_to(rows[:, None, None], (N, D, D))
        o_idx = np.broadcast_to(perm[po][:, :, None], (N, D, D))
        i_idx = np.broadcast_to(perm[pi][:, None, :], (N, D, D))
        np.add.at(gsites, (n_idx, o_idx, i_idx), gGp)
    np.add.at(gLb, iL, gv)
    return gsites, gLb, gRb
