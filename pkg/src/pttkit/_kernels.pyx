# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled chain kernels; same signatures and semantics as ``_kernels_py``."""

import numpy as np
cimport numpy as cnp

ctypedef double complex cplx

cdef extern from "complex.h" nogil:
    double complex conj(double complex)


def chain_forward(cplx[:, :, ::1] T, cplx[:, :, ::1] R, long[:, ::1] idx, long[::1] iR):
    cdef Py_ssize_t N = idx.shape[0], S = idx.shape[1]
    cdef Py_ssize_t m = R.shape[1], r = R.shape[2]
    out_arr = np.empty((N, m, r), dtype=np.complex128)
    cdef cplx[:, :, ::1] out = out_arr
    cdef cplx[:, ::1] a = np.empty((m, r), dtype=np.complex128)
    cdef cplx[:, ::1] b = np.empty((m, r), dtype=np.complex128)
    cdef Py_ssize_t n, s, i, j, k, t
    cdef cplx acc
    with nogil:
        for n in range(N):
            for i in range(m):
                for j in range(r):
                    a[i, j] = R[iR[n], i, j]
            for s in range(S):
                t = idx[n, s]
                for i in range(m):
                    for j in range(r):
                        acc = 0
                        for k in range(m):
                            acc = acc + T[t, i, k] * a[k, j]
                        b[i, j] = acc
                for i in range(m):
                    for j in range(r):
                        a[i, j] = b[i, j]
            for i in range(m):
                for j in range(r):
                    out[n, i, j] = a[i, j]
    return out_arr


def chain_backward(cplx[:, :, ::1] T, cplx[:, :, ::1] R, long[:, ::1] idx, long[::1] iR,
                   cplx[:, :, ::1] g):
    cdef Py_ssize_t N = idx.shape[0], S = idx.shape[1]
    cdef Py_ssize_t m = R.shape[1], r = R.shape[2]
    gT_arr = np.zeros((T.shape[0], T.shape[1], T.shape[2]), dtype=np.complex128)
    gR_arr = np.zeros((R.shape[0], R.shape[1], R.shape[2]), dtype=np.complex128)
    cdef cplx[:, :, ::1] gT = gT_arr
    cdef cplx[:, :, ::1] gR = gR_arr
    cdef cplx[:, :, ::1] hs = np.empty((S + 1, m, r), dtype=np.complex128)
    cdef cplx[:, ::1] gh = np.empty((m, r), dtype=np.complex128)
    cdef cplx[:, ::1] tmp = np.empty((m, r), dtype=np.complex128)
    cdef Py_ssize_t n, s, i, j, k, t
    cdef cplx acc
    with nogil:
        for n in range(N):
            for i in range(m):
                for j in range(r):
                    hs[0, i, j] = R[iR[n], i, j]
            for s in range(S):
                t = idx[n, s]
                for i in range(m):
                    for j in range(r):
                        acc = 0
                        for k in range(m):
                            acc = acc + T[t, i, k] * hs[s, k, j]
                        hs[s + 1, i, j] = acc
            for i in range(m):
                for j in range(r):
                    gh[i, j] = g[n, i, j]
            for s in range(S - 1, -1, -1):
                t = idx[n, s]
                for i in range(m):
                    for k in range(m):
                        acc = 0
                        for j in range(r):
                            acc = acc + gh[i, j] * conj(hs[s, k, j])
                        gT[t, i, k] = gT[t, i, k] + acc
                for k in range(m):
                    for j in range(r):
                        acc = 0
                        for i in range(m):
                            acc = acc + conj(T[t, i, k]) * gh[i, j]
                        tmp[k, j] = acc
                for i in range(m):
                    for j in range(r):
                        gh[i, j] = tmp[i, j]
            for i in range(m):
                for j in range(r):
                    gR[iR[n], i, j] = gR[iR[n], i, j] + gh[i, j]
    return gT_arr, gR_arr


cdef inline void _pauli_step(cplx[:, :, :, :, ::1] sites, Py_ssize_t row,
                             long[:, ::1] perm, cplx[:, ::1] phase,
                             Py_ssize_t po, Py_ssize_t pi,
                             cplx[:, ::1] v, cplx[:, ::1] out, cplx[:, ::1] work) nogil:
    # out[r, r'] = sum_{o,i} c G[o,i,l,r] v[l,l'] conj(G[po(o),pi(i),l',r'])
    cdef Py_ssize_t D = sites.shape[1], cl = sites.shape[3], cr = sites.shape[4]
    cdef Py_ssize_t o, i, l, lp, rr, rp, o2, i2
    cdef cplx c, acc
    for rr in range(cr):
        for rp in range(cr):
            out[rr, rp] = 0
    for o in range(D):
        o2 = perm[po, o]
        for i in range(D):
            i2 = perm[pi, i]
            c = phase[po, o] * phase[pi, i]
            # work[l, r'] = sum_l' v[l, l'] conj(G2[l', r'])
            for l in range(cl):
                for rp in range(cr):
                    acc = 0
                    for lp in range(cl):
                        acc = acc + v[l, lp] * conj(sites[row, o2, i2, lp, rp])
                    work[l, rp] = acc
            for rr in range(cr):
                for rp in range(cr):
                    acc = 0
                    for l in range(cl):
                        acc = acc + sites[row, o, i, l, rr] * work[l, rp]
                    out[rr, rp] = out[rr, rp] + c * acc


def pauli_forward(cplx[:, :, :, :, ::1] sites, long[:, ::1] site_idx, long[:, ::1] perm,
                  cplx[:, ::1] phase, long[:, ::1] p_out, long[:, ::1] p_in,
                  cplx[:, :, ::1] Lb, long[::1] iL, cplx[:, :, ::1] Rb, long[::1] iR):
    cdef Py_ssize_t N = site_idx.shape[0], S = site_idx.shape[1]
    cdef Py_ssize_t c = sites.shape[3]
    res_arr = np.empty(N, dtype=np.complex128)
    cdef cplx[::1] res = res_arr
    cdef cplx[:, ::1] v = np.empty((c, c), dtype=np.complex128)
    cdef cplx[:, ::1] w = np.empty((c, c), dtype=np.complex128)
    cdef cplx[:, ::1] work = np.empty((c, c), dtype=np.complex128)
    cdef Py_ssize_t n, s, a, b
    cdef cplx acc
    with nogil:
        for n in range(N):
            for a in range(c):
                for b in range(c):
                    v[a, b] = Lb[iL[n], a, b]
            for s in range(S):
                _pauli_step(sites, site_idx[n, s], perm, phase, p_out[n, s], p_in[n, s], v, w, work)
                for a in range(c):
                    for b in range(c):
                        v[a, b] = w[a, b]
            acc = 0
            for a in range(c):
                for b in range(c):
                    acc = acc + Rb[iR[n], a, b] * v[a, b]
            res[n] = acc
    return res_arr


def pauli_backward(cplx[:, :, :, :, ::1] sites, long[:, ::1] site_idx, long[:, ::1] perm,
                   cplx[:, ::1] phase, long[:, ::1] p_out, long[:, ::1] p_in,
                   cplx[:, :, ::1] Lb, long[::1] iL, cplx[:, :, ::1] Rb, long[::1] iR,
                   cplx[::1] g):
    cdef Py_ssize_t N = site_idx.shape[0], S = site_idx.shape[1]
    cdef Py_ssize_t D = sites.shape[1], c = sites.shape[3]
    gs_arr = np.zeros_like(np.asarray(sites))
    gl_arr = np.zeros_like(np.asarray(Lb))
    gr_arr = np.zeros_like(np.asarray(Rb))
    cdef cplx[:, :, :, :, ::1] gs = gs_arr
    cdef cplx[:, :, ::1] gl = gl_arr
    cdef cplx[:, :, ::1] gr = gr_arr
    cdef cplx[:, :, ::1] vs = np.empty((S + 1, c, c), dtype=np.complex128)
    cdef cplx[:, ::1] gv = np.empty((c, c), dtype=np.complex128)
    cdef cplx[:, ::1] gnew = np.empty((c, c), dtype=np.complex128)
    cdef cplx[:, ::1] work = np.empty((c, c), dtype=np.complex128)
    cdef cplx[:, ::1] work2 = np.empty((c, c), dtype=np.complex128)
    cdef Py_ssize_t n, s, a, b, o, i, o2, i2, l, lp, rr, rp, row, po, pi
    cdef cplx cf, ccf, acc
    with nogil:
        for n in range(N):
            for a in range(c):
                for b in range(c):
                    vs[0, a, b] = Lb[iL[n], a, b]
            for s in range(S):
                _pauli_step(sites, site_idx[n, s], perm, phase, p_out[n, s], p_in[n, s],
                            vs[s], vs[s + 1], work)
            for a in range(c):
                for b in range(c):
                    gr[iR[n], a, b] = gr[iR[n], a, b] + g[n] * conj(vs[S, a, b])
                    gv[a, b] = g[n] * conj(Rb[iR[n], a, b])
            for s in range(S - 1, -1, -1):
                row = site_idx[n, s]
                po = p_out[n, s]
                pi = p_in[n, s]
                for a in range(c):
                    for b in range(c):
                        gnew[a, b] = 0
                for o in range(D):
                    o2 = perm[po, o]
                    for i in range(D):
                        i2 = perm[pi, i]
                        cf = phase[po, o] * phase[pi, i]
                        ccf = conj(cf)
                        # work[l', r] = sum_r' G2[l', r'] gy[r, r']   (G2 = G[o2, i2])
                        for lp in range(c):
                            for rr in range(c):
                                acc = 0
                                for rp in range(c):
                                    acc = acc + sites[row, o2, i2, lp, rp] * gv[rr, rp]
                                work[lp, rr] = acc
                        # gA[l, r] += conj(c) sum_l' conj(v[l, l']) work[l', r]
                        for l in range(c):
                            for rr in range(c):
                                acc = 0
                                for lp in range(c):
                                    acc = acc + conj(vs[s, l, lp]) * work[lp, rr]
                                gs[row, o, i, l, rr] = gs[row, o, i, l, rr] + ccf * acc
                        # gv_new[l, l'] += conj(c) sum_r conj(A[l, r]) work[l', r]
                        for l in range(c):
                            for lp in range(c):
                                acc = 0
                                for rr in range(c):
                                    acc = acc + conj(sites[row, o, i, l, rr]) * work[lp, rr]
                                gnew[l, lp] = gnew[l, lp] + ccf * acc
                        # gG2[l', r'] += c sum_{l,r} v[l, l'] A[l, r] conj(gy[r, r'])
                        for l in range(c):
                            for rp in range(c):
                                acc = 0
                                for rr in range(c):
                                    acc = acc + sites[row, o, i, l, rr] * conj(gv[rr, rp])
                                work2[l, rp] = acc
                        for lp in range(c):
                            for rp in range(c):
                                acc = 0
                                for l in range(c):
                                    acc = acc + vs[s, l, lp] * work2[l, rp]
                                gs[row, o2, i2, lp, rp] = gs[row, o2, i2, lp, rp] + cf * acc
                for a in range(c):
                    for b in range(c):
                        gv[a, b] = gnew[a, b]
            for a in range(c):
                for b in range(c):
                    gl[iL[n], a, b] = gl[iL[n], a, b] + gv[a, b]
    return gs_arr, gl_arr, gr_arr
