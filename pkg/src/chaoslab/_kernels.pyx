# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled transport kernels; statement-for-statement port of ``_kernels_py``."""
import numpy as np
cimport numpy as cnp
from libc.math cimport INFINITY

cnp.import_array()

cdef enum:
    DEGENERATE_RUN = 50
    MAX_PIVOTS = 100000


cdef Py_ssize_t _northwest(double[::1] a, double[::1] b, double[:, ::1] x,
                           long long[::1] bi, long long[::1] bj):
    cdef Py_ssize_t m = a.shape[0], n = b.shape[0]
    cdef double[::1] ra = np.array(a, copy=True)
    cdef double[::1] rb = np.array(b, copy=True)
    cdef Py_ssize_t i = 0, j = 0, t = 0
    cdef double v
    while True:
        if i == m - 1 and j == n - 1:
            v = ra[i] if ra[i] < rb[j] else rb[j]
            if v < 0.0:
                v = 0.0
            x[i, j] = v
            bi[t] = i
            bj[t] = j
            t += 1
            break
        if j == n - 1 or (i < m - 1 and ra[i] <= rb[j]):
            v = ra[i]
            if v < 0.0:
                v = 0.0
            x[i, j] = v
            rb[j] -= v
            bi[t] = i
            bj[t] = j
            t += 1
            i += 1
        else:
            v = rb[j]
            if v < 0.0:
                v = 0.0
            x[i, j] = v
            ra[i] -= v
            bi[t] = i
            bj[t] = j
            t += 1
            j += 1
    return t


cdef void _potentials(double[:, ::1] cost, long long[::1] bi, long long[::1] bj,
                      Py_ssize_t nb, Py_ssize_t m, Py_ssize_t n, double[::1] u,
                      double[::1] v, long long[::1] done, long long[::1] stack) noexcept nogil:
    cdef Py_ssize_t r, t, top, node
    for r in range(m + n):
        done[r] = 0
    u[0] = 0.0
    done[0] = 1
    top = 0
    stack[top] = 0
    top += 1
    while top > 0:
        top -= 1
        node = stack[top]
        for t in range(nb):
            if node < m:
                if bi[t] != node or done[m + bj[t]]:
                    continue
                v[bj[t]] = cost[node, bj[t]] - u[node]
                done[m + bj[t]] = 1
                stack[top] = m + bj[t]
                top += 1
            else:
                if bj[t] != node - m or done[bi[t]]:
                    continue
                u[bi[t]] = cost[bi[t], node - m] - v[node - m]
                done[bi[t]] = 1
                stack[top] = bi[t]
                top += 1


cdef void _tree_path(long long[::1] bi, long long[::1] bj, Py_ssize_t nb, Py_ssize_t m,
                     Py_ssize_t n, Py_ssize_t start, Py_ssize_t goal,
                     long long[::1] parent_edge, long long[::1] parent,
                     long long[::1] queue) noexcept nogil:
    cdef Py_ssize_t r, head, tail, node, t, nxt
    for r in range(m + n):
        parent[r] = -2
    parent[start] = -1
    head = 0
    tail = 0
    queue[tail] = start
    tail += 1
    while head < tail:
        node = queue[head]
        head += 1
        if node == goal:
            break
        for t in range(nb):
            if node < m:
                if bi[t] != node:
                    continue
                nxt = m + bj[t]
            else:
                if bj[t] != node - m:
                    continue
                nxt = bi[t]
            if parent[nxt] != -2:
                continue
            parent[nxt] = node
            parent_edge[nxt] = t
            queue[tail] = nxt
            tail += 1


def transport_simplex(a, b, cost, double tol):
    cdef double[::1] av = np.ascontiguousarray(a, dtype=np.float64)
    cdef double[::1] bv = np.ascontiguousarray(b, dtype=np.float64)
    cdef double[:, ::1] c = np.ascontiguousarray(cost, dtype=np.float64)
    cdef Py_ssize_t m = c.shape[0], n = c.shape[1]
    cdef Py_ssize_t nb_max = m + n - 1
    xa = np.zeros((m, n))
    cdef double[:, ::1] x = xa
    cdef long long[::1] bi = np.zeros(nb_max, dtype=np.int64)
    cdef long long[::1] bj = np.zeros(nb_max, dtype=np.int64)
    cdef Py_ssize_t nb = _northwest(av, bv, x, bi, bj)
    cdef unsigned char[:, ::1] basic = np.zeros((m, n), dtype=np.uint8)
    cdef Py_ssize_t t, i, j, ei, ej, L, node, s, leave, flat
    for t in range(nb):
        basic[bi[t], bj[t]] = 1
    cdef double[::1] u = np.zeros(m)
    cdef double[::1] v = np.zeros(n)
    cdef long long[::1] done = np.zeros(m + n, dtype=np.int64)
    cdef long long[::1] stack = np.zeros(m + n, dtype=np.int64)
    cdef long long[::1] parent = np.zeros(m + n, dtype=np.int64)
    cdef long long[::1] parent_edge = np.zeros(m + n, dtype=np.int64)
    cdef long long[::1] queue = np.zeros(m + n, dtype=np.int64)
    cdef long long[::1] cyc_t = np.zeros(m + n, dtype=np.int64)
    cdef long degenerate = 0, pivots = 0
    cdef double best, rc, theta, val, obj
    cdef bint bland
    with nogil:
        while pivots < MAX_PIVOTS:
            _potentials(c, bi, bj, nb, m, n, u, v, done, stack)
            ei = -1
            ej = -1
            best = -tol
            bland = degenerate >= DEGENERATE_RUN
            for i in range(m):
                for j in range(n):
                    if basic[i, j]:
                        continue
                    rc = c[i, j] - u[i] - v[j]
                    if rc < best:
                        best = rc
                        ei = i
                        ej = j
                        if bland:
                            break
                if bland and ei >= 0:
                    break
            if ei < 0:
                break
            _tree_path(bi, bj, nb, m, n, m + ej, ei, parent_edge, parent, queue)
            L = 0
            node = ei
            while node != m + ej:
                cyc_t[L] = parent_edge[node]
                L += 1
                node = parent[node]
            theta = -1.0
            leave = -1
            for s in range(0, L, 2):
                t = cyc_t[s]
                val = x[bi[t], bj[t]]
                flat = bi[t] * n + bj[t]
                if leave < 0 or val < theta or (val == theta and flat < bi[leave] * n + bj[leave]):
                    theta = val
                    leave = t
            for s in range(L):
                t = cyc_t[s]
                if s % 2 == 0:
                    x[bi[t], bj[t]] -= theta
                else:
                    x[bi[t], bj[t]] += theta
            x[ei, ej] = theta
            x[bi[leave], bj[leave]] = 0.0
            basic[bi[leave], bj[leave]] = 0
            basic[ei, ej] = 1
            bi[leave] = ei
            bj[leave] = ej
            if theta == 0.0:
                degenerate += 1
            else:
                degenerate = 0
            pivots += 1
        obj = 0.0
        for i in range(m):
            for j in range(n):
                obj += x[i, j] * c[i, j]
    return xa, obj, pivots


def hungarian(cost):
    cdef double[:, ::1] c = np.ascontiguousarray(cost, dtype=np.float64)
    cdef Py_ssize_t n = c.shape[0]
    ua = np.zeros(n + 1)
    va = np.zeros(n + 1)
    cdef double[::1] u = ua
    cdef double[::1] v = va
    cdef long long[::1] p = np.zeros(n + 1, dtype=np.int64)
    cdef long long[::1] way = np.zeros(n + 1, dtype=np.int64)
    cdef double[::1] minv = np.zeros(n + 1)
    cdef unsigned char[::1] used = np.zeros(n + 1, dtype=np.uint8)
    cdef Py_ssize_t i, j, j0, j1, i0
    cdef double delta, cur
    with nogil:
        for i in range(1, n + 1):
            p[0] = i
            j0 = 0
            for j in range(n + 1):
                minv[j] = INFINITY
                used[j] = 0
            while True:
                used[j0] = 1
                i0 = p[j0]
                delta = INFINITY
                j1 = -1
                for j in range(1, n + 1):
                    if used[j]:
                        continue
                    cur = c[i0 - 1, j - 1] - u[i0] - v[j]
                    if cur < minv[j]:
                        minv[j] = cur
                        way[j] = j0
                    if minv[j] < delta:
                        delta = minv[j]
                        j1 = j
                for j in range(n + 1):
                    if used[j]:
                        u[p[j]] += delta
                        v[j] -= delta
                    else:
                        minv[j] -= delta
                j0 = j1
                if p[j0] == 0:
                    break
            while True:
                j1 = way[j0]
                p[j0] = p[j1]
                j0 = j1
                if j0 == 0:
                    break
    col = np.zeros(n, dtype=np.int64)
    for j in range(1, n + 1):
        col[p[j] - 1] = j - 1
    return col, ua[1:].copy(), va[1:].copy()


cdef bint _augment(Py_ssize_t r, unsigned char[:, ::1] tight, long long[::1] col_owner,
                   long long[::1] row_col, unsigned char[::1] fixed_rows,
                   unsigned char[::1] seen, Py_ssize_t n) noexcept:
    cdef Py_ssize_t j
    cdef long long o
    for j in range(n):
        if not tight[r, j] or seen[j]:
            continue
        seen[j] = 1
        o = col_owner[j]
        if o < 0 or (not fixed_rows[o] and _augment(o, tight, col_owner, row_col, fixed_rows, seen, n)):
            col_owner[j] = r
            row_col[r] = j
            return True
    return False


def lex_refine(cost, col, u, v, double tol):
    cdef double[:, ::1] c = np.ascontiguousarray(cost, dtype=np.float64)
    cdef double[::1] uu = np.ascontiguousarray(u, dtype=np.float64)
    cdef double[::1] vv = np.ascontiguousarray(v, dtype=np.float64)
    cdef Py_ssize_t n = c.shape[0]
    cdef unsigned char[:, ::1] tight = np.zeros((n, n), dtype=np.uint8)
    cdef Py_ssize_t i, j, k
    cdef long long o, old
    cdef bint ok
    for i in range(n):
        for j in range(n):
            if c[i, j] - uu[i] - vv[j] <= tol:
                tight[i, j] = 1
    rca = np.array(col, dtype=np.int64, copy=True)
    cdef long long[::1] row_col = rca
    cdef long long[::1] col_owner = np.full(n, -1, dtype=np.int64)
    for i in range(n):
        col_owner[row_col[i]] = i
    cdef unsigned char[::1] fixed_rows = np.zeros(n, dtype=np.uint8)
    cdef unsigned char[::1] seen = np.zeros(n, dtype=np.uint8)
    cdef long long[::1] saved_rc = np.zeros(n, dtype=np.int64)
    cdef long long[::1] saved_co = np.zeros(n, dtype=np.int64)
    for i in range(n):
        for j in range(n):
            if j == row_col[i]:
                break
            if not tight[i, j]:
                continue
            o = col_owner[j]
            if o >= 0 and fixed_rows[o]:
                continue
            old = row_col[i]
            saved_rc[:] = row_col
            saved_co[:] = col_owner
            col_owner[old] = -1
            row_col[i] = j
            col_owner[j] = i
            fixed_rows[i] = 1
            ok = True
            if o >= 0:
                seen[:] = 0
                seen[j] = 1
                ok = _augment(o, tight, col_owner, row_col, fixed_rows, seen, n)
            if ok:
                break
            row_col[:] = saved_rc
            col_owner[:] = saved_co
            fixed_rows[i] = 0
        fixed_rows[i] = 1
    return rca
