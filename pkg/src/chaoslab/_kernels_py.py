"""Pure-Python transport kernels.

Reference implementation of the two hot loops used by :mod:`chaoslab.transport`.
The compiled module ``_kernels`` mirrors this file statement by statement, so
both produce the same plans and assignments.
"""
import numpy as np

DEGENERATE_RUN = 50
MAX_PIVOTS = 100000


def _northwest(a, b, x, bi, bj):
    m, n = a.shape[0], b.shape[0]
    ra = a.copy()
    rb = b.copy()
    i = 0
    j = 0
    t = 0
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


def _potentials(cost, bi, bj, nb, m, n, u, v, done, stack):
    # tree nodes: rows 0..m-1, columns m..m+n-1; root is row 0 with u = 0
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


def _tree_path(bi, bj, nb, m, n, start, goal, parent_edge, parent, queue):
    """Edges of the basis tree on the path from node ``start`` to ``goal``."""
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


def transport_simplex(a, b, cost, tol):
    """Exact transportation problem; returns ``(plan, objective, pivots)``.

    ``a`` and ``b`` are positive marginals with equal totals, ``cost`` is
    ``(m, n)``.  Entering cell: most negative reduced cost, switching to the
    first negative cell in row-major order after a run of degenerate pivots.
    Leaving cell: smallest flat index among the minimising cells.
    """
    a = np.ascontiguousarray(a, dtype=np.float64)
    b = np.ascontiguousarray(b, dtype=np.float64)
    cost = np.ascontiguousarray(cost, dtype=np.float64)
    m, n = cost.shape
    nb_max = m + n - 1
    x = np.zeros((m, n))
    bi = np.zeros(nb_max, dtype=np.int64)
    bj = np.zeros(nb_max, dtype=np.int64)
    nb = _northwest(a, b, x, bi, bj)
    basic = np.zeros((m, n), dtype=np.uint8)
    for t in range(nb):
        basic[bi[t], bj[t]] = 1
    u = np.zeros(m)
    v = np.zeros(n)
    done = np.zeros(m + n, dtype=np.int64)
    stack = np.zeros(m + n, dtype=np.int64)
    parent = np.zeros(m + n, dtype=np.int64)
    parent_edge = np.zeros(m + n, dtype=np.int64)
    queue = np.zeros(m + n, dtype=np.int64)
    cyc_t = np.zeros(m + n, dtype=np.int64)
    degenerate = 0
    pivots = 0
    while pivots < MAX_PIVOTS:
        _potentials(cost, bi, bj, nb, m, n, u, v, done, stack)
        ei = -1
        ej = -1
        best = -tol
        bland = degenerate >= DEGENERATE_RUN
        for i in range(m):
            for j in range(n):
                if basic[i, j]:
                    continue
                rc = cost[i, j] - u[i] - v[j]
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
        # path in the basis tree from column ej back to row ei
        _tree_path(bi, bj, nb, m, n, m + ej, ei, parent_edge, parent, queue)
        L = 0
        node = ei
        while node != m + ej:
            cyc_t[L] = parent_edge[node]
            L += 1
            node = parent[node]
        # cyc_t lists edges from row ei towards column ej; the edge touching
        # row ei loses mass, then signs alternate
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
            obj += x[i, j] * cost[i, j]
    return x, obj, pivots


def hungarian(cost):
    """Minimum-cost assignment; returns ``(col_of_row, u, v)`` with dual potentials."""
    cost = np.ascontiguousarray(cost, dtype=np.float64)
    n = cost.shape[0]
    INF = np.inf
    u = np.zeros(n + 1)
    v = np.zeros(n + 1)
    p = np.zeros(n + 1, dtype=np.int64)
    way = np.zeros(n + 1, dtype=np.int64)
    minv = np.zeros(n + 1)
    used = np.zeros(n + 1, dtype=np.uint8)
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        for j in range(n + 1):
            minv[j] = INF
            used[j] = 0
        while True:
            used[j0] = 1
            i0 = p[j0]
            delta = INF
            j1 = -1
            for j in range(1, n + 1):
                if used[j]:
                    continue
                cur = cost[i0 - 1, j - 1] - u[i0] - v[j]
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
    return col, u[1:].copy(), v[1:].copy()


def _augment(r, tight, col_owner, row_col, fixed_rows, seen, n):
    # try to give row r a column through an alternating path avoiding fixed rows
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


def lex_refine(cost, col, u, v, tol):
    """Lexicographically smallest assignment among those using tight edges only."""
    cost = np.ascontiguousarray(cost, dtype=np.float64)
    n = cost.shape[0]
    tight = np.zeros((n, n), dtype=np.uint8)
    for i in range(n):
        for j in range(n):
            if cost[i, j] - u[i] - v[j] <= tol:
                tight[i, j] = 1
    row_col = col.copy()
    col_owner = np.full(n, -1, dtype=np.int64)
    for i in range(n):
        col_owner[row_col[i]] = i
    fixed_rows = np.zeros(n, dtype=np.uint8)
    seen = np.zeros(n, dtype=np.uint8)
    for i in range(n):
        for j in range(n):
            if j == row_col[i]:
                break
            if not tight[i, j]:
                continue
            o = col_owner[j]
            if o >= 0 and fixed_rows[o]:
                continue
            # tentatively move i to j and re-home the displaced row
            old = row_col[i]
            saved_rc = row_col.copy()
            saved_co = col_owner.copy()
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
    return row_col
