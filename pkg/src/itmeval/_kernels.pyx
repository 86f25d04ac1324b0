# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled n-gram kernels.

Windows are compared in place on a code-point buffer; each side's window
start offsets are merge-sorted, then equal runs are paired in one sweep.
All outputs are integers, so results agree exactly with ``_kernels_py``.
"""
from libc.stdlib cimport malloc, free
from libc.string cimport memcpy
from libc.stdint cimport uint32_t


cdef uint32_t* _codepoints(str s, Py_ssize_t* length) except NULL:
    cdef Py_ssize_t n = len(s)
    cdef uint32_t* buf = <uint32_t*> malloc((n + 1) * sizeof(uint32_t))
    cdef Py_ssize_t i = 0
    cdef Py_UCS4 ch
    if buf == NULL:
        raise MemoryError()
    for ch in s:
        buf[i] = ch
        i += 1
    length[0] = n
    return buf


cdef inline int _cmp(const uint32_t* x, Py_ssize_t i,
                     const uint32_t* y, Py_ssize_t j, Py_ssize_t n) noexcept nogil:
    cdef Py_ssize_t k
    for k in range(n):
        if x[i + k] != y[j + k]:
            return -1 if x[i + k] < y[j + k] else 1
    return 0


cdef void _sort(Py_ssize_t* idx, Py_ssize_t* tmp, Py_ssize_t m,
                const uint32_t* s, Py_ssize_t n) noexcept nogil:
    cdef Py_ssize_t width = 1, lo, mid, hi, i, j, k
    while width < m:
        lo = 0
        while lo < m:
            mid = lo + width
            if mid > m:
                mid = m
            hi = lo + 2 * width
            if hi > m:
                hi = m
            i = lo
            j = mid
            k = lo
            while i < mid and j < hi:
                if _cmp(s, idx[j], s, idx[i], n) < 0:
                    tmp[k] = idx[j]
                    j += 1
                else:
                    tmp[k] = idx[i]
                    i += 1
                k += 1
            while i < mid:
                tmp[k] = idx[i]
                i += 1
                k += 1
            while j < hi:
                tmp[k] = idx[j]
                j += 1
                k += 1
            lo += 2 * width
        memcpy(idx, tmp, m * sizeof(Py_ssize_t))
        width *= 2


cdef void _sweep(const uint32_t* a, Py_ssize_t* ia, Py_ssize_t ma,
                 const uint32_t* b, Py_ssize_t* ib, Py_ssize_t mb, Py_ssize_t n,
                 long long* matched, long long* dot,
                 long long* na2, long long* nb2) noexcept nogil:
    cdef Py_ssize_t i = 0, j = 0, p, q
    cdef int c
    while i < ma or j < mb:
        p = 0
        q = 0
        if i < ma and j < mb:
            c = _cmp(a, ia[i], b, ib[j], n)
        elif i < ma:
            c = -1
        else:
            c = 1
        if c <= 0:
            p = 1
            while i + p < ma and _cmp(a, ia[i], a, ia[i + p], n) == 0:
                p += 1
        if c >= 0:
            q = 1
            while j + q < mb and _cmp(b, ib[j], b, ib[j + q], n) == 0:
                q += 1
        matched[0] += p if p < q else q
        dot[0] += p * q
        na2[0] += p * p
        nb2[0] += q * q
        i += p
        j += q


cdef void _order(const uint32_t* a, Py_ssize_t la, const uint32_t* b, Py_ssize_t lb,
                 Py_ssize_t n, Py_ssize_t* ia, Py_ssize_t* ib, Py_ssize_t* tmp,
                 long long* out) noexcept nogil:
    cdef Py_ssize_t ma = la - n + 1 if la >= n else 0
    cdef Py_ssize_t mb = lb - n + 1 if lb >= n else 0
    cdef Py_ssize_t k
    for k in range(ma):
        ia[k] = k
    for k in range(mb):
        ib[k] = k
    _sort(ia, tmp, ma, a, n)
    _sort(ib, tmp, mb, b, n)
    out[0] = 0
    out[1] = 0
    out[2] = 0
    out[3] = 0
    _sweep(a, ia, ma, b, ib, mb, n, &out[0], &out[1], &out[2], &out[3])
    out[4] = ma
    out[5] = mb


def ngram_stats(str cand, str ref, int max_n):
    """Per order k = 1..max_n: (clipped matches, candidate total, reference total)."""
    cdef Py_ssize_t la, lb, n
    cdef long long out[6]
    cdef uint32_t* a = _codepoints(cand, &la)
    cdef uint32_t* b = NULL
    cdef Py_ssize_t* ia = NULL
    cdef Py_ssize_t* ib = NULL
    cdef Py_ssize_t* tmp = NULL
    result = []
    try:
        b = _codepoints(ref, &lb)
        ia = <Py_ssize_t*> malloc((la + 1) * sizeof(Py_ssize_t))
        ib = <Py_ssize_t*> malloc((lb + 1) * sizeof(Py_ssize_t))
        tmp = <Py_ssize_t*> malloc((la + lb + 1) * sizeof(Py_ssize_t))
        if ia == NULL or ib == NULL or tmp == NULL:
            raise MemoryError()
        for n in range(1, max_n + 1):
            with nogil:
                _order(a, la, b, lb, n, ia, ib, tmp, out)
            result.append((out[0], out[4], out[5]))
    finally:
        free(a)
        free(b)
        free(ia)
        free(ib)
        free(tmp)
    return result


def ngram_cosine_terms(str x, str y, int n):
    """(dot, |x|^2, |y|^2) of the order-n character count vectors."""
    cdef Py_ssize_t la, lb
    cdef long long out[6]
    cdef uint32_t* a = _codepoints(x, &la)
    cdef uint32_t* b = NULL
    cdef Py_ssize_t* ia = NULL
    cdef Py_ssize_t* ib = NULL
    cdef Py_ssize_t* tmp = NULL
    try:
        b = _codepoints(y, &lb)
        ia = <Py_ssize_t*> malloc((la + 1) * sizeof(Py_ssize_t))
        ib = <Py_ssize_t*> malloc((lb + 1) * sizeof(Py_ssize_t))
        tmp = <Py_ssize_t*> malloc((la + lb + 1) * sizeof(Py_ssize_t))
        if ia == NULL or ib == NULL or tmp == NULL:
            raise MemoryError()
        with nogil:
            _order(a, la, b, lb, n, ia, ib, tmp, out)
    finally:
        free(a)
        free(b)
        free(ia)
        free(ib)
        free(tmp)
    return (out[1], out[2], out[3])
