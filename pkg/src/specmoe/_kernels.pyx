# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled routing kernel. Mirrors ``_kernels_py`` draw-for-draw."""

from libc.stdlib cimport malloc, free


def mean_routed_active(const double[::1] uniforms, int num_layers, int tokens,
                       int routed, int top_k, double affinity):
    """Mean number of distinct routed experts touched per layer.

    ``uniforms`` holds ``num_layers * tokens * (top_k + 1)`` draws in [0, 1).
    Each token slot is one reuse draw followed by ``top_k`` selection draws.
    """
    cdef Py_ssize_t stride = top_k + 1
    cdef Py_ssize_t need = <Py_ssize_t>num_layers * tokens * stride
    if uniforms.shape[0] < need:
        raise ValueError(f"need {need} uniforms, got {uniforms.shape[0]}")
    if num_layers < 1 or tokens < 1 or top_k < 1 or top_k > routed:
        raise ValueError("invalid routing geometry")

    cdef int *perm = <int *>malloc(routed * sizeof(int))
    cdef unsigned char *seen = <unsigned char *>malloc(routed * sizeof(unsigned char))
    if perm == NULL or seen == NULL:
        free(perm)
        free(seen)
        raise MemoryError()

    cdef long total = 0
    cdef int layer, tok, j, r, tmp, distinct
    cdef Py_ssize_t base
    cdef double u
    try:
        for j in range(routed):
            perm[j] = j
        for layer in range(num_layers):
            for j in range(routed):
                seen[j] = 0
            distinct = 0
            for tok in range(tokens):
                base = (<Py_ssize_t>layer * tokens + tok) * stride
                if tok > 0 and uniforms[base] < affinity:
                    continue
                for j in range(top_k):
                    u = uniforms[base + 1 + j]
                    r = j + <int>(u * (routed - j))
                    if r >= routed:
                        r = routed - 1
                    tmp = perm[j]
                    perm[j] = perm[r]
                    perm[r] = tmp
                    if not seen[perm[j]]:
                        seen[perm[j]] = 1
                        distinct += 1
            total += distinct
    finally:
        free(perm)
        free(seen)
    return total / <double>num_layers
