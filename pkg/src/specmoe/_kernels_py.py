"""Pure-Python routing kernel, used when the compiled extension is absent.

Consumes the uniform draws in exactly the same order as the Cython version,
so both produce identical results for identical inputs.
"""


def mean_routed_active(uniforms, num_layers, tokens, routed, top_k, affinity):
    stride = top_k + 1
    need = num_layers * tokens * stride
    if len(uniforms) < need:
        raise ValueError(f"need {need} uniforms, got {len(uniforms)}")
    if num_layers < 1 or tokens < 1 or top_k < 1 or top_k > routed:
        raise ValueError("invalid routing geometry")

    u = uniforms.tolist() if hasattr(uniforms, "tolist") else list(uniforms)
    perm = list(range(routed))
    total = 0
    for layer in range(num_layers):
        seen = [False] * routed
        distinct = 0
        for tok in range(tokens):
            base = (layer * tokens + tok) * stride
            if tok > 0 and u[base] < affinity:
                continue
            for j in range(top_k):
                r = j + int(u[base + 1 + j] * (routed - j))
                if r >= routed:
                    r = routed - 1
                perm[j], perm[r] = perm[r], perm[j]
                e = perm[j]
                if not seen[e]:
                    seen[e] = True
                    distinct += 1
        total += distinct
    return total / num_layers
