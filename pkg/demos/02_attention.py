"""Three attention mechanisms and why two of them scale linearly.

Softmax attention must form the [N, N] score matrix.  Sequence-normalized
attention and SimA drop the softmax, so (Q K^T) V can be computed as
Q (K^T V), where K^T V is only (D/J) x (D/J) per head.

Run: python demos/02_attention.py
"""

import numpy as np

from seqnorm_vit import AttentionConfig, AttentionLayer, Tensor, precision
from seqnorm_vit.attention import attention, seq_normalize_affine
from seqnorm_vit.bench import measure_peak, predicted_peak

rng = np.random.default_rng(0)
B, N, D, J = 1, 50, 16, 4

with precision("f64"):
    q, k, v = (Tensor(rng.standard_normal((B, N, D))) for _ in range(3))
    for mech in ("vanilla", "seqnorm", "sima"):
        layer = AttentionLayer(AttentionConfig(mech, model_dim=D, inner_dim=D, heads=J), rng, dtype=np.float64)
        out = attention(q, k, v, layer)
        print(f"{mech:8s} output {out.shape}, mean {out.data.mean():+.4f}")

    # Sequence normalization: zero mean, unit variance per feature over tokens.
    x = Tensor(rng.standard_normal((1, 200, 3)) * 7 + 4)
    y = seq_normalize_affine(x, Tensor(np.ones(3)), Tensor(np.zeros(3)), eps=1e-5).data
    print("normalized mean", np.round(y.mean(axis=1), 12), "var", np.round(y.var(axis=1), 6))

    # Linear order equals quadratic order.
    layer = AttentionLayer(AttentionConfig("seqnorm", D, D, J), rng, dtype=np.float64)
    linear = attention(q, k, v, layer).data
    qn, kn, vn = (seq_normalize_affine(t, g, b, 1e-5).data for t, g, b in
                  ((q, layer.gamma_q, layer.beta_q), (k, layer.gamma_k, layer.beta_k), (v, layer.gamma_v, layer.beta_v)))
    dh = D // J
    quad = np.concatenate([(qn[..., j*dh:(j+1)*dh] @ kn[..., j*dh:(j+1)*dh].transpose(0, 2, 1)) @ vn[..., j*dh:(j+1)*dh]
                           for j in range(J)], axis=-1) / N
    print("linear vs quadratic order, max abs diff", f"{np.abs(linear - quad).max():.1e}")

# Counted transient elements during one forward pass.
print(f"\n{'N':>6} {'vanilla':>12} {'seqnorm':>12} {'sima':>12}")
for n in (256, 1024, 4096):
    row = [measure_peak(m, n, 512, 8).peak for m in ("vanilla", "seqnorm", "sima")]
    assert row == [predicted_peak(m, n, 512, 8) for m in ("vanilla", "seqnorm", "sima")]
    print(f"{n:>6} " + " ".join(f"{p:>12,}" for p in row))
