import numpy as np

from ctxspike.ctc_core import PosteriorMatrix
from ctxspike.tensor_nn import log_softmax


def rand_post(rng, T, V, scale=2.0, blank_id=0):
    return PosteriorMatrix(log_softmax(rng.normal(size=(T, V)) * scale), blank_id)


def spiky_post(argmax_seq, V, conf=0.9):
    """Posterior whose per-frame argmax follows ``argmax_seq``."""
    T = len(argmax_seq)
    p = np.full((T, V), (1 - conf) / (V - 1))
    for t, k in enumerate(argmax_seq):
        p[t, k] = conf
    return PosteriorMatrix(np.log(p), 0)


def random_bundle(rng, V=6, d=4, heads=2, hidden=3, embed=3, k=3, scale=0.5):
    from ctxspike.tensor_nn import WeightBundle

    n = lambda *shape: rng.normal(size=shape) * scale
    p = {"context_encoder.embed": n(V, embed)}
    for direction in ("fwd", "bwd"):
        p[f"context_encoder.{direction}.w_ih"] = n(embed, 4 * hidden)
        p[f"context_encoder.{direction}.w_hh"] = n(hidden, 4 * hidden)
        p[f"context_encoder.{direction}.b"] = n(4 * hidden)
    p.update({
        "context_encoder.out.w": n(4 * hidden, d), "context_encoder.out.b": n(d),
        "integration.conv.w": n(k, d, d), "integration.conv.b": n(d),
        "integration.attn.wq": n(d, d), "integration.attn.wk": n(d, d),
        "integration.attn.wv": n(d, d),
        "integration.out.w": n(d, d), "integration.out.b": n(d),
        "ctx_decoder.w": n(2 * d, V), "ctx_decoder.b": n(V),
        "ctc_head.w": n(d, V), "ctc_head.b": n(V),
    })
    return WeightBundle(p, d_model=d, heads=heads, vocab=V, conv_kernel=k, hidden=hidden,
                        embed_dim=embed)
