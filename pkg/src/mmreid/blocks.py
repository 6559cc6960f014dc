"""Multi-head attention pieces shared by the encoders and the fusion module."""

from __future__ import annotations

import math

from . import autodiff as ad
from .autodiff import Tensor


def attend(q: Tensor, k: Tensor, v: Tensor, num_heads: int) -> Tensor:
    """Scaled dot-product attention over pre-projected q/k/v, split by head."""
    d = q.shape[1]
    if d % num_heads != 0:
        raise ad.ShapeMismatchError(f"attend: width {d} not divisible by {num_heads} heads")
    dh = d // num_heads
    outs = []
    for h in range(num_heads):
        qh = ad.slice_cols(q, h * dh, (h + 1) * dh)
        kh = ad.slice_cols(k, h * dh, (h + 1) * dh)
        vh = ad.slice_cols(v, h * dh, (h + 1) * dh)
        scores = ad.scale(ad.matmul(qh, ad.transpose(kh)), 1.0 / math.sqrt(dh))
        outs.append(ad.matmul(ad.softmax(scores, axis=1), vh))
    return ad.concat(outs, axis=1)


def multi_head_attention(x_q: Tensor, x_k: Tensor, x_v: Tensor,
                         wq: Tensor, wk: Tensor, wv: Tensor, wo: Tensor,
                         num_heads: int) -> Tensor:
    q = ad.matmul(x_q, wq)
    k = ad.matmul(x_k, wk)
    v = ad.matmul(x_v, wv)
    return ad.matmul(attend(q, k, v, num_heads), wo)
