"""Pure numpy im2col / col2im, used when the compiled extension is unavailable."""
import numpy as np
from numpy.lib.stride_tricks import as_strided


def im2col(xp, kh, kw, stride, ho, wo):
    """Unfold padded ``xp`` (N, C, Hp, Wp) into (N, C*kh*kw, ho*wo)."""
    n, c, _, _ = xp.shape
    sn, sc, sh, sw = xp.strides
    view = as_strided(
        xp,
        shape=(n, c, kh, kw, ho, wo),
        strides=(sn, sc, sh, sw, sh * stride, sw * stride),
        writeable=False,
    )
    return np.ascontiguousarray(view).reshape(n, c * kh * kw, ho * wo)


def col2im(cols, c, hp, wp, kh, kw, stride, ho, wo):
    """Scatter-add (N, C*kh*kw, ho*wo) columns back into a (N, C, hp, wp) image."""
    n = cols.shape[0]
    cols = cols.reshape(n, c, kh, kw, ho, wo)
    out = np.zeros((n, c, hp, wp), dtype=cols.dtype)
    h_end = stride * (ho - 1) + 1
    w_end = stride * (wo - 1) + 1
    for i in range(kh):
        for j in range(kw):
            out[:, :, i:i + h_end:stride, j:j + w_end:stride] += cols[:, :, i, j]
    return out
