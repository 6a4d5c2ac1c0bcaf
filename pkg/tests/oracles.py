"""Slow, loop-based reference implementations used as test oracles."""
import numpy as np


def conv_loop(x, w, b):
    """Zero-padded 3x3 correlation written as plain nested loops."""
    bsz, cin, h, wd = x.shape
    cout = w.shape[0]
    out = np.zeros((bsz, cout, h, wd))
    for n in range(bsz):
        for o in range(cout):
            for i in range(h):
                for j in range(wd):
                    acc = b[o]
                    for c in range(cin):
                        for di in range(3):
                            for dj in range(3):
                                ii, jj = i + di - 1, j + dj - 1
                                if 0 <= ii < h and 0 <= jj < wd:
                                    acc += w[o, c, di, dj] * x[n, c, ii, jj]
                    out[n, o, i, j] = acc
    return out


def cu_loop(z, w, b):
    return np.array([b[c] + sum(w[c, k] * z[k] for k in range(len(z))) for c in range(len(b))])


def cpmb_ref(f, z, blk, cu):
    h = np.maximum(conv_loop(f, blk["w1"], blk["b1"]), 0.0)
    h = conv_loop(h, blk["w2"], blk["b2"])
    if cu is not None:
        s = cu_loop(z, *cu)
        for c in range(len(s)):
            h[:, c] *= s[c]
    return f + h


def cpmm_ref(r, z, arrays, k, nblocks, cu_names):
    p = f"phase{k}"
    f = conv_loop(r, arrays[f"{p}.w1"], arrays[f"{p}.b1"])
    for j in range(nblocks):
        blk = {s: arrays[f"{p}.block{j}.{s}"] for s in ("w1", "b1", "w2", "b2")}
        names = cu_names(k, j)
        f = cpmb_ref(f, z, blk, None if names is None else (arrays[names[0]], arrays[names[1]]))
    return r + conv_loop(f, arrays[f"{p}.w2"], arrays[f"{p}.b2"])


def fold_loop(patches, rows, cols, side):
    img = np.zeros((rows * side, cols * side))
    for idx in range(rows * cols):
        gi, gj = divmod(idx, cols)
        for a in range(side):
            for b in range(side):
                img[gi * side + a, gj * side + b] = patches[idx, a * side + b]
    return img


def unfold_loop(img, rows, cols, side):
    out = np.zeros((rows * cols, side * side))
    for idx in range(rows * cols):
        gi, gj = divmod(idx, cols)
        for a in range(side):
            for b in range(side):
                out[idx, a * side + b] = img[gi * side + a, gj * side + b]
    return out


def coast_ref(y, phi, z, arrays, config, rows, cols, cu_names):
    """Phase loop with the deblocking fold written out by hand."""
    side = phi.patch_side
    x = np.zeros((y.shape[0], phi.cols))
    for k in range(config.phases):
        rho = arrays[f"phase{k}.rho"][0]
        r = x - rho * ((x @ phi.data.T - y) @ phi.data)
        img = fold_loop(r, rows, cols, side)[None, None]
        out = cpmm_ref(img, z, arrays, k, config.blocks, cu_names)
        x = unfold_loop(out[0, 0], rows, cols, side)
    return x
