"""Independent reference implementations used by the tests.

None of these import the kernels or layer code they are checking.
"""

import numpy as np

from raplab.model import forward_batch
from raplab.train import LossConfig, loss_total

LEAK = 0.1


def conv_loops(x, w, b, stride=1):
    """'same' cross-correlation of one channels-first image, by explicit tap loops, float64."""
    c_in, h, wd = x.shape
    o_ch, _, k, _ = w.shape
    p = k // 2
    xp = np.zeros((c_in, h + 2 * p, wd + 2 * p))
    xp[:, p:p + h, p:p + wd] = x
    out = np.zeros((o_ch, h, wd))
    for o in range(o_ch):
        for c in range(c_in):
            for i in range(k):
                for j in range(k):
                    out[o] += float(w[o, c, i, j]) * xp[c, i:i + h, j:j + wd]
        out[o] += float(b[o])
    return out[:, ::stride, ::stride]


def leaky(x):
    return np.where(x > 0, x, LEAK * x)


def upsample_loops(z):
    c, h, w = z.shape
    out = np.zeros((c, 2 * h, 2 * w))
    for y in range(2 * h):
        for x in range(2 * w):
            out[:, y, x] = z[:, y // 2, x // 2]
    return out


def decode_loops(tensors, levels, h_fused, skips_q, skips_r=None):
    """Decoder written from its description: upsample, concat skips, conv+act; final conv."""
    z = np.asarray(h_fused, dtype=np.float64)
    for step in range(1, levels):
        lvl = levels - step
        parts = [upsample_loops(z), skips_q[lvl - 1]]
        if skips_r is not None:
            parts.append(skips_r[lvl - 1])
        z = leaky(conv_loops(np.concatenate(parts), tensors[f"dec.up{step}.w"], tensors[f"dec.up{step}.b"]))
    return conv_loops(z, tensors["dec.out.w"], tensors["dec.out.b"])


def kink_aware_gradcheck(params, xq, yr, y_gt, eps=1e-3, loss_cfg=LossConfig()):
    """Central differences of loss_total(forward(.)) against the given analytic gradients.

    A coordinate is compared only if neither perturbed evaluation flips the sign
    of any pre-activation or of any residual ``y_hat - y_gt``; across such a
    flip the loss is not differentiable on the interval and central differences
    measure the kink, not the gradient. Returns ``{group: (rel_err, coverage)}``.
    """

    def evaluate():
        y_hat, tape = forward_batch(params, xq, yr, keep=True)
        pats = [e[2] > 0 for e in tape.entries if e[2] is not None]
        pats.append(y_hat > y_gt)
        return loss_total(y_hat, y_gt, loss_cfg)[0], np.concatenate([q.ravel() for q in pats])

    _, pat0 = evaluate()
    from raplab.model import backward_batch

    y_hat, tape = forward_batch(params, xq, yr, keep=True)
    _, g_out = loss_total(y_hat, y_gt, loss_cfg)
    grads = backward_batch(params, tape, g_out)
    res = {}
    for group, prefix in (("theta_query", "query."), ("theta_ref", "ref."), ("theta_dec", "dec.")):
        names = [k for k in params.tensors if k.startswith(prefix)]
        if not names:
            continue
        ana, num = [], []
        total = 0
        for k in names:
            a = params.tensors[k]
            for idx in np.ndindex(a.shape):
                total += 1
                orig = a[idx]
                a[idx] = orig + np.float32(eps)
                hi = float(a[idx])
                fp, pp = evaluate()
                a[idx] = orig - np.float32(eps)
                lo = float(a[idx])
                fm, pm = evaluate()
                a[idx] = orig
                if (pp == pat0).all() and (pm == pat0).all():
                    num.append((fp - fm) / (hi - lo))
                    ana.append(float(grads[k][idx]))
        ana, num = np.array(ana), np.array(num)
        denom = max(np.linalg.norm(ana), np.linalg.norm(num), 1e-30)
        res[group] = (float(np.linalg.norm(ana - num) / denom), len(num) / total)
    return res
