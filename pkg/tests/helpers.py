"""Independent oracles shared by the test modules."""


import numpy as np

FD_STEP = 1e-6


def numeric_grad(f, x: np.ndarray, step: float = FD_STEP, entries=None) -> np.ndarray:
    """Central finite differences of scalar ``f()`` w.r.t. ``x`` (mutated in place).

    With ``entries`` (flat indices) only those are probed; others stay 0.
    """
    g = np.zeros_like(x, dtype=np.float64)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    idx = range(flat.size) if entries is None else entries
    for i in idx:
        old = flat[i]
        flat[i] = old + step
        fp = f()
        flat[i] = old - step
        fm = f()
        flat[i] = old
        gflat[i] = (fp - fm) / (2 * step)
    return g


def rel_error(a, b) -> float:
    a, b = np.ravel(a), np.ravel(b)
    denom = max(np.linalg.norm(a), np.linalg.norm(b))
    return 0.0 if denom == 0 else float(np.linalg.norm(a - b) / denom)


def brute_force_scores(pred_masks, true_masks, class_masks):
    """Per-class one-vs-rest counts via explicit Python loops.

    ``pred_masks`` entries not in ``class_masks`` match no class.
    Returns ``{class_index: (tp, fp, fn, tn)}``.
    """
    out = {}
    for k, cm in enumerate(class_masks):
        tp = fp = fn = tn = 0
        for p, t in zip(pred_masks, true_masks):
            pk, tk = int(p) == cm, int(t) == cm
            if pk and tk:
                tp += 1
            elif pk:
                fp += 1
            elif tk:
                fn += 1
            else:
                tn += 1
        out[k] = (tp, fp, fn, tn)
    return out


def textbook_metrics(tp, fp, fn, tn):
    """Accuracy, precision, recall, F1 straight from their definitions."""
    acc = (tp + tn) / (tp + fp + fn + tn)
    p = tp / (tp + fp) if tp + fp else 0.0
    r = tp / (tp + fn) if tp + fn else 0.0
    f = 2 * p * r / (p + r) if p + r else 0.0
    return acc, p, r, f


def naive_attention(x, wq, bq, wk, bk, wv, bv, wo, bo, heads):
    """Per-head loop implementation of multi-head self-attention, float64."""
    x = np.asarray(x, np.float64)
    Tn, D = x.shape
    dk = D // heads
    q, k, v = x @ wq + bq, x @ wk + bk, x @ wv + bv
    outs, weights = [], []
    for h in range(heads):
        sl = slice(h * dk, (h + 1) * dk)
        s = q[:, sl] @ k[:, sl].T / np.sqrt(dk)
        a = np.empty_like(s)
        for i in range(Tn):
            e = np.exp(s[i] - s[i].max())
            a[i] = e / e.sum()
        weights.append(a)
        outs.append(a @ v[:, sl])
    return np.concatenate(outs, axis=1) @ wo + bo, np.stack(weights)


def naive_layer_norm(x, gamma, beta, eps):
    mu = x.mean(axis=-1, keepdims=True)
    sigma = np.sqrt(((x - mu) ** 2).mean(axis=-1, keepdims=True))
    return (x - mu) / (sigma + eps) * gamma + beta


def naive_gelu(x):
    from math import erf, sqrt
    return np.vectorize(lambda v: 0.5 * v * (1 + erf(v / sqrt(2))))(x)


def brute_force_element_count(model) -> int:
    return sum(int(np.asarray(p.data).size) for p in model.parameters())


def micro_end_to_end_gradcheck(entries_per_tensor=5, seed=0, floor=1e-6):
    """Finite-difference check of the full ViT-Micro BCE loss at float64.

    Returns ``{tensor_name: relative_error}`` over ``entries_per_tensor``
    sampled entries per parameter tensor.  ``floor`` bounds the denominator
    from below so analytically-zero gradients (the key bias) compare on an
    absolute scale.
    """
    from wafervit import tensor as T
    from wafervit.trainer import bce_loss
    from wafervit.vit import VitConfig, init_weights

    rng = np.random.default_rng(seed)
    cfg = VitConfig.preset("micro")
    with T.precision(np.float64):
        model = init_weights(cfg, seed, dtype=np.float64)
        # larger-than-init weights so every nonlinearity is exercised
        for name, p in model.named_parameters():
            if p.ndim == 2 and name not in ("cls_token", "pos_embed"):
                p.data = p.data * 5.0
        x = T.Tensor(rng.uniform(0, 1, size=(2, 1, 32, 32)))
        y = rng.integers(0, 2, size=(2, 8)).astype(np.float64)

        def loss_value():
            with T.no_grad():
                return float(bce_loss(model(x), y).data)

        model.zero_grad()
        T.backward(bce_loss(model(x), y))
        errors = {}
        for name, p in model.named_parameters():
            picks = rng.choice(p.size, size=min(entries_per_tensor, p.size), replace=False)
            num = numeric_grad(loss_value, p.data, entries=picks).reshape(-1)[picks]
            ana = p.grad.reshape(-1)[picks]
            denom = max(np.linalg.norm(ana), np.linalg.norm(num), floor)
            errors[name] = float(np.linalg.norm(ana - num) / denom)
    return errors
