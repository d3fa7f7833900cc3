"""Pure-numpy implementation of the fused prompt-loss kernel."""

import numpy as np

SEM_MAX = 0
SEM_SUM = 1
_TINY = 1e-12


def _pairs(sizes):
    return [(m, i, j) for m, k in enumerate(sizes) for i in range(k) for j in range(i + 1, k)]


def prompt_losses(E, e_T, combos, sizes, delta_I, feats, feat_attr, feat_cat,
                  lam, sem_mode, use_dir, normalize):
    """Losses and their gradient with respect to the prompt embeddings.

    Args:
        E: ``(P, d)`` encoded inclusive prompts, one per combination.
        e_T: ``(d,)`` encoding of the base prompt.
        combos: ``(P, M)`` int64 category index per attribute.
        sizes: ``(M,)`` int64 category counts.
        delta_I: ``(n_pairs, d)`` image directions, pairs ordered by
            attribute then ``i < j``. Ignored unless ``use_dir``.
        feats, feat_attr, feat_cat: batch image features with the attribute
            and category each image was drawn for.
        lam: semantic-consistency margin.
        sem_mode: ``SEM_MAX`` (one hinge per pair at the worst prompt) or
            ``SEM_SUM`` (hinge summed over the pair's prompts).
        use_dir: take the gradient of the directional loss, else of the
            cosine fallback.
        normalize: L2-normalize the prompt direction before the inner product.

    Returns:
        ``(l_dir, l_cos, l_sem, grad_E)``; ``l_dir`` is NaN when not
        ``use_dir``, ``l_cos`` is NaN for an empty image batch.
    """
    P, d = E.shape
    grad = np.zeros_like(E)
    pairs = _pairs(sizes)

    masks = [[combos[:, m] == i for i in range(k)] for m, k in enumerate(sizes)]
    counts = [[mk.sum() for mk in row] for row in masks]

    # pair operator: row p holds +1/|P_i| on P_i and -1/|P_j| on P_j
    W = np.zeros((len(pairs), P))
    for p, (m, i, j) in enumerate(pairs):
        W[p, masks[m][i]] += 1.0 / counts[m][i]
        W[p, masks[m][j]] -= 1.0 / counts[m][j]

    l_dir = np.nan
    if use_dir and pairs:
        dP = W @ E
        G = np.empty_like(dP)
        if normalize:
            norms = np.linalg.norm(dP, axis=1)
            l_dir = 0.0
            for p in range(len(pairs)):
                if norms[p] < _TINY:
                    l_dir += 1.0
                    G[p] = 0.0
                    continue
                v = dP[p] / norms[p]
                c = float(delta_I[p] @ v)
                l_dir += 1.0 - c
                G[p] = -(delta_I[p] - c * v) / norms[p]
        else:
            l_dir = float(np.sum(1.0 - np.sum(delta_I * dP, axis=1)))
            G = -np.asarray(delta_I, dtype=np.float64)
        grad += W.T @ G
    elif use_dir:
        l_dir = 0.0

    n = feats.shape[0]
    l_cos = np.nan
    if n:
        member = combos[:, feat_attr].T == feat_cat[:, None]
        weights = member / member.sum(axis=1, keepdims=True)
        S = feats @ E.T
        l_cos = float(1.0 - np.mean(np.sum(weights * S, axis=1)))
        if not use_dir:
            grad -= weights.T @ feats / n

    s = E @ e_T
    l_sem = 0.0
    for m, i, j in pairs:
        union = masks[m][i] | masks[m][j]
        if sem_mode == SEM_MAX:
            masked = np.where(union, s, np.inf)
            worst = int(np.argmin(masked))
            h = lam - masked[worst]
            if h > 0:
                l_sem += h
                grad[worst] -= e_T
        else:
            active = union & (s < lam)
            l_sem += float(np.sum(lam - s[active]))
            grad[active] -= e_T
    return l_dir, l_cos, float(l_sem), grad
