"""Shared test utilities: full-pipeline losses and finite-difference checks."""

import numpy as np

from sdcl import encoder as enc
from sdcl.objectives import in_batch_loss


def pipeline_loss_and_grads(
    params,
    anchor_x,
    pos_x,
    *,
    objective,
    etas=None,
    handling=None,
    classes=None,
    anchor_tokens=None,
):
    """Encode a batch, apply the in-batch objective, and backpropagate.

    Returns (loss, flat gradient vector) over all encoder parameters
    including gamma (zero for non-trainable gamma).
    """
    if anchor_tokens is not None:
        a_emb, a_cache = enc.forward_tokens(params, anchor_tokens)
    else:
        a_emb, a_cache = enc.forward_features(params, anchor_x)
    p_emb, p_cache = enc.forward_features(params, pos_x)
    result = in_batch_loss(
        a_emb,
        p_emb,
        objective=objective,
        gamma=params.gamma,
        etas=etas,
        handling=handling,
        classes=classes,
    )
    grads = enc.backward(params, a_cache, result.d_anchor)
    grads.add_(enc.backward(params, p_cache, result.d_positive))
    grads.gamma += result.d_gamma
    flat = np.concatenate(
        [getattr(grads, name).ravel() for name in params.array_fields()]
        + [np.array([grads.gamma if params.gamma_trainable else 0.0])]
    )
    return result.loss, flat, result


def finite_difference_grad(params, loss_fn, step=1e-5):
    """Central differences of a scalar ``loss_fn(params)`` over flat params."""
    theta = enc.params_to_flat(params)
    fd = np.zeros_like(theta)
    for i in range(theta.size):
        plus = theta.copy()
        plus[i] += step
        minus = theta.copy()
        minus[i] -= step
        fd[i] = (loss_fn(enc.params_from_flat(params, plus)) -
                 loss_fn(enc.params_from_flat(params, minus))) / (2 * step)
    if not params.gamma_trainable:
        fd[-1] = 0.0
    return fd


def assert_grads_close(analytic, fd, rtol=1e-4, atol=1e-8):
    err = np.abs(analytic - fd)
    tol = rtol * np.maximum(np.abs(analytic), np.abs(fd)) + atol
    worst = float(np.max(err - tol))
    assert np.all(err <= tol), f"gradient mismatch; worst violation {worst:.3e}"


def selection_margins_ok(params, anchor_x, pos_x, *, handling, etas, objective, classes,
                         margin=1e-3):
    """True when no hard selection or clamp boundary sits within ``margin``
    of flipping, so central differences stay on one smooth branch."""
    a_emb, _ = enc.forward_features(params, anchor_x)
    p_emb, _ = enc.forward_features(params, pos_x)
    b = a_emb.shape[0]
    floor = np.exp(-params.gamma**2)
    for i in range(b):
        neg_idx = np.concatenate([np.arange(i), np.arange(i + 1, b)])
        sims = p_emb[neg_idx] @ p_emb[i]
        if handling is not None and handling.kind == "remove_by_sim":
            if np.min(np.abs(sims - handling.threshold)) < margin:
                return False
            kept = neg_idx[sims <= handling.threshold]
        elif handling is not None and handling.kind == "resample_by_sim":
            ordered = np.sort(sims)
            kc = handling.keep_count
            if kc < sims.size and ordered[kc] - ordered[kc - 1] < margin:
                return False
            kept = neg_idx[np.argsort(sims, kind="stable")[:kc]]
        elif handling is not None and handling.kind == "remove_by_label":
            kept = neg_idx[np.asarray(classes)[neg_idx] != classes[i]]
            if kept.size == 0:
                return False  # fallback branch: selection depends on sims
        else:
            kept = neg_idx
        if objective == "dcl" and kept.size > 0:
            eta_i = float(etas[i])
            s_neg = a_emb[i] @ p_emb[kept].T
            s_pos = float(a_emb[i] @ p_emb[i])
            if handling is not None and handling.kind == "reweight_by_sim":
                logits = -(p_emb[kept] @ p_emb[i]) / handling.temperature
                logits -= logits.max()
                w = np.exp(logits)
                w *= kept.size / w.sum()
            else:
                w = np.ones(kept.size)
            z0 = (np.sum(w * np.exp(s_neg)) - eta_i * w.sum() * np.exp(s_pos)) / (1 - eta_i)
            if abs(z0 - w.sum() * floor) < margin:
                return False
    return True
