"""Shared helpers: plain-numpy oracles kept independent of the autodiff path."""

import numpy as np
import pytest

from semvis.model import Model, ModelConfig
from semvis.text import Vocab


def naive_conv2d(x, kernel, stride, pad):
    """Quadruple-loop cross-correlation."""
    cin, h, w = x.shape
    cout, _, kh, kw = kernel.shape
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad)))
    h_out = (h + 2 * pad - kh) // stride + 1
    w_out = (w + 2 * pad - kw) // stride + 1
    out = np.zeros((cout, h_out, w_out))
    for co in range(cout):
        for i in range(h_out):
            for j in range(w_out):
                patch = xp[:, i * stride:i * stride + kh, j * stride:j * stride + kw]
                out[co, i, j] = np.sum(patch * kernel[co])
    return out


def brute_force_rank(scores, target_is_match):
    """1-based rank of the best-ranked matching column, by pairwise counting
    (strictly greater scores rank earlier; equal scores at lower index too)."""
    best = None
    for j, is_match in enumerate(target_is_match):
        if not is_match:
            continue
        rank = 1
        for l in range(len(scores)):
            if l == j:
                continue
            if scores[l] > scores[j] or (scores[l] == scores[j] and l < j):
                rank += 1
        best = rank if best is None else min(best, rank)
    return best


def oracle_retrieval_ranks(sim, owners):
    """Caption-side and image-side best-match ranks by brute-force counting."""
    n_img, n_cap = sim.shape
    cap_ranks = [brute_force_rank(sim[i], [owners[j] == i for j in range(n_cap)])
                 for i in range(n_img)]
    img_ranks = [brute_force_rank(sim[:, j], [i == owners[j] for i in range(n_img)])
                 for j in range(n_cap)]
    return cap_ranks, img_ranks


def enumerate_batch_loss(images, captions, ids, margin, mining):
    """Plain-float enumeration of the contrastive loss over every triplet."""
    n = len(images)
    total = 0.0
    for i in range(n):
        negatives = [m for m in range(n) if ids[m] != ids[i]]
        cap = [max(0.0, margin - images[i] @ captions[i] + images[i] @ captions[m])
               for m in negatives]
        img = [max(0.0, margin - captions[i] @ images[i] + captions[i] @ images[m])
               for m in negatives]
        if mining == "hard":
            total += max(cap) + max(img)
        else:
            total += sum(cap) / len(cap) + sum(img) / len(img)
    return total / n


MICRO_CONFIG = dict(backbone_channels=4, hidden_channels=(2, 3, 3), adapt_channels=5,
                    embed_dim=6, word_dim=3, sru_layers=2)


@pytest.fixture
def micro_model():
    """A model small enough for exhaustive finite differences (16x16 images)."""
    vocab = Vocab(["red", "circle", "a", "blue", "square", "the", "is"])
    return Model.initialize(ModelConfig(**MICRO_CONFIG), vocab, seed=5)
