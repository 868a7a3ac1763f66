"""Independent reference implementations used by the tests."""

import math

import numpy as np

from srderive.corpus import VrCorpus, make_vr
from srderive.retriever import loss_and_grad


def naive_score(fr, vr, w):
    """Triple loop over query tokens, document tokens and dimensions."""
    total = 0.0
    for i in range(len(fr)):
        best = -math.inf
        for j in range(len(vr)):
            dot = 0.0
            for k in range(len(fr[i])):
                dot += float(fr[i][k]) * float(vr[j][k])
            best = max(best, w[j] * dot)
        total += best
    return total


def unit_rows(rng, n, d):
    x = rng.standard_normal((n, d))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


WORDS = ("session token cookie login password reset user account key cipher audit log "
         "input output encode file upload memory secret store access role admin").split()


def random_corpus(rng, n_docs, words=WORDS, lo=4, hi=12):
    recs = []
    for i in range(1, n_docs + 1):
        n = int(rng.integers(lo, hi + 1))
        desc = " ".join(words[int(j)] for j in rng.integers(len(words), size=n))
        recs.append(make_vr(f"5.{1 + (i - 1) // 50}.{1 + (i - 1) % 50}", 5, "Chapter", "Section", desc))
    return VrCorpus(tuple(recs))


def fd_gradient(batch, index, table, h=1e-4, **kw):
    """Central differences of the batch loss in each token weight."""
    _, grad = loss_and_grad(batch, index, table, **kw)
    out = {}
    for t in grad:
        up = table.updated({t: table[t] + h})
        dn = table.updated({t: table[t] - h})
        out[t] = (loss_and_grad(batch, index, up, **kw)[0]
                  - loss_and_grad(batch, index, dn, **kw)[0]) / (2 * h)
    return out
