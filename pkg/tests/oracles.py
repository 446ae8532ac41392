"""Independent reference implementations used only by tests.

Everything here is written straight from the math with plain Python/numpy,
sharing no code with the package: a triple-loop matrix product, a
trapezoidal ROC integration, and a straight-line re-derivation of the full
per-bag forward pass.
"""

import math

import numpy as np


def matmul_triple_loop(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    rows, inner = a.shape
    inner2, cols = b.shape
    assert inner == inner2
    out = np.zeros((rows, cols))
    for i in range(rows):
        for j in range(cols):
            acc = 0.0
            for m in range(inner):
                acc += a[i, m] * b[m, j]
            out[i, j] = acc
    return out


def trapezoid_auc(scores, labels):
    """ROC area by trapezoidal integration over the unique-score thresholds."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    n_pos = int((labels == 1).sum())
    n_neg = int((labels == 0).sum())
    assert n_pos > 0 and n_neg > 0
    points = [(0.0, 0.0)]
    for threshold in np.unique(scores)[::-1]:
        pred = scores >= threshold
        fpr = int((pred & (labels == 0)).sum()) / n_neg
        tpr = int((pred & (labels == 1)).sum()) / n_pos
        points.append((fpr, tpr))
    points.append((1.0, 1.0))
    area = 0.0
    for (x0, y0), (x1, y1) in zip(points, points[1:]):
        area += (x1 - x0) * (y0 + y1) / 2.0
    return area


# -- straight-line forward pass ------------------------------------------------


def _sigmoid(z):
    if z >= 0:
        return 1.0 / (1.0 + math.exp(-z))
    e = math.exp(z)
    return e / (1.0 + e)


def _softmax(values):
    top = max(values)
    exps = [math.exp(v - top) for v in values]
    total = sum(exps)
    return [e / total for e in exps]


def _bce(p, y):
    p = min(max(p, 1e-7), 1.0 - 1e-7)
    return -(y * math.log(p) + (1 - y) * math.log(1.0 - p))


def _two_layer(x, w1, b1, w2, b2, hidden_act):
    h_width = len(b1[0])
    hidden = []
    for j in range(h_width):
        acc = b1[0][j]
        for a in range(len(x)):
            acc += x[a] * w1[a][j]
        hidden.append(hidden_act(acc))
    out = b2[0][0]
    for j in range(h_width):
        out += hidden[j] * w2[j][0]
    return out


def straight_line_forward(
    weights,
    X,
    y,
    k,
    mode,
    attention_on=True,
    global_on=True,
    distill_on=True,
    fusion="gated",
):
    """Re-derive every trace field for one bag, step by step.

    ``weights`` is a plain name -> list-of-lists mapping; ``mode`` is
    "max-p" or "max-pn". Returns a dict keyed like the trace fields.
    """
    w = {name: np.asarray(arr).tolist() for name, arr in weights.items()}
    X = np.asarray(X, dtype=np.float64).tolist()
    K = len(X)
    n = len(X[0])

    # channel 1: per-instance classifier
    probs = [
        _sigmoid(_two_layer(x, w["ins_w1"], w["ins_b1"], w["ins_w2"], w["ins_b2"], lambda v: max(0.0, v)))
        for x in X
    ]

    # channel 2: attention scores, pooled feature, branch classifier
    scores = [
        _two_layer(x, w["att_w1"], w["att_b1"], w["att_w2"], w["att_b2"], math.tanh) for x in X
    ]
    alpha = _softmax(scores)
    pooled = [sum(alpha[i] * X[i][a] for i in range(K)) for a in range(n)]
    branch_z = w["attcls_b"][0][0] + sum(pooled[a] * w["attcls_w"][a][0] for a in range(n))
    branch_prob = _sigmoid(branch_z)

    if distill_on:
        if mode == "max-p":
            ch1 = sorted(range(K), key=lambda i: (-probs[i], i))[: min(k, K)]
            loss_idx = ch1
        else:
            half = min(k // 2, K)
            pos = sorted(range(K), key=lambda i: (-probs[i], i))[:half]
            neg = sorted(range(K), key=lambda i: (probs[i], i))[:half]
            ch1 = pos + neg
            loss_idx = pos
        loss1 = sum(_bce(probs[i], y) for i in loss_idx) / len(loss_idx)
        if attention_on:
            ch2 = sorted(range(K), key=lambda i: (-alpha[i], i))[: min(k, K)]
            loss2 = _bce(branch_prob, y)
            fused_rows = [X[i] for i in ch1] + [X[i] for i in ch2]
        else:
            ch2 = []
            loss2 = 0.0
            fused_rows = [X[i] for i in ch1]
    else:
        ch1, ch2 = [], []
        loss1 = loss2 = 0.0
        fused_rows = list(X)

    # fusion
    m = len(fused_rows)
    if fusion == "gated":
        d = len(w["gate_w"])
        gate_scores = []
        for row in fused_rows:
            s = 0.0
            for jj in range(d):
                av = math.tanh(sum(row[a] * w["gate_v"][a][jj] for a in range(n)))
                au = _sigmoid(sum(row[a] * w["gate_u"][a][jj] for a in range(n)))
                s += av * au * w["gate_w"][jj][0]
            gate_scores.append(s)
        gate = _softmax(gate_scores)
    else:
        gate = [1.0 / m] * m
    fused = [sum(gate[j] * fused_rows[j][a] for j in range(m)) for a in range(n)]

    final_prob = _sigmoid(
        _two_layer(fused, w["final_w1"], w["final_b1"], w["final_w2"], w["final_b2"], lambda v: max(0.0, v))
    )
    loss3 = _bce(final_prob, y)
    if global_on:
        total = (loss1 + loss2) * math.exp(-abs(loss3)) + loss3
    else:
        total = loss1 + loss2 + loss3

    return {
        "instance_probs": probs,
        "attention_weights": alpha,
        "channel1_indices": ch1,
        "channel2_indices": ch2,
        "attention_branch_prob": branch_prob,
        "final_prob": final_prob,
        "loss1": loss1,
        "loss2": loss2,
        "loss3": loss3,
        "total_loss": total,
    }
