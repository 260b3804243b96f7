"""Brute-force reference implementations used by the tests.

These are written independently of the package code: plain loops, floats,
no shared helpers beyond the vocabulary ids.
"""
import math
from itertools import combinations

CLS, SEP = 0, 1


def statements(doc, vocab, window):
    """Sorted list of (s1, s2, e1, e2, x) for every ordered mention pair that fits."""
    out = []
    n = len(doc.tokens)
    for a, b in combinations(doc.mentions, 2):
        if max(a.start, b.start) < min(a.end, b.end):
            continue  # overlapping spans
        first, second = sorted([a, b], key=lambda m: (m.start, m.end))
        lo = min(first.start, second.start)
        hi = max(first.end, second.end)
        if hi - lo > window:
            continue
        centre = (lo + hi) / 2.0
        start = math.floor(centre - window / 2.0)
        start = min(max(start, 0), max(n - window, 0))
        end = min(n, start + window)
        x = tuple([CLS] + [vocab.id_of.get(t, 3) for t in doc.tokens[start:end]] + [SEP])
        s1 = (first.start - start + 1, first.end - start + 1)
        s2 = (second.start - start + 1, second.end - start + 1)
        out.append((s1, s2, first.entity_id, second.entity_id, x))
    return sorted(out)


def label(a, b):
    return int(a.e1 == b.e1 and a.e2 == b.e2)


def kind(a, b):
    same1, same2 = a.e1 == b.e1, a.e2 == b.e2
    if same1 and same2:
        return "positive"
    if same1 or same2:
        return "hard_negative"
    return "uniform_negative"


def pairs(stmts):
    """{(i, j): (label, kind)} over unordered index pairs i < j."""
    return {(i, j): (label(stmts[i], stmts[j]), kind(stmts[i], stmts[j])) for i, j in combinations(range(len(stmts)), 2)}


def sigmoid(z):
    return 1.0 / (1.0 + math.exp(-z))


def double_sum_loss(reps, stmts):
    """Direct double sum over r != r' of the binary log-loss, divided by the number of terms."""
    total, count = 0.0, 0
    for i in range(len(stmts)):
        for j in range(len(stmts)):
            if i == j:
                continue
            z = sum(p * q for p, q in zip(reps[i], reps[j]))
            d = label(stmts[i], stmts[j])
            # 1 - sigmoid(z) evaluated as sigmoid(-z) to avoid cancellation
            total += -(d * math.log(sigmoid(z)) + (1 - d) * math.log(sigmoid(-z)))
            count += 1
    return total / count


def adam_scalar(p, grads, lr, b1=0.9, b2=0.999, eps=1e-8):
    """Textbook Adam on one scalar; returns the parameter trajectory."""
    m = v = 0.0
    traj = []
    for t, g in enumerate(grads, 1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        mhat = m / (1 - b1**t)
        vhat = v / (1 - b2**t)
        p = p - lr * mhat / (math.sqrt(vhat) + eps)
        traj.append(p)
    return traj


def micro_f1(gold, pred, nil):
    tp = sum(1 for g, p in zip(gold, pred) if g == p and g != nil)
    fp = sum(1 for g, p in zip(gold, pred) if p != nil and g != p)
    fn = sum(1 for g, p in zip(gold, pred) if g != nil and g != p)
    prec = tp / (tp + fp) if tp + fp else 0.0
    rec = tp / (tp + fn) if tp + fn else 0.0
    return prec, rec, (2 * prec * rec / (prec + rec) if prec + rec else 0.0)


def finite_difference(loss_fn, tensor, step=1e-3):
    """Central differences of ``loss_fn()`` w.r.t. every element of ``tensor`` (perturbed in place)."""
    import torch

    grad = torch.zeros_like(tensor)
    flat = tensor.data.view(-1)
    g = grad.view(-1)
    with torch.no_grad():
        for idx in range(flat.numel()):
            orig = flat[idx].item()
            flat[idx] = orig + step
            up = float(loss_fn())
            flat[idx] = orig - step
            down = float(loss_fn())
            flat[idx] = orig
            g[idx] = (up - down) / (2 * step)
    return grad


def relative_error(analytic, numeric):
    """max |a - n| / max |n|, or the absolute error when the numeric gradient vanishes."""
    num = float(numeric.abs().max())
    err = float((analytic - numeric).abs().max())
    return err / num if num > 1e-12 else err
