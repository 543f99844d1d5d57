"""Brute-force reference implementations and small builders shared by the test modules."""

from typing import List, Sequence, Tuple

import numpy as np

from packages.data_storage.bag_io import Bag, BagRecord
from packages.model.model_config import ModelConfig
from packages.numerics.tensor import Tensor, no_grad


def tiny_model_config(**overrides) -> ModelConfig:
    values = dict(d_in=6, d_model=4, n_classes=3, n_levels=3, n_experts=4, top_k=2, l_static=1, l_dyn=2,
                  d_state=4, d_conv=2, expand=2, d_hidden=8, d_attn=5, seed=0)
    values.update(overrides)
    return ModelConfig(**values)


def tree_records(fanouts: Sequence[int], n_roots: int) -> List[Tuple[int, Tuple[int, ...], Tuple[int, int]]]:
    """(level, path, coord) of a full tree, level-major, 1-based paths."""
    records = [(1, (i + 1,), (0, i)) for i in range(n_roots)]
    frontier = list(records)
    for fanout in fanouts:
        next_frontier = []
        for level, path, (row, col) in frontier:
            for j in range(fanout):
                next_frontier.append((level + 1, path + (j + 1,), (row * fanout, col * fanout + j)))
        records.extend(next_frontier)
        frontier = next_frontier
    return records


def hierarchy_input(fanouts: Sequence[int] = (2, 2), n_roots: int = 2):
    """Records for build_hierarchy with token ids equal to the record index."""
    return [(level, path, coord, i) for i, (level, path, coord) in enumerate(tree_records(fanouts, n_roots))]


def fixture_bag(d_in: int = 6, seed: int = 0, fanouts: Sequence[int] = (2, 2), n_roots: int = 2,
                label: int = 1, slide_id: str = "fixture") -> Bag:
    """The 2 x 2 x 2 bag (14 tokens) unless other fan-outs are given."""
    rng = np.random.default_rng(seed)
    records = [BagRecord(level=level, path=path, coord=coord,
                         features=rng.standard_normal(d_in).astype(np.float32))
               for level, path, coord in tree_records(fanouts, n_roots)]
    return Bag(slide_id=slide_id, label=label, n_levels=1 + len(fanouts), records=records)


def random_tree_records(rng: np.random.Generator, max_levels: int = 4, max_fanout: int = 4,
                        max_nodes: int = 500):
    """Random hierarchy records (shuffled) with ragged fan-outs."""
    n_levels = int(rng.integers(1, max_levels + 1))
    n_roots = int(rng.integers(1, 6))
    records = []
    frontier = []
    for i in range(n_roots):
        node = (1, (i + 1,), (int(rng.integers(0, 50)), int(rng.integers(0, 50))))
        records.append(node)
        frontier.append(node)
    while frontier and len(records) < max_nodes:
        level, path, coord = frontier.pop(0)
        if level == n_levels:
            continue
        for j in range(int(rng.integers(0, max_fanout + 1))):
            if len(records) >= max_nodes:
                break
            child = (level + 1, path + (j + 1,), (int(rng.integers(0, 200)), int(rng.integers(0, 200))))
            records.append(child)
            frontier.append(child)
    order = rng.permutation(len(records))
    shuffled = [records[i] for i in order]
    return [(level, path, coord, i) for i, (level, path, coord) in enumerate(shuffled)], n_levels


def reference_scan(u, delta, A, B, C, D) -> np.ndarray:
    """Elementwise loops over the recurrence, float64."""
    length, inner = u.shape
    n_state = A.shape[1]
    h = np.zeros((inner, n_state))
    y = np.zeros((length, inner))
    for t in range(length):
        for c in range(inner):
            acc = 0.0
            for s in range(n_state):
                h[c, s] = np.exp(delta[t, c] * A[c, s]) * h[c, s] + delta[t, c] * B[t, s] * u[t, c]
                acc += C[t, s] * h[c, s]
            y[t, c] = acc + D[c] * u[t, c]
    return y


def dense_dispatch(experts, x: np.ndarray, topk_idx: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """Filter-and-loop reference: every expert runs on the tokens that chose it, in sequence order."""
    n_tokens = x.shape[0]
    y = np.zeros_like(x)
    with no_grad():
        for e, expert in enumerate(experts):
            chosen = [i for i in range(n_tokens) if e in list(topk_idx[i])]
            if not chosen:
                continue
            sub = Tensor(np.stack([x[i] for i in chosen]), dtype=x.dtype)
            outputs = expert(sub).data
            for row, i in enumerate(chosen):
                slot = list(topk_idx[i]).index(e)
                y[i] += weights[i, slot] * outputs[row]
    return y


def dense_static(experts, x: np.ndarray, levels: Sequence[int]) -> np.ndarray:
    y = np.zeros_like(x)
    with no_grad():
        for r, expert in enumerate(experts, start=1):
            chosen = [i for i, level in enumerate(levels) if level == r]
            if not chosen:
                continue
            outputs = expert(Tensor(np.stack([x[i] for i in chosen]), dtype=x.dtype)).data
            for row, i in enumerate(chosen):
                y[i] = outputs[row]
    return y


def pair_count_auc(positive: np.ndarray, scores: np.ndarray) -> float:
    pos = scores[positive]
    neg = scores[~positive]
    total = 0.0
    for p in pos:
        for n in neg:
            total += 1.0 if p > n else 0.5 if p == n else 0.0
    return total / (len(pos) * len(neg))


def loop_metrics(labels: Sequence[int], preds: Sequence[int], n_classes: int) -> dict:
    """Counting-loop versions of the macro rates, accuracy and multiclass MCC."""
    present = sorted(set(labels) | set(preds))
    rates = {"f1": [], "sens": [], "spec": [], "ppv": [], "npv": []}

    def ratio(num, den):
        return num / den if den else 0.0

    for c in present:
        tp = fp = fn = tn = 0
        for y, p in zip(labels, preds):
            if y == c and p == c:
                tp += 1
            elif p == c:
                fp += 1
            elif y == c:
                fn += 1
            else:
                tn += 1
        rates["f1"].append(ratio(2 * tp, 2 * tp + fp + fn))
        rates["sens"].append(ratio(tp, tp + fn))
        rates["spec"].append(ratio(tn, tn + fp))
        rates["ppv"].append(ratio(tp, tp + fp))
        rates["npv"].append(ratio(tn, tn + fn))
    out = {name: sum(values) / len(values) for name, values in rates.items()}

    n = len(labels)
    correct = sum(1 for y, p in zip(labels, preds) if y == p)
    out["acc"] = correct / n
    true_counts = [sum(1 for y in labels if y == c) for c in range(n_classes)]
    pred_counts = [sum(1 for p in preds if p == c) for c in range(n_classes)]
    cov = correct * n - sum(t * p for t, p in zip(true_counts, pred_counts))
    den = (n * n - sum(p * p for p in pred_counts)) * (n * n - sum(t * t for t in true_counts))
    out["mcc"] = cov / den ** 0.5 if den else 0.0
    return out


def zero_out_projections(module) -> None:
    """Zero every SSM output projection and FFN second layer below ``module``."""
    for name, param in module.named_parameters():
        if name.endswith("out_proj") or name.endswith("W2"):
            param.data[...] = 0
