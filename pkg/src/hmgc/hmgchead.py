"""Hierarchical multi-granularity classification head.

Three granularity branches (loop, system, component fault) share one trunk
feature vector. Each branch below the root mixes in the hidden state of its
parent branch through a linear combination followed by ReLU, so child
features inherit parent features:

    h_root  = relu(W_root @ trunk)
    h_sys   = relu(W_sys @ trunk + U_sys @ h_root)
    h_fault = relu(W_fault @ trunk + U_fault @ h_sys)
    logits_level = C_level @ h_level + b_level

Decoding is tree-consistent: a path's score is the sum of its per-level
log-softmax terms, the posterior renormalizes exp(score) over the valid
paths only, and the decoded path is the argmax, so the predicted fault is
always a descendant of the predicted system and loop.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensorcore as tc
from .tensorcore import Tensor
from .taxonomy import LabelPath, TaxonomyTree, enumerate_paths, validate_path

__all__ = [
    "HierLogits",
    "HierPrediction",
    "BranchParams",
    "build_branch_params",
    "forward_heads",
    "path_log_scores",
    "consistent_posterior",
    "joint_decode",
    "decode_batch",
    "hier_loss",
    "argmax_consistency_rate",
    "report_line",
]


@dataclass
class HierLogits:
    """Per-level logits; tensors during training, arrays during decoding."""

    root: object
    system: object
    fault: object

    def as_arrays(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        return tuple(
            np.asarray(getattr(level, "data", level), dtype=np.float64)
            for level in (self.root, self.system, self.fault)
        )


@dataclass(frozen=True)
class HierPrediction:
    path: LabelPath
    root_probs: np.ndarray
    system_probs: np.ndarray
    fault_probs: np.ndarray
    joint_confidence: float


class BranchParams:
    """Projections for the three branches over a shared trunk.

    W_* map trunk features to each branch's hidden vector (no bias); U_* mix
    the parent branch's hidden vector into the child branch; C_* (+ bias) map
    hidden vectors to level logits.
    """

    def __init__(self, trunk_width: int, level_sizes: tuple[int, int, int],
                 hidden: int | None = None, seed: int = 0, dtype=np.float32):
        hidden = trunk_width if hidden is None else int(hidden)
        if hidden < 1:
            raise ValueError("branch hidden width must be >= 1")
        self.trunk_width = trunk_width
        self.hidden = hidden
        self.level_sizes = tuple(level_sizes)
        rng = np.random.default_rng(seed)

        def proj(fin, fout):
            std = np.sqrt(2.0 / fin)
            return Tensor(rng.normal(0.0, std, (fin, fout)).astype(dtype),
                          requires_grad=True)

        def classifier(fin, fout):
            std = np.sqrt(1.0 / fin)
            w = Tensor(rng.normal(0.0, std, (fin, fout)).astype(dtype),
                       requires_grad=True)
            b = Tensor(np.zeros(fout, dtype=dtype), requires_grad=True)
            return w, b

        self.w_root = proj(trunk_width, hidden)
        self.w_system = proj(trunk_width, hidden)
        self.w_fault = proj(trunk_width, hidden)
        self.u_system = proj(hidden, hidden)
        self.u_fault = proj(hidden, hidden)
        self.c_root, self.b_root = classifier(hidden, level_sizes[0])
        self.c_system, self.b_system = classifier(hidden, level_sizes[1])
        self.c_fault, self.b_fault = classifier(hidden, level_sizes[2])

    def parameters(self) -> list[tuple[str, Tensor]]:
        return [
            ("head.w_root", self.w_root),
            ("head.w_system", self.w_system),
            ("head.w_fault", self.w_fault),
            ("head.u_system", self.u_system),
            ("head.u_fault", self.u_fault),
            ("head.c_root", self.c_root),
            ("head.b_root", self.b_root),
            ("head.c_system", self.c_system),
            ("head.b_system", self.b_system),
            ("head.c_fault", self.c_fault),
            ("head.b_fault", self.b_fault),
        ]


def build_branch_params(trunk_width: int, tree: TaxonomyTree,
                        hidden: int | None = None, seed: int = 0,
                        dtype=np.float32) -> BranchParams:
    return BranchParams(trunk_width, tree.level_sizes, hidden=hidden, seed=seed,
                        dtype=dtype)


def forward_heads(trunk: Tensor, params: BranchParams) -> HierLogits:
    """Branch forward pass; gradients flow through trunk and all projections."""
    if trunk.data.ndim != 2 or trunk.data.shape[1] != params.trunk_width:
        raise ValueError(
            f"trunk width mismatch: got {trunk.data.shape}, expected "
            f"(N, {params.trunk_width})"
        )
    h_root = tc.relu(tc.dense(trunk, params.w_root))
    h_system = tc.relu(
        tc.add(tc.dense(trunk, params.w_system), tc.dense(h_root, params.u_system))
    )
    h_fault = tc.relu(
        tc.add(tc.dense(trunk, params.w_fault), tc.dense(h_system, params.u_fault))
    )
    return HierLogits(
        root=tc.dense(h_root, params.c_root, params.b_root),
        system=tc.dense(h_system, params.c_system, params.b_system),
        fault=tc.dense(h_fault, params.c_fault, params.b_fault),
    )


def _log_softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max()
    return z - np.log(np.exp(z).sum())


def path_log_scores(tree: TaxonomyTree, logits: HierLogits) -> np.ndarray:
    """Log score of every valid path (ordered by fault index) for one sample."""
    root, system, fault = logits.as_arrays()
    sizes = tree.level_sizes
    for arr, size, name in zip((root, system, fault), sizes, ("root", "system", "fault")):
        if arr.shape != (size,):
            raise ValueError(f"{name} logits must have shape ({size},), got {arr.shape}")
    lr, ls, lf = _log_softmax(root), _log_softmax(system), _log_softmax(fault)
    return np.array(
        [lr[p.loop_idx] + ls[p.system_idx] + lf[p.fault_idx] for p in enumerate_paths(tree)]
    )


def consistent_posterior(tree: TaxonomyTree, logits: HierLogits) -> np.ndarray:
    """Posterior over all valid paths; sums to 1 (computed in float64)."""
    scores = path_log_scores(tree, logits)
    scores = scores - scores.max()
    ez = np.exp(scores)
    return ez / ez.sum()


def _softmax(z: np.ndarray) -> np.ndarray:
    ez = np.exp(z - z.max())
    return ez / ez.sum()


def joint_decode(tree: TaxonomyTree, logits: HierLogits) -> HierPrediction:
    """Highest-scoring valid path (ties break to the lowest fault index)."""
    scores = path_log_scores(tree, logits)
    posterior = consistent_posterior(tree, logits)
    best = int(np.argmax(scores))  # paths are ordered by fault index
    path = enumerate_paths(tree)[best]
    root, system, fault = logits.as_arrays()
    return HierPrediction(
        path=path,
        root_probs=_softmax(root),
        system_probs=_softmax(system),
        fault_probs=_softmax(fault),
        joint_confidence=float(posterior[best]),
    )


def decode_batch(tree: TaxonomyTree, logits: HierLogits) -> list[HierPrediction]:
    root, system, fault = logits.as_arrays()
    return [
        joint_decode(tree, HierLogits(root=root[i], system=system[i], fault=fault[i]))
        for i in range(root.shape[0])
    ]


def hier_loss(tree: TaxonomyTree, logits: HierLogits, labels,
              level_weights=(1.0, 1.0, 1.0)) -> Tensor:
    """Weighted sum of the three per-level cross-entropies."""
    weights = [float(w) for w in level_weights]
    if len(weights) != 3 or min(weights) < 0 or max(weights) == 0:
        raise ValueError("level_weights must be three non-negative values, not all zero")
    labels = list(labels)
    for p in labels:
        if not validate_path(tree, p):
            raise ValueError(f"invalid label path {p}")
    loops = np.array([p.loop_idx for p in labels])
    systems = np.array([p.system_idx for p in labels])
    faults = np.array([p.fault_idx for p in labels])
    ce_root, _ = tc.softmax_cross_entropy(logits.root, loops)
    ce_system, _ = tc.softmax_cross_entropy(logits.system, systems)
    ce_fault, _ = tc.softmax_cross_entropy(logits.fault, faults)
    return tc.add(
        tc.add(tc.scale(ce_root, weights[0]), tc.scale(ce_system, weights[1])),
        tc.scale(ce_fault, weights[2]),
    )


def argmax_consistency_rate(tree: TaxonomyTree, logits: HierLogits) -> float:
    """Fraction of samples whose independent per-level argmaxes already form a
    valid path, before any joint decoding."""
    root, system, fault = logits.as_arrays()
    n = root.shape[0]
    if n == 0:
        return 0.0
    consistent = 0
    for i in range(n):
        path = LabelPath(
            int(np.argmax(root[i])), int(np.argmax(system[i])), int(np.argmax(fault[i]))
        )
        if validate_path(tree, path):
            consistent += 1
    return consistent / n


def report_line(tree: TaxonomyTree, pred: HierPrediction) -> str:
    """One diagnosis report line per sample."""
    return (
        f"loop={tree.loops[pred.path.loop_idx]} "
        f"system={tree.system_names[pred.path.system_idx]} "
        f"fault={tree.fault_names[pred.path.fault_idx]} "
        f"confidence={pred.joint_confidence:.4f}"
    )
