"""Object encoder, part-tree decoder, prior-weight head, mask refiner and losses.

Node order carries no meaning: targets are assigned to decoder slots by a
minimum-cost bipartite matching before any per-node loss is taken.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment

from .autodiff import ops
from .autodiff.checkpoint import load_table, save_table, table_to_bytes
from .autodiff.layers import BatchNorm, Conv3d, ConvTranspose3d, GroupNorm, Linear, Module
from .autodiff.ops import ShapeError
from .autodiff.tensor import Tensor, no_grad
from .priorbank import PriorBank
from .taxonomy import N_CHILDREN, Taxonomy
from .voxelgrid import N_ANGLE_BINS, OccupancyGrid, atomic_write_bytes

FEATURE_DIM = 128
LOSS_TERMS = ("semantic", "existence", "adjacency", "orientation", "coarse", "final")
RESOLUTIONS = (16, 32, 64)


@dataclass
class ModelConfig:
    resolution: int = 32
    n_types: int = 18
    k: int = 10
    no_priors: bool = False
    no_message_passing: bool = False
    no_refine: bool = False
    refine_absolute: bool = False
    # final = clip(coarse + residual) instead of sigmoid(coarse + residual)
    refine_additive: bool = False
    bn_momentum: float = 0.9
    loss_weights: dict = field(default_factory=lambda: {t: 1.0 for t in LOSS_TERMS})
    seed: int = 0
    taxonomy_sha256: str = ""
    bank_sha256: str = ""

    def __post_init__(self):
        if self.resolution < 16 or self.resolution % 16:
            raise ValueError(f"resolution must be a multiple of 16, got {self.resolution}")
        if self.no_refine and (self.refine_absolute or self.refine_additive):
            raise ValueError("no_refine cannot be combined with another refine mode")
        if self.refine_absolute and self.refine_additive:
            raise ValueError("refine_absolute and refine_additive are exclusive")
        weights = {t: 1.0 for t in LOSS_TERMS}
        unknown = set(self.loss_weights) - set(LOSS_TERMS)
        if unknown:
            raise ValueError(f"unknown loss terms {sorted(unknown)}")
        weights.update({k: float(v) for k, v in self.loss_weights.items()})
        self.loss_weights = weights

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f for f in cls.__dataclass_fields__}
        return cls(**{k: v for k, v in d.items() if k in known})


def _trace(trace, name, t: Tensor):
    if trace is not None:
        trace.append((name, tuple(t.shape[1:])))


# ---------------------------------------------------------------------------
# networks


class Encoder(Module):
    """Four conv/GN/ReLU blocks; the final pool collapses whatever spatial extent remains."""

    def __init__(self, rng, resolution: int):
        self.resolution = resolution
        self.conv0 = Conv3d(rng, 1, 16, 5, 2, 2)
        self.gnorm0 = GroupNorm(16)
        self.conv1 = Conv3d(rng, 16, 32, 3, 1, 1)
        self.gnorm1 = GroupNorm(32)
        self.conv2 = Conv3d(rng, 32, 64, 5, 2, 2)
        self.gnorm2 = GroupNorm(64)
        self.conv3 = Conv3d(rng, 64, 128, 1, 1, 0)
        self.gnorm3 = GroupNorm(128)
        self.last_pool = resolution // 16

    def __call__(self, x: Tensor, trace=None) -> Tensor:
        r = self.resolution
        if x.ndim != 5 or x.shape[1:] != (1, r, r, r):
            raise ShapeError(f"encoder: expected (N, 1, {r}, {r}, {r}), got {x.shape}")
        h = x
        blocks = [(self.conv0, self.gnorm0, 2), (self.conv1, self.gnorm1, 2),
                  (self.conv2, self.gnorm2, self.last_pool), (self.conv3, self.gnorm3, None)]
        for i, (conv, gn, pool) in enumerate(blocks):
            h = conv(h)
            _trace(trace, f"conv{i}", h)
            h = gn(h)
            _trace(trace, f"gnorm{i}", h)
            h = ops.relu(h)
            _trace(trace, f"relu{i}", h)
            if pool is not None and pool > 1:
                h = ops.max_pool3d(h, pool)
                _trace(trace, f"pool{i + 1}", h)
        if h.shape[2:] != (1, 1, 1):
            raise ShapeError(f"encoder: spatial extent {h.shape[2:]} did not collapse to 1")
        h = ops.reshape(h, (h.shape[0], FEATURE_DIM))
        _trace(trace, "flat0", h)
        return h


class OrientationHead(Module):
    def __init__(self, rng):
        self.lin0 = Linear(rng, FEATURE_DIM, FEATURE_DIM)
        self.lin1 = Linear(rng, FEATURE_DIM, N_ANGLE_BINS)

    def __call__(self, z: Tensor) -> Tensor:
        return self.lin1(ops.relu(self.lin0(z)))


@dataclass
class DecodedTree:
    raw: Tensor  # (B, 10, 128) child latents before message passing
    exist: Tensor  # (B, 10)
    edges: Tensor  # (B, 10, 10) raw, unsymmetrized
    semantic: Tensor  # (B, 10, T)
    latent: Tensor  # (B, 10, 128) final child latents z'_k


def _offdiag(n: int) -> np.ndarray:
    return (1.0 - np.eye(n))[None, :, :, None]


class ChildDecoder(Module):
    def __init__(self, rng, n_types: int, message_passing: bool = True):
        n, d = N_CHILDREN, FEATURE_DIM
        self.message_passing = message_passing
        self.lin0 = Linear(rng, d, n * d)
        self.node_exist = Linear(rng, d, 1)
        self.lin1 = Linear(rng, 2 * d, d)
        self.edge_exist = Linear(rng, d, 1)
        self.lin2 = Linear(rng, 3 * d, d)
        self.node_sem = Linear(rng, d, n_types)
        self.lin3 = Linear(rng, d, d)

    def __call__(self, z: Tensor, edge_override=None, trace=None) -> DecodedTree:
        n, d = N_CHILDREN, FEATURE_DIM
        b = z.shape[0]
        h = self.lin0(z)
        _trace(trace, "lin0", h)
        h = ops.relu(h)
        _trace(trace, "relu0", h)
        raw = ops.reshape(h, (b, n, d))
        _trace(trace, "reshape0", raw)
        exist = self.node_exist(raw)
        _trace(trace, "node_exist", exist)

        flat = ops.reshape(raw, (b * n, d))
        base = (np.arange(b) * n)[:, None, None]
        left = ops.take(flat, base + np.arange(n)[None, :, None] + np.zeros((1, 1, n), np.int64))
        right = ops.take(flat, base + np.zeros((1, n, 1), np.int64) + np.arange(n)[None, None, :])
        pairs = ops.concat([left, right], axis=-1)
        _trace(trace, "concat0", pairs)
        feat = self.lin1(pairs)
        _trace(trace, "lin1", feat)
        feat = ops.relu(feat)
        _trace(trace, "relu1", feat)
        edges = self.edge_exist(feat)
        _trace(trace, "edge_exist", edges)
        if edge_override is not None:
            forced = np.broadcast_to(np.asarray(edge_override, dtype=z.dtype), (b, n, n))
            edges = Tensor(forced.reshape(b, n, n, 1).copy())

        if self.message_passing:
            gate = ops.mul(ops.sigmoid(edges), Tensor(_offdiag(n).astype(z.dtype)))
            gated = ops.mul(feat, gate)
            mp = ops.concat([raw, ops.sum(gated, axis=2), ops.max(gated, axis=2)], axis=-1)
        else:
            mp = ops.concat([raw, Tensor(np.zeros((b, n, 2 * d), z.dtype))], axis=-1)
        _trace(trace, "mp", mp)
        h2 = self.lin2(mp)
        _trace(trace, "lin2", h2)
        h2 = ops.relu(h2)
        _trace(trace, "relu2", h2)
        sem = self.node_sem(h2)
        _trace(trace, "node_sem", sem)
        h3 = self.lin3(h2)
        _trace(trace, "lin3", h3)
        latent = ops.relu(h3)
        _trace(trace, "relu3", latent)
        return DecodedTree(
            raw=raw,
            exist=ops.reshape(exist, (b, n)),
            edges=ops.reshape(edges, (b, n, n)),
            semantic=sem,
            latent=latent,
        )


class Refiner(Module):
    def __init__(self, rng, momentum: float = 0.9):
        self.conv0 = Conv3d(rng, 2, 8, 3, 1, 1)
        self.bnorm0 = BatchNorm(8, momentum)
        self.conv1 = Conv3d(rng, 8, 16, 3, 1, 1)
        self.bnorm1 = BatchNorm(16, momentum)
        self.conv2 = Conv3d(rng, 16, 8, 3, 1, 1)
        self.bnorm2 = BatchNorm(8, momentum)
        self.conv3 = Conv3d(rng, 8, 1, 1, 1, 0)

    def set_training(self, flag: bool):
        for bn in (self.bnorm0, self.bnorm1, self.bnorm2):
            bn.training = flag

    def __call__(self, coarse: Tensor, scan: Tensor, trace=None) -> Tensor:
        """Residual logits (N, 1, R, R, R) from coarse masks and scans of equal shape."""
        if coarse.shape != scan.shape:
            raise ShapeError(f"refine: coarse {coarse.shape} vs scan {scan.shape}")
        h = ops.concat([coarse, scan], axis=1)
        _trace(trace, "concat0", h)
        for i, (conv, bn) in enumerate([(self.conv0, self.bnorm0), (self.conv1, self.bnorm1),
                                        (self.conv2, self.bnorm2)]):
            h = conv(h)
            _trace(trace, f"conv{i}", h)
            h = bn(h)
            _trace(trace, f"bnorm{i}", h)
            h = ops.relu(h)
            _trace(trace, f"relu{i}", h)
        h = self.conv3(h)
        _trace(trace, "conv3", h)
        return h


class DirectDecoder(Module):
    """Mask decoder used when priors are ablated: z'_k -> transposed convolutions -> logits."""

    def __init__(self, rng, resolution: int):
        self.base = resolution // 8
        self.lin = Linear(rng, FEATURE_DIM, 16 * self.base ** 3)
        self.up0 = ConvTranspose3d(rng, 16, 16, 4, 2, 1)
        self.up1 = ConvTranspose3d(rng, 16, 8, 4, 2, 1)
        self.up2 = ConvTranspose3d(rng, 8, 1, 4, 2, 1)

    def __call__(self, latent: Tensor) -> Tensor:
        n = latent.shape[0]
        s = self.base
        h = ops.relu(ops.reshape(self.lin(latent), (n, 16, s, s, s)))
        h = ops.relu(self.up0(h))
        h = ops.relu(self.up1(h))
        return self.up2(h)


# ---------------------------------------------------------------------------
# prior composition and refinement


def prior_columns(bank: PriorBank, part_type: int) -> np.ndarray:
    start = bank.offsets()[part_type]
    return start + np.arange(bank.n_priors(part_type))


def compose_coarse_mask(phi_row: Tensor, part_type: int, rotation: int, bank: PriorBank) -> tuple[Tensor, Tensor]:
    """Soft-weighted sum of the type's rotated priors.

    ``phi_row`` is the (1, n_types*K) output of the prior-weight head for one
    node. Returns (coarse (1, R^3), weights (1, M_t)).
    """
    if bank.n_priors(part_type) == 0:
        raise KeyError(f"part type {part_type} has no priors in this bank")
    w = ops.softmax(ops.take(phi_row, prior_columns(bank, part_type), axis=1), axis=-1)
    stack = bank.prior_stack(part_type, rotation)
    coarse = ops.linear(w, Tensor(np.ascontiguousarray(stack.T, dtype=phi_row.dtype)))
    return ops.clip(coarse, 0.0, 1.0), w


def coarse_numpy(phi_row: np.ndarray, part_type: int, rotation: int, bank: PriorBank) -> np.ndarray:
    logits = phi_row[prior_columns(bank, part_type)].astype(np.float64)
    w = np.exp(logits - logits.max())
    w /= w.sum()
    return np.clip(w @ bank.prior_stack(part_type, rotation), 0.0, 1.0)


def final_from(coarse: Tensor, residual: Tensor, config: ModelConfig) -> tuple[Tensor, bool]:
    """Final mask as (tensor, is_logits)."""
    if config.no_refine:
        return coarse, False
    if config.refine_absolute:
        return residual, True
    if config.refine_additive:
        return ops.clip(ops.add(coarse, residual), 0.0, 1.0), False
    return ops.add(coarse, residual), True


# ---------------------------------------------------------------------------
# matching


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    return np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))


def log_softmax(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    m = x.max(axis=-1, keepdims=True)
    return x - m - np.log(np.exp(x - m).sum(axis=-1, keepdims=True))


def mask_iou(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """IoU between boolean masks broadcast over leading axes; 1 when both empty."""
    inter = np.logical_and(a, b).sum(axis=-1)
    union = np.logical_or(a, b).sum(axis=-1)
    return np.where(union == 0, 1.0, inter / np.maximum(union, 1))


def matching_cost(semantic_logits: np.ndarray, node_masks: np.ndarray, target_types: Sequence[int],
                  target_masks: np.ndarray, lam_sem: float = 1.0, lam_geo: float = 1.0) -> np.ndarray:
    """(N, P) cost: CE of the node's semantics against the part type plus 1 - IoU.

    ``node_masks`` is boolean, either (N, V) or (N, P, V) when a node's mask
    depends on the part type it is compared against.
    """
    logp = log_softmax(semantic_logits)
    ce = -logp[:, np.asarray(target_types, dtype=np.int64)]
    tm = np.asarray(target_masks, bool)
    if node_masks.ndim == 2:
        iou = mask_iou(node_masks[:, None, :], tm[None, :, :])
    else:
        iou = mask_iou(node_masks, tm[None, :, :])
    return lam_sem * ce + lam_geo * (1.0 - iou)


@dataclass
class Assignment:
    target_of: np.ndarray  # (N,) target index per node, -1 if unmatched
    cost: float

    @property
    def pairs(self) -> list[tuple[int, int]]:
        """(node, target) pairs ordered by target index."""
        out = [(int(k), int(j)) for k, j in enumerate(self.target_of) if j >= 0]
        return sorted(out, key=lambda p: p[1])

    @property
    def existence_targets(self) -> np.ndarray:
        return (self.target_of >= 0).astype(np.float64)


def match_children(cost: np.ndarray) -> Assignment:
    """Hungarian assignment of targets (columns) to nodes (rows)."""
    cost = np.asarray(cost, dtype=np.float64)
    n_nodes, n_targets = cost.shape
    if n_targets > n_nodes:
        raise ValueError(f"{n_targets} targets exceed {n_nodes} nodes")
    target_of = -np.ones(n_nodes, dtype=np.int64)
    if n_targets == 0:
        return Assignment(target_of, 0.0)
    rows, cols = linear_sum_assignment(cost)
    target_of[rows] = cols
    return Assignment(target_of, float(cost[rows, cols].sum()))


# ---------------------------------------------------------------------------
# losses


@dataclass
class LossBreakdown:
    semantic: float
    existence: float
    adjacency: float
    orientation: float
    coarse: float | None
    final: float
    total: float
    weights: dict

    def terms(self) -> dict:
        return {t: getattr(self, t) for t in LOSS_TERMS}

    def to_dict(self) -> dict:
        d = self.terms()
        d["total"] = self.total
        return d


@dataclass
class TrainItem:
    scan: np.ndarray  # (R, R, R)
    rotation: int
    types: list[int]
    masks: np.ndarray  # (P, R^3) float
    adjacency: np.ndarray  # (P, P) bool

    @classmethod
    def from_sample(cls, sample, scan: OccupancyGrid | None = None) -> "TrainItem":
        scan = scan if scan is not None else sample.scan
        masks = np.stack([g.values.reshape(-1) for g in sample.target.masks])
        return cls(scan.values, sample.rotation, list(sample.target.types), masks,
                   np.asarray(sample.target.adjacency, bool))


def _weighted_total(terms: dict, weights: dict) -> Tensor:
    total = None
    for name in LOSS_TERMS:
        t = terms.get(name)
        if t is None:
            continue
        part = ops.mul(t, float(weights[name]))
        total = part if total is None else ops.add(total, part)
    return total


def compute_losses(semantic: Tensor, exist: Tensor, edges: Tensor, orient: Tensor, coarse: Tensor | None,
                   final: Tensor, final_is_logits: bool, items: Sequence[TrainItem],
                   assignments: Sequence[Assignment], weights: dict) -> tuple[Tensor, LossBreakdown]:
    """Per-term losses averaged over the batch.

    ``coarse`` and ``final`` hold one row per matched node, objects in batch
    order and each object's nodes in ``Assignment.pairs`` order. ``coarse`` is
    None when the model has no prior path.
    """
    b, n = exist.shape
    dtype = exist.dtype
    n_types = semantic.shape[-1]
    sem_flat = ops.reshape(semantic, (b * n, n_types))
    edge_flat = ops.reshape(edges, (b * n * n,))
    per_term: dict[str, list[Tensor]] = {t: [] for t in LOSS_TERMS}
    start = 0
    for i, (it, asg) in enumerate(zip(items, assignments)):
        pairs = asg.pairs
        nodes = [k for k, _ in pairs]
        sel = np.arange(start, start + len(pairs))
        start += len(pairs)
        per_term["semantic"].append(ops.cross_entropy_logits(
            ops.take(sem_flat, [i * n + k for k in nodes]), [it.types[j] for _, j in pairs]))
        per_term["existence"].append(ops.bce_with_logits(
            ops.take(exist, [i]), asg.existence_targets[None].astype(dtype)))
        if len(pairs) >= 2:
            a_idx, b_idx, tgt = [], [], []
            for p in range(len(pairs)):
                for q in range(p + 1, len(pairs)):
                    kp, jp = pairs[p]
                    kq, jq = pairs[q]
                    a_idx.append(i * n * n + kp * n + kq)
                    b_idx.append(i * n * n + kq * n + kp)
                    tgt.append(float(it.adjacency[jp, jq]))
            score = ops.mul(ops.add(ops.take(edge_flat, a_idx), ops.take(edge_flat, b_idx)), 0.5)
            per_term["adjacency"].append(ops.bce_with_logits(score, np.asarray(tgt, dtype)))
        else:
            per_term["adjacency"].append(Tensor(np.zeros((), dtype)))
        per_term["orientation"].append(ops.cross_entropy_logits(ops.take(orient, [i]), [it.rotation]))
        tm = np.stack([it.masks[j] for _, j in pairs]).astype(dtype)
        if coarse is not None:
            per_term["coarse"].append(ops.mse(ops.take(coarse, sel), tm))
        f_rows = ops.take(final, sel)
        if final_is_logits:
            per_term["final"].append(ops.bce_with_logits(f_rows, tm))
        else:
            per_term["final"].append(ops.binary_cross_entropy(f_rows, tm))
    if start != final.shape[0]:
        raise ShapeError(f"losses: {final.shape[0]} mask rows for {start} matched nodes")

    terms = {}
    for name, vals in per_term.items():
        if not vals:
            continue
        acc = vals[0]
        for t in vals[1:]:
            acc = ops.add(acc, t)
        terms[name] = ops.mul(acc, 1.0 / b)
    total = _weighted_total(terms, weights)
    breakdown = LossBreakdown(
        **{t: (float(terms[t].data) if t in terms else None) for t in LOSS_TERMS},
        total=float(total.data),
        weights=dict(weights),
    )
    return total, breakdown


# ---------------------------------------------------------------------------
# the full model


@dataclass
class PartNodePrediction:
    latent: np.ndarray
    existence_logit: float
    semantic_logits: np.ndarray
    part_type: int
    coarse: OccupancyGrid | None = None
    refined: OccupancyGrid | None = None

    @property
    def existence(self) -> float:
        return float(sigmoid(self.existence_logit))


@dataclass
class PartTreePrediction:
    nodes: list[PartNodePrediction]
    edge_logits: np.ndarray
    orientation_logits: np.ndarray
    class_name: str = ""
    keep_threshold: float = 0.5

    @property
    def rotation(self) -> int:
        # np.argmax returns the first maximum, so ties go to the lowest bin
        return int(np.argmax(self.orientation_logits))

    def edge_scores(self) -> np.ndarray:
        s = (self.edge_logits + self.edge_logits.T) / 2.0
        np.fill_diagonal(s, -np.inf)
        return s

    def kept(self, threshold: float | None = None) -> list[int]:
        t = self.keep_threshold if threshold is None else threshold
        return [i for i, n in enumerate(self.nodes) if n.existence > t]

    def adjacency(self, threshold: float = 0.5) -> np.ndarray:
        idx = self.kept()
        p = sigmoid(self.edge_scores()[np.ix_(idx, idx)])
        return p > threshold

    @property
    def confidence(self) -> float:
        idx = self.kept()
        return float(np.mean([self.nodes[i].existence for i in idx])) if idx else 0.0


class PartCompletionModel(Module):
    def __init__(self, config: ModelConfig):
        self.config = config
        rng = np.random.default_rng([config.seed, 101])
        self.encoder = Encoder(rng, config.resolution)
        self.orientation = OrientationHead(rng)
        self.decoder = ChildDecoder(rng, config.n_types, not config.no_message_passing)
        if config.no_priors:
            self.direct = DirectDecoder(rng, config.resolution)
        else:
            self.phi = Linear(rng, FEATURE_DIM, config.n_types * config.k)
        if not config.no_refine:
            self.refiner = Refiner(rng, config.bn_momentum)

    # -- parameters ------------------------------------------------------------

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def state_table(self) -> dict[str, np.ndarray]:
        table = {name: p.data for name, p in self.named_parameters()}
        table.update({f"buffer:{name}": b for name, b in self.named_buffers()})
        return table

    def load_state_table(self, table: dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        buffers = dict(self.named_buffers())
        expected = set(params) | {f"buffer:{b}" for b in buffers}
        if set(table) != expected:
            missing = sorted(expected - set(table))
            extra = sorted(set(table) - expected)
            raise ValueError(f"checkpoint mismatch: missing {missing[:5]}, unexpected {extra[:5]}")
        for name, p in params.items():
            if table[name].shape != p.shape:
                raise ValueError(f"{name}: checkpoint shape {table[name].shape} != {p.shape}")
            p.data = np.array(table[name], dtype=p.dtype)
        for name, buf in buffers.items():
            buf[...] = table[f"buffer:{name}"]

    def astype(self, dtype) -> "PartCompletionModel":
        for _, p in self.named_parameters():
            p.data = p.data.astype(dtype)
        for mod in self._batchnorms():
            mod.state.running_mean = mod.state.running_mean.astype(dtype)
            mod.state.running_var = mod.state.running_var.astype(dtype)
        return self

    def _batchnorms(self):
        if self.config.no_refine:
            return []
        return [self.refiner.bnorm0, self.refiner.bnorm1, self.refiner.bnorm2]

    def set_training(self, flag: bool):
        if not self.config.no_refine:
            self.refiner.set_training(flag)

    @property
    def dtype(self):
        return self.encoder.conv0.weight.dtype

    # -- forward pieces --------------------------------------------------------

    def encode(self, scans: np.ndarray, trace=None) -> Tensor:
        r = self.config.resolution
        x = np.asarray(scans, dtype=self.dtype)
        if x.ndim == 3:
            x = x[None]
        return self.encoder(Tensor(x.reshape((x.shape[0], 1) + x.shape[1:])), trace)

    def _scan_tensor(self, scans: np.ndarray) -> np.ndarray:
        r = self.config.resolution
        return np.asarray(scans, dtype=self.dtype).reshape(-1, 1, r, r, r)

    def _node_masks_for_matching(self, phi_or_direct: np.ndarray, item: TrainItem, bank: PriorBank | None):
        """Boolean node masks used in the geometric part of the matching cost."""
        if self.config.no_priors:
            return phi_or_direct > 0.0  # direct logits; sigmoid > 0.5
        v = item.masks.shape[1]
        n = phi_or_direct.shape[0]
        out = np.zeros((n, len(item.types), v), bool)
        for t in sorted(set(item.types)):
            cols = [j for j, tt in enumerate(item.types) if tt == t]
            if bank.n_priors(t) == 0:
                continue
            for k in range(n):
                m = coarse_numpy(phi_or_direct[k], t, item.rotation, bank) > 0.5
                out[k, cols] = m
        return out

    def batch_loss(self, items: Sequence[TrainItem], bank: PriorBank | None,
                   assignments: Sequence[Assignment] | None = None):
        """Teacher-forced training loss over a batch.

        Priors are composed with the ground-truth rotation and the matched
        target's part type. Returns (total tensor, LossBreakdown, assignments).
        """
        cfg = self.config
        b = len(items)
        n, r = N_CHILDREN, cfg.resolution
        v = r ** 3
        scans = np.stack([it.scan for it in items])
        z = self.encode(scans)
        orient = self.orientation(z)
        tree = self.decoder(z)
        latent_flat = ops.reshape(tree.latent, (b * n, FEATURE_DIM))
        if cfg.no_priors:
            head = ops.reshape(self.direct(latent_flat), (b * n, v))
        else:
            head = ops.reshape(self.phi(latent_flat), (b * n, cfg.n_types * cfg.k))

        if assignments is None:
            assignments = []
            for i, it in enumerate(items):
                rows = head.data[i * n:(i + 1) * n]
                node_masks = self._node_masks_for_matching(rows, it, bank)
                cost = matching_cost(tree.semantic.data[i], node_masks, it.types, it.masks > 0.5)
                assignments.append(match_children(cost))

        # gather matched nodes across the batch
        rows, obj_of, types = [], [], []
        for i, (it, asg) in enumerate(zip(items, assignments)):
            for k, j in asg.pairs:
                rows.append(i * n + k)
                obj_of.append(i)
                types.append(it.types[j])
        rows = np.asarray(rows, np.int64)
        obj_of = np.asarray(obj_of, np.int64)

        if cfg.no_priors:
            coarse = ops.sigmoid(ops.take(head, rows))
        else:
            pieces = []
            for row, t, i in zip(rows, types, obj_of):
                if bank.n_priors(t) == 0:
                    # type unseen when the bank was built: start the refiner from empty space
                    pieces.append(Tensor(np.zeros((1, v), self.dtype)))
                    continue
                c, _ = compose_coarse_mask(ops.take(head, [row]), t, items[i].rotation, bank)
                pieces.append(c)
            coarse = ops.concat(pieces, axis=0)

        if cfg.no_refine:
            final, is_logits = coarse, False
        else:
            scan_rows = self._scan_tensor(scans[obj_of])
            residual = self.refiner(ops.reshape(coarse, (len(rows), 1, r, r, r)), Tensor(scan_rows))
            final, is_logits = final_from(coarse, ops.reshape(residual, (len(rows), v)), cfg)

        total, breakdown = compute_losses(tree.semantic, tree.exist, tree.edges, orient,
                                          None if cfg.no_priors else coarse, final, is_logits,
                                          items, assignments, cfg.loss_weights)
        return total, breakdown, assignments

    # -- inference --------------------------------------------------------------

    def predict(self, scans: Sequence[OccupancyGrid] | OccupancyGrid, class_names: Sequence[str] | str,
                taxonomy: Taxonomy, bank: PriorBank | None, threshold: float = 0.5,
                edge_override=None) -> list[PartTreePrediction] | PartTreePrediction:
        single = isinstance(scans, OccupancyGrid)
        if single:
            scans, class_names = [scans], [class_names]
        for s in scans:
            if s.resolution != self.config.resolution:
                raise ShapeError(f"scan resolution {s.resolution} != model resolution {self.config.resolution}")
        cfg = self.config
        n, r = N_CHILDREN, cfg.resolution
        v = r ** 3
        self.set_training(False)
        try:
            with no_grad():
                arr = np.stack([s.values for s in scans])
                z = self.encode(arr)
                orient = self.orientation(z).data
                tree = self.decoder(z, edge_override=edge_override)
                latent = tree.latent.data
                flat = latent.reshape(-1, FEATURE_DIM)
                if cfg.no_priors:
                    direct = self.direct(Tensor(flat)).data.reshape(len(scans), n, v)
                else:
                    phi = self.phi(Tensor(flat)).data.reshape(len(scans), n, -1)
                preds, jobs = [], []
                for i, cls in enumerate(class_names):
                    allowed = list(taxonomy.parts_of(cls))
                    if not cfg.no_priors:
                        allowed = [t for t in allowed if bank.n_priors(t) > 0] or allowed
                    rot = int(np.argmax(orient[i]))
                    nodes = []
                    for k in range(n):
                        sem = tree.semantic.data[i, k]
                        t = allowed[int(np.argmax(sem[allowed]))]
                        node = PartNodePrediction(latent[i, k].copy(), float(tree.exist.data[i, k]), sem.copy(), t)
                        nodes.append(node)
                        if node.existence > threshold:
                            if cfg.no_priors:
                                coarse = sigmoid(direct[i, k])
                            elif bank.n_priors(t) > 0:
                                coarse = coarse_numpy(phi[i, k], t, rot, bank)
                            else:
                                coarse = np.zeros(r ** 3)
                            jobs.append((i, k, coarse))
                    preds.append(PartTreePrediction(nodes, tree.edges.data[i].copy(), orient[i].copy(),
                                                    class_names[i], threshold))
                if jobs:
                    coarse = np.stack([c for _, _, c in jobs]).astype(self.dtype)
                    if cfg.no_refine:
                        final = coarse
                    else:
                        scan_rows = self._scan_tensor(arr[[i for i, _, _ in jobs]])
                        ct = Tensor(coarse)
                        res = self.refiner(ops.reshape(ct, (len(jobs), 1, r, r, r)), Tensor(scan_rows))
                        out, is_logits = final_from(ct, ops.reshape(res, (len(jobs), v)), cfg)
                        final = sigmoid(out.data) if is_logits else out.data
                    for (i, k, _), c, f in zip(jobs, coarse, final):
                        node = preds[i].nodes[k]
                        node.coarse = OccupancyGrid.soft(np.clip(c, 0, 1).reshape(r, r, r).astype(np.float32))
                        node.refined = OccupancyGrid.soft(np.clip(f, 0, 1).reshape(r, r, r).astype(np.float32))
        finally:
            self.set_training(True)
        return preds[0] if single else preds


# ---------------------------------------------------------------------------
# persistence

CONFIG_NAME = "model.json"
WEIGHTS_NAME = "model.pfck"


def save_model(model: PartCompletionModel, directory) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    save_table(model.state_table(), d / WEIGHTS_NAME)
    text = json.dumps(model.config.to_dict(), indent=1, sort_keys=True) + "\n"
    atomic_write_bytes(d / CONFIG_NAME, text.encode())


def load_model(directory) -> PartCompletionModel:
    d = Path(directory)
    config = ModelConfig.from_dict(json.loads((d / CONFIG_NAME).read_text()))
    model = PartCompletionModel(config)
    model.load_state_table(load_table(d / WEIGHTS_NAME))
    return model


def model_digest(model: PartCompletionModel) -> str:
    import hashlib

    return hashlib.sha256(table_to_bytes(model.state_table())).hexdigest()
