"""Boundary-sensitive proposal model.

A temporal evaluation network (TEM) maps a T x D feature sequence to three
per-snippet probability signals (actionness, start, end). Candidate proposals
pair boundary peaks of the start/end signals; each candidate is described by
32 samples of the actionness curve around and inside the interval and scored
by a small dense confidence network (PEM). Soft-NMS decays the scores of
overlapping proposals.

Interval convention: a proposal built from snippet indices (s, e) covers
[s, e + 1) in snippet units, so a single-snippet action is representable.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import nn
from .dataset import FeatureSequence, SnippetTargets
from .errors import ValidationError
from .metrics import tiou_arrays

PROB_EPS = 1e-7
BSP_DIM = 32


@dataclass
class BoundarySignals:
    actionness: np.ndarray  # (T,) in (0, 1)
    start: np.ndarray
    end: np.ndarray

    @property
    def T(self) -> int:
        return self.actionness.shape[0]

    def as_matrix(self) -> np.ndarray:
        """(T, 3) with columns [actionness, start, end]."""
        return np.stack([self.actionness, self.start, self.end], axis=1)

    @classmethod
    def from_matrix(cls, m: np.ndarray) -> "BoundarySignals":
        return cls(actionness=m[:, 0].copy(), start=m[:, 1].copy(), end=m[:, 2].copy())


@dataclass
class Proposal:
    t_start: float
    t_end: float
    start_prob: float
    end_prob: float
    confidence: float = 1.0
    final_score: float = 0.0
    video_id: str = ""

    def interval(self) -> tuple[float, float]:
        return (self.t_start, self.t_end)


@dataclass
class TEMParams:
    """conv(k=3, D->hidden) -> relu -> conv(k=3) -> relu -> conv(k=1, ->3) -> sigmoid."""

    feature_dim: int
    hidden: int
    layers: list[dict]

    @property
    def specs(self) -> tuple:
        return tem_specs(self.feature_dim, self.hidden)


@dataclass
class PEMParams:
    """dense(32->hidden) -> relu -> dense(hidden->1) -> sigmoid."""

    hidden: int
    layers: list[dict]

    @property
    def specs(self) -> tuple:
        return pem_specs(self.hidden)


def tem_specs(feature_dim: int, hidden: int) -> tuple:
    return (
        nn.Conv1dSpec(feature_dim, hidden, 3),
        nn.ReluSpec(),
        nn.Conv1dSpec(hidden, hidden, 3),
        nn.ReluSpec(),
        nn.Conv1dSpec(hidden, 3, 1),
        nn.SigmoidSpec(),
    )


def pem_specs(hidden: int) -> tuple:
    return (
        nn.DenseSpec(BSP_DIM, hidden),
        nn.ReluSpec(),
        nn.DenseSpec(hidden, 1),
        nn.SigmoidSpec(),
    )


def init_tem(rng: np.random.Generator, feature_dim: int, hidden: int = 64) -> TEMParams:
    if hidden < 1:
        raise ValidationError("hidden width must be >= 1")
    return TEMParams(feature_dim, hidden, nn.init_params(tem_specs(feature_dim, hidden), rng))


def init_pem(rng: np.random.Generator, hidden: int = 64) -> PEMParams:
    if hidden < 1:
        raise ValidationError("hidden width must be >= 1")
    return PEMParams(hidden, nn.init_params(pem_specs(hidden), rng))


def tem_forward(params: TEMParams, features) -> BoundarySignals:
    signals, _ = tem_forward_cached(params, features)
    return signals


def tem_forward_cached(params: TEMParams, features):
    """Forward pass keeping layer caches for a subsequent backward."""
    values = features.values if isinstance(features, FeatureSequence) else np.asarray(features)
    if values.ndim != 2 or values.shape[1] != params.feature_dim:
        raise ValidationError(
            f"feature shape {values.shape} incompatible with TEM feature_dim {params.feature_dim}"
        )
    out, caches = nn.net_forward(params.specs, params.layers, values)
    return BoundarySignals.from_matrix(out), caches


def tem_backward(params: TEMParams, caches, grad_signals: np.ndarray):
    """Gradients of all TEM parameters given d(loss)/d(signals) as (T, 3)."""
    _, grads = nn.net_backward(params.specs, params.layers, caches, grad_signals)
    return grads


def balanced_bce(p: np.ndarray, b: np.ndarray) -> tuple[float, np.ndarray]:
    """Class-balanced binary cross entropy over one signal channel.

    L = -(1/T) sum_t [w+ b_t ln p_t + w- (1 - b_t) ln(1 - p_t)] with
    w+ = T / (2 max(n+, 1)), w- = T / (2 max(T - n+, 1)), n+ = sum_t b_t.
    Targets may be soft. Probabilities are clamped to [1e-7, 1 - 1e-7];
    gradients vanish where the clamp is active.
    """
    if p.shape != b.shape:
        raise ValidationError(f"signal/target length mismatch: {p.shape} vs {b.shape}")
    T = p.shape[0]
    pc = np.clip(p, PROB_EPS, 1.0 - PROB_EPS)
    n_pos = float(b.sum())
    w_pos = T / (2.0 * max(n_pos, 1.0))
    w_neg = T / (2.0 * max(T - n_pos, 1.0))
    loss = -(w_pos * b * np.log(pc) + w_neg * (1.0 - b) * np.log(1.0 - pc)).sum() / T
    grad = -(w_pos * b / pc - w_neg * (1.0 - b) / (1.0 - pc)) / T
    grad[(p < PROB_EPS) | (p > 1.0 - PROB_EPS)] = 0.0
    return float(loss), grad


def tem_loss(signals: BoundarySignals, targets: SnippetTargets) -> tuple[float, np.ndarray]:
    """Sum of balanced BCE over the three channels; grad is (T, 3) wrt signals."""
    pred = signals.as_matrix()
    tgt = targets.as_matrix()
    if pred.shape != tgt.shape:
        raise ValidationError(f"signals {pred.shape} vs targets {tgt.shape}")
    total = 0.0
    grad = np.zeros_like(pred)
    for ch in range(3):
        loss_ch, grad[:, ch] = balanced_bce(pred[:, ch], tgt[:, ch])
        total += loss_ch
    return total, grad


# ---------------------------------------------------------------------------
# candidate generation


@dataclass(frozen=True)
class CandidateConfig:
    max_duration: float | None = None  # cap on e - s in snippet indices; None = T
    rel_threshold: float = 0.5         # boundary kept when p > rel_threshold * max(p)


def boundary_candidates(signal: np.ndarray, rel_threshold: float = 0.5) -> list[int]:
    """Indices that are strict local maxima or clear the relative threshold.

    Sequence ends count as local maxima when they beat their single neighbor.
    """
    T = signal.shape[0]
    keep = signal > rel_threshold * signal.max()
    local = np.zeros(T, dtype=bool)
    local[0] = signal[0] > signal[1]
    local[-1] = signal[-1] > signal[-2]
    if T > 2:
        interior = (signal[1:-1] > signal[:-2]) & (signal[1:-1] > signal[2:])
        local[1:-1] = interior
    return [int(i) for i in np.nonzero(keep | local)[0]]


def generate_candidates(
    signals: BoundarySignals,
    cfg: CandidateConfig | None = None,
    top_k: int | None = None,
) -> list[Proposal]:
    """All (start index, end index) pairs of boundary candidates with e > s.

    ``top_k`` keeps only the highest start_prob * end_prob pairs, which avoids
    materializing huge candidate sets from flat early-training signals.
    """
    cfg = cfg or CandidateConfig()
    T = signals.T
    if T < 2:
        raise ValidationError("candidate generation needs T >= 2")
    max_dur = cfg.max_duration if cfg.max_duration is not None else float(T)
    starts = np.asarray(boundary_candidates(signals.start, cfg.rel_threshold))
    ends = np.asarray(boundary_candidates(signals.end, cfg.rel_threshold))
    if starts.size == 0 or ends.size == 0:
        return []
    s_grid, e_grid = np.meshgrid(starts, ends, indexing="ij")
    valid = (e_grid > s_grid) & (e_grid - s_grid <= max_dur)
    s_idx, e_idx = s_grid[valid], e_grid[valid]
    sp = signals.start[s_idx]
    ep = signals.end[e_idx]
    score = sp * ep
    if top_k is not None and score.size > top_k:
        order = np.argsort(-score, kind="stable")[:top_k]
        s_idx, e_idx, sp, ep, score = s_idx[order], e_idx[order], sp[order], ep[order], score[order]
    return [
        Proposal(
            t_start=float(s),
            t_end=float(e + 1),
            start_prob=float(a),
            end_prob=float(b),
            confidence=1.0,
            final_score=float(ab),
        )
        for s, e, a, b, ab in zip(s_idx.tolist(), e_idx.tolist(), sp.tolist(),
                                  ep.tolist(), score.tolist())
    ]


# ---------------------------------------------------------------------------
# proposal features and confidence


def _interp1d(signal: np.ndarray, locs: np.ndarray) -> np.ndarray:
    """Linear interpolation of a length-T signal at real locations.

    Out-of-range locations clamp to [0, T-1].
    """
    T = signal.shape[0]
    x = np.clip(locs, 0.0, T - 1.0)
    i0 = np.floor(x).astype(np.intp)
    lam = x - i0
    i1 = np.minimum(i0 + 1, T - 1)
    return (1.0 - lam) * signal[i0] + lam * signal[i1]


def bsp_locations(proposal: Proposal) -> np.ndarray:
    """Sample locations: 16 interior points, then 8 around each boundary.

    Boundary context spans d/5 on each side of the boundary, d the proposal
    duration.
    """
    if not (proposal.t_start < proposal.t_end):
        raise ValidationError(f"invalid proposal [{proposal.t_start}, {proposal.t_end})")
    d = proposal.t_end - proposal.t_start
    interior = np.linspace(proposal.t_start, proposal.t_end, 16)
    around_start = np.linspace(proposal.t_start - d / 5.0, proposal.t_start + d / 5.0, 8)
    around_end = np.linspace(proposal.t_end - d / 5.0, proposal.t_end + d / 5.0, 8)
    return np.concatenate([interior, around_start, around_end])


def bsp_features(actionness: np.ndarray, proposal: Proposal) -> np.ndarray:
    """Length-32 boundary-sensitive descriptor sampled from the actionness curve."""
    return _interp1d(actionness, bsp_locations(proposal))


_UNIT16 = np.linspace(0.0, 1.0, 16)
_UNIT8 = np.linspace(-1.0, 1.0, 8)


def bsp_features_batch(actionness: np.ndarray, starts: np.ndarray, ends: np.ndarray) -> np.ndarray:
    """(N, 32) descriptors for N proposals; same samples as bsp_features."""
    starts = np.asarray(starts, dtype=np.float64)
    ends = np.asarray(ends, dtype=np.float64)
    if np.any(starts >= ends):
        raise ValidationError("every proposal needs t_start < t_end")
    d = (ends - starts)[:, None]
    interior = starts[:, None] + d * _UNIT16[None, :]
    around_start = starts[:, None] + (d / 5.0) * _UNIT8[None, :]
    around_end = ends[:, None] + (d / 5.0) * _UNIT8[None, :]
    locs = np.concatenate([interior, around_start, around_end], axis=1)
    return _interp1d(actionness, locs.reshape(-1)).reshape(len(starts), BSP_DIM)


def pem_forward(params: PEMParams, bsp: np.ndarray) -> float:
    """Confidence in (0, 1) for one length-32 descriptor."""
    bsp = np.asarray(bsp, dtype=np.float64)
    if bsp.shape != (BSP_DIM,):
        raise ValidationError(f"bsp feature must have shape ({BSP_DIM},), got {bsp.shape}")
    out, _ = nn.net_forward(params.specs, params.layers, bsp[None, :])
    return float(out[0, 0])


def pem_forward_batch(params: PEMParams, bsp: np.ndarray):
    """Batched confidence with caches; bsp is (B, 32), output (B,)."""
    out, caches = nn.net_forward(params.specs, params.layers, bsp)
    return out[:, 0], caches


def pem_backward(params: PEMParams, caches, grad_conf: np.ndarray):
    _, grads = nn.net_backward(params.specs, params.layers, caches, grad_conf[:, None])
    return grads


def pem_loss(confidence: float, tiou_target: float) -> tuple[float, float]:
    """Squared error against the best-overlap target; grad wrt confidence."""
    diff = confidence - tiou_target
    return diff * diff, 2.0 * diff


def score_proposals(
    pem: PEMParams, actionness: np.ndarray, proposals: list[Proposal]
) -> list[Proposal]:
    """PEM-score candidates; final_score = start_prob * end_prob * confidence."""
    if not proposals:
        return []
    bsp = bsp_features_batch(
        actionness,
        np.array([p.t_start for p in proposals]),
        np.array([p.t_end for p in proposals]),
    )
    conf, _ = pem_forward_batch(pem, bsp)
    return [
        replace(p, confidence=float(c), final_score=float(p.start_prob * p.end_prob * c))
        for p, c in zip(proposals, conf)
    ]


# ---------------------------------------------------------------------------
# soft non-maximum suppression


def soft_nms(proposals: list[Proposal], sigma: float = 0.75, score_floor: float = 1e-3) -> list[Proposal]:
    """Gaussian-decay soft NMS on final_score.

    Repeatedly select the highest-scoring remaining proposal, decay every
    other remaining score by exp(-tIoU^2 / sigma), and drop proposals whose
    decayed score falls below ``score_floor``. Output is sorted by decayed
    score.
    """
    if sigma <= 0:
        raise ValidationError(f"soft-NMS sigma must be > 0, got {sigma}")
    if not proposals:
        return []
    starts = np.array([p.t_start for p in proposals])
    ends = np.array([p.t_end for p in proposals])
    scores = np.array([p.final_score for p in proposals], dtype=np.float64)
    alive = np.ones(len(proposals), dtype=bool)
    kept: list[Proposal] = []
    while np.any(alive):
        idx_alive = np.nonzero(alive)[0]
        m = idx_alive[np.argmax(scores[idx_alive])]
        kept.append(replace(proposals[m], final_score=float(scores[m])))
        alive[m] = False
        rest = np.nonzero(alive)[0]
        if rest.size == 0:
            break
        overlaps = tiou_arrays(starts[rest], ends[rest], starts[m], ends[m])
        scores[rest] *= np.exp(-(overlaps ** 2) / sigma)
        alive[rest[scores[rest] < score_floor]] = False
    return kept
