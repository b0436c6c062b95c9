"""Semi-supervised training engine: student/teacher pair with EMA weight
averaging, sequential perturbations on the student input, warped supervised
targets, and an MSE consistency loss against warped teacher outputs.

Per video and step, one warp grid is drawn and applied to the features, the
labels (labeled videos only), and the teacher signals; the teacher itself
always sees the clean sequence. Only the student is optimized; the teacher
changes exclusively through the EMA update.
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict

import numpy as np

from . import nn
from .bsn import (
    BoundarySignals,
    CandidateConfig,
    PEMParams,
    Proposal,
    TEMParams,
    bsp_features_batch,
    generate_candidates,
    init_pem,
    init_tem,
    pem_backward,
    pem_forward_batch,
    tem_backward,
    tem_forward,
    tem_forward_cached,
    tem_loss,
)
from .dataset import (
    FeatureSequence,
    SnippetTargets,
    VideoAnnotation,
    child_rng,
    derive_targets,
)
from .errors import ConfigError, DivergenceError, ValidationError
from .metrics import tiou_arrays
from .perturb import (
    MaskConfig,
    SamplerConfig,
    gaussian_noise,
    identity_grid,
    make_grid,
    mask,
    sample_mtnd,
    warp,
)

_KEY_INIT = 10
_KEY_LOOP = 11


@dataclass(frozen=True)
class TrainConfig:
    alpha: float = 0.999            # EMA decay
    ema_warmup: bool = True         # effective decay min(alpha, 1 - 1/(i+1))
    mask_p: float = 0.3
    noise_sigma: float = 0.0
    consistency_weight: float = 1.0
    ramp_steps: int = 0             # 0 disables the sigmoid ramp-up
    labeled_per_batch: int = 4
    unlabeled_per_batch: int = 4
    steps: int = 1500
    lr: float = 1e-3
    hidden: int = 64
    pem_hidden: int = 64
    warp_enabled: bool = True
    kl_band: tuple[float, float] | None = (0.005, 0.05)
    kl_bins: int = 50
    sampler_n_range: tuple[int, int] = (1, 5)
    sampler_sigma_rel: tuple[float, float] = (0.05, 1.0)
    pem_enabled: bool = True
    pem_lr: float = 1e-3
    pem_candidates: int = 24
    pem_jitter_per_gt: int = 2
    pem_consistency: bool = False   # experimental: PEM weights consistency
    candidate_rel_threshold: float = 0.5
    max_duration: float | None = None

    def validate(self) -> None:
        if not (0.0 <= self.alpha < 1.0):
            raise ConfigError(f"alpha must be in [0, 1), got {self.alpha}")
        if not (0.0 <= self.mask_p <= 1.0):
            raise ConfigError(f"mask_p must be in [0, 1], got {self.mask_p}")
        if self.consistency_weight < 0:
            raise ConfigError("consistency_weight must be >= 0")
        if self.steps < 0 or self.labeled_per_batch < 0 or self.unlabeled_per_batch < 0:
            raise ConfigError("steps and batch sizes must be >= 0")
        if self.lr <= 0 or self.pem_lr <= 0:
            raise ConfigError("learning rates must be > 0")
        SamplerConfig(self.sampler_n_range, self.sampler_sigma_rel).validate()

    def sampler_config(self) -> SamplerConfig:
        return SamplerConfig(self.sampler_n_range, self.sampler_sigma_rel)

    def to_dict(self) -> dict:
        d = asdict(self)
        for key in ("kl_band", "sampler_n_range", "sampler_sigma_rel"):
            if d[key] is not None:
                d[key] = list(d[key])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        kw = dict(d)
        for key in ("kl_band", "sampler_n_range", "sampler_sigma_rel"):
            if kw.get(key) is not None:
                kw[key] = tuple(kw[key])
        return cls(**kw)


@dataclass
class BatchItem:
    features: FeatureSequence
    annotation: VideoAnnotation
    targets: SnippetTargets | None = None  # present iff the video is labeled

    @property
    def labeled(self) -> bool:
        return self.targets is not None


@dataclass
class TrainerState:
    student_tem: TEMParams
    student_pem: PEMParams
    teacher_tem: TEMParams
    teacher_pem: PEMParams
    opt_tem: nn.AdamState
    opt_pem: nn.AdamState
    step: int
    config: TrainConfig
    trace: list | None = None  # per-video perturbation audit records


def init_trainer(
    feature_dim: int, config: TrainConfig, seed: int, trace: bool = False
) -> TrainerState:
    """Fresh student, teacher as an exact copy, zeroed optimizer moments."""
    config.validate()
    rng = child_rng(seed, _KEY_INIT)
    student_tem = init_tem(rng, feature_dim, config.hidden)
    student_pem = init_pem(rng, config.pem_hidden)
    teacher_tem = TEMParams(feature_dim, config.hidden, nn.tree_copy(student_tem.layers))
    teacher_pem = PEMParams(config.pem_hidden, nn.tree_copy(student_pem.layers))
    return TrainerState(
        student_tem=student_tem,
        student_pem=student_pem,
        teacher_tem=teacher_tem,
        teacher_pem=teacher_pem,
        opt_tem=nn.adam_init(student_tem.layers, lr=config.lr),
        opt_pem=nn.adam_init(student_pem.layers, lr=config.pem_lr),
        step=0,
        config=config,
        trace=[] if trace else None,
    )


def ema_update(teacher_layers, student_layers, alpha: float):
    """Elementwise teacher' = alpha * teacher + (1 - alpha) * student."""
    for t, s in zip(teacher_layers, student_layers):
        if set(t) != set(s) or any(t[k].shape != s[k].shape for k in t):
            raise ValidationError("teacher/student parameter shapes differ")
    return nn.tree_map(lambda t, s: alpha * t + (1.0 - alpha) * s, teacher_layers, student_layers)


def effective_alpha(step: int, config: TrainConfig) -> float:
    """EMA decay for iteration ``step`` (0-based); warms up from 0 when enabled.

    Short desk-scale runs never amortize a cold 0.999 teacher, so the usual
    min(alpha, 1 - 1/(i+1)) schedule is the default. Disable via ema_warmup.
    """
    if config.ema_warmup:
        return min(config.alpha, 1.0 - 1.0 / (step + 1.0))
    return config.alpha


def consistency_weight_at(step: int, config: TrainConfig) -> float:
    """Constant by default; optional sigmoid-shaped ramp over ramp_steps."""
    if config.ramp_steps <= 0 or step >= config.ramp_steps:
        return config.consistency_weight
    frac = step / config.ramp_steps
    return config.consistency_weight * float(np.exp(-5.0 * (1.0 - frac) ** 2))


def consistency_loss(
    student_signals: BoundarySignals, teacher_signals: BoundarySignals, weight: float
) -> tuple[float, np.ndarray]:
    """weight * MSE over all 3T signal entries; grad flows to the student only."""
    if weight < 0:
        raise ValidationError("consistency weight must be >= 0")
    s = student_signals.as_matrix()
    t = teacher_signals.as_matrix()
    if s.shape != t.shape:
        raise ValidationError(f"signal shape mismatch: {s.shape} vs {t.shape}")
    if weight == 0.0:
        return 0.0, np.zeros_like(s)
    diff = s - t
    loss = weight * float(np.mean(diff ** 2))
    grad = weight * 2.0 * diff / diff.size
    return loss, grad


def _draw_grid(T: int, rng: np.random.Generator, config: TrainConfig):
    if not config.warp_enabled:
        return identity_grid(T)
    params = sample_mtnd(T, rng, config.sampler_config())
    return make_grid(
        params, T, rng,
        target_kl_band=config.kl_band,
        sampler_config=config.sampler_config(),
        kl_bins=config.kl_bins,
    )


def train_step(state: TrainerState, batch: list[BatchItem], rng: np.random.Generator) -> dict:
    """One optimization step over a mixed labeled/unlabeled mini-batch.

    Mutates ``state`` in place and returns the step statistics.
    """
    if not batch:
        raise ValidationError("train_step needs a non-empty batch")
    cfg = state.config
    weight = consistency_weight_at(state.step, cfg)
    tem_grads = nn.tree_zeros_like(state.student_tem.layers)
    sup_losses, cons_losses, kls, masked_fracs = [], [], [], []
    for item in batch:
        T = item.features.T
        grid = _draw_grid(T, rng, cfg)
        if grid.kl is not None:
            kls.append(grid.kl)

        teacher_warped = None
        if weight > 0.0:
            teacher_signals = tem_forward(state.teacher_tem, item.features)
            teacher_warped = BoundarySignals.from_matrix(
                warp(teacher_signals.as_matrix(), grid)
            )

        x = warp(item.features.values, grid)
        warped_targets = None
        if item.labeled:
            warped_targets = SnippetTargets.from_matrix(warp(item.targets.as_matrix(), grid))
        if state.trace is not None:
            state.trace.append({
                "step": state.step,
                "video_id": item.annotation.video_id,
                "feature_grid": id(grid),
                "target_grid": id(grid) if item.labeled else None,
                "teacher_grid": id(grid) if teacher_warped is not None else None,
            })

        x, dropped = mask(x, MaskConfig(cfg.mask_p), rng)
        masked_fracs.append(float(dropped.mean()))
        if cfg.noise_sigma > 0:
            x = gaussian_noise(x, cfg.noise_sigma, rng)

        student_signals, caches = tem_forward_cached(state.student_tem, x)
        grad_signals = np.zeros((T, 3))
        if item.labeled:
            sup, g_sup = tem_loss(student_signals, warped_targets)
            sup_losses.append(sup)
            grad_signals += g_sup
        if teacher_warped is not None:
            cons, g_cons = consistency_loss(student_signals, teacher_warped, weight)
            cons_losses.append(cons)
            grad_signals += g_cons
        else:
            cons_losses.append(0.0)
        if not np.isfinite(grad_signals).all() or not np.isfinite(sum(sup_losses + cons_losses)):
            raise DivergenceError(
                f"non-finite loss at step {state.step} on video {item.annotation.video_id}"
            )
        nn.tree_add_(tem_grads, tem_backward(state.student_tem, caches, grad_signals))

    scale = 1.0 / len(batch)
    tem_grads = nn.tree_map(lambda g: g * scale, tem_grads)
    state.student_tem.layers, state.opt_tem = nn.adam_step(
        state.student_tem.layers, tem_grads, state.opt_tem
    )

    pem_loss_value = None
    labeled_items = [item for item in batch if item.labeled]
    if cfg.pem_enabled and labeled_items:
        pem_loss_value = _pem_substep(state, labeled_items, rng)

    alpha = effective_alpha(state.step, cfg)
    state.teacher_tem.layers = ema_update(state.teacher_tem.layers, state.student_tem.layers, alpha)
    state.teacher_pem.layers = ema_update(state.teacher_pem.layers, state.student_pem.layers, alpha)
    state.step += 1
    return {
        "step": state.step,
        "sup_loss": float(np.mean(sup_losses)) if sup_losses else 0.0,
        "cons_loss": float(np.mean(cons_losses)) if cons_losses else 0.0,
        "pem_loss": pem_loss_value if pem_loss_value is not None else 0.0,
        "weight": weight,
        "kl_mean": float(np.mean(kls)) if kls else 0.0,
        "masked_frac": float(np.mean(masked_fracs)) if masked_fracs else 0.0,
        "alpha": alpha,
    }


def _jittered_gt_proposals(
    annotation: VideoAnnotation, T: int, per_gt: int, rng: np.random.Generator
) -> list[Proposal]:
    """Ground-truth intervals with +-20% duration jitter; guarantees PEM positives."""
    proposals = []
    for iv in annotation.intervals:
        d = iv.end - iv.start
        for _ in range(per_gt):
            s = iv.start + rng.uniform(-0.2 * d, 0.2 * d)
            e = iv.end + rng.uniform(-0.2 * d, 0.2 * d)
            s = float(np.clip(s, 0.0, T - 1.0))
            e = float(np.clip(e, s + 0.5, T))
            proposals.append(Proposal(t_start=s, t_end=e, start_prob=1.0, end_prob=1.0))
    return proposals


def _balance_pem_samples(
    targets: np.ndarray, rng: np.random.Generator
) -> np.ndarray:
    """Indices keeping all positives (tIoU > 0.7), all mid-range samples, and
    at most twice as many negatives (tIoU < 0.3) as positives."""
    pos = np.nonzero(targets > 0.7)[0]
    neg = np.nonzero(targets < 0.3)[0]
    mid = np.nonzero((targets >= 0.3) & (targets <= 0.7))[0]
    max_neg = 2 * max(len(pos), 1)
    if len(neg) > max_neg:
        neg = rng.choice(neg, size=max_neg, replace=False)
    return np.sort(np.concatenate([pos, mid, neg]).astype(np.intp))


def _pem_substep(state: TrainerState, items: list[BatchItem], rng: np.random.Generator) -> float:
    """Supervised PEM regression on candidates from the student's own signals.

    Candidates come from the current student TEM on the clean sequence, topped
    up with jittered ground-truth intervals; targets are each candidate's best
    tIoU against the ground truth.
    """
    cfg = state.config
    cand_cfg = CandidateConfig(cfg.max_duration, cfg.candidate_rel_threshold)
    feats_list, targets_list = [], []
    for item in items:
        T = item.features.T
        signals = tem_forward(state.student_tem, item.features)
        cands = generate_candidates(signals, cand_cfg, top_k=cfg.pem_candidates)
        cands += _jittered_gt_proposals(item.annotation, T, cfg.pem_jitter_per_gt, rng)
        if not cands or not item.annotation.intervals:
            continue
        starts = np.array([p.t_start for p in cands])
        ends = np.array([p.t_end for p in cands])
        best = np.zeros(len(cands))
        for iv in item.annotation.intervals:
            best = np.maximum(best, tiou_arrays(starts, ends, iv.start, iv.end))
        keep = _balance_pem_samples(best, rng)
        feats_list.append(bsp_features_batch(signals.actionness, starts[keep], ends[keep]))
        targets_list.append(best[keep])
    if not feats_list:
        return 0.0
    bsp = np.concatenate(feats_list, axis=0)
    targets = np.concatenate(targets_list)
    conf, caches = pem_forward_batch(state.student_pem, bsp)
    diff = conf - targets
    loss = float(np.mean(diff ** 2))
    if not np.isfinite(loss):
        raise DivergenceError(f"non-finite PEM loss at step {state.step}")
    grad_conf = 2.0 * diff / diff.size
    if cfg.pem_consistency:
        # experimental: pull student PEM toward teacher PEM on shared inputs
        teacher_conf, _ = pem_forward_batch(state.teacher_pem, bsp)
        cdiff = conf - teacher_conf
        loss += float(np.mean(cdiff ** 2))
        grad_conf = grad_conf + 2.0 * cdiff / cdiff.size
    grads = pem_backward(state.student_pem, caches, grad_conf)
    state.student_pem.layers, state.opt_pem = nn.adam_step(
        state.student_pem.layers, grads, state.opt_pem
    )
    return loss


@dataclass
class TrainResult:
    state: TrainerState
    history: list[dict] = field(default_factory=list)

    @property
    def student(self) -> tuple[TEMParams, PEMParams]:
        return self.state.student_tem, self.state.student_pem

    @property
    def teacher(self) -> tuple[TEMParams, PEMParams]:
        return self.state.teacher_tem, self.state.teacher_pem


def make_batch_items(
    dataset: list[tuple[FeatureSequence, VideoAnnotation]],
    labeled_ids: list[int],
) -> list[BatchItem]:
    """Wrap the dataset as batch items, attaching targets to labeled videos."""
    labeled = set(labeled_ids)
    items = []
    for idx, (feats, ann) in enumerate(dataset):
        targets = derive_targets(ann, feats.T) if idx in labeled else None
        ann.labeled = idx in labeled
        items.append(BatchItem(features=feats, annotation=ann, targets=targets))
    return items


def _sample_ids(pool: list[int], size: int, rng: np.random.Generator) -> list[int]:
    if size == 0 or not pool:
        return []
    replace = len(pool) < size
    return [int(i) for i in rng.choice(np.asarray(pool), size=size, replace=replace)]


def train(
    dataset: list[tuple[FeatureSequence, VideoAnnotation]],
    labeled_ids: list[int],
    unlabeled_ids: list[int],
    config: TrainConfig,
    seed: int,
    mode: str = "semi",
    trace: bool = False,
    state: TrainerState | None = None,
) -> TrainResult:
    """Run ``config.steps`` training steps; deterministic in (inputs, seed).

    ``mode="supervised"`` draws batches from the labeled subset only and
    forces all perturbations and the consistency term off, which reduces the
    loop to plain fully-supervised training. ``state`` resumes a checkpoint.
    """
    if mode not in ("semi", "supervised"):
        raise ConfigError(f"unknown mode {mode!r}")
    config.validate()
    if not labeled_ids and (mode == "supervised" or config.consistency_weight == 0):
        raise ConfigError("no labeled videos and no consistency signal: nothing to train")
    if mode == "supervised":
        config = TrainConfig.from_dict({
            **config.to_dict(),
            "consistency_weight": 0.0,
            "warp_enabled": False,
            "mask_p": 0.0,
            "noise_sigma": 0.0,
        })
    items = make_batch_items(dataset, labeled_ids)
    feature_dim = dataset[0][0].D
    if state is None:
        state = init_trainer(feature_dim, config, seed, trace=trace)
    rng = child_rng(seed, _KEY_LOOP)
    consistency_pool = list(unlabeled_ids) if unlabeled_ids else list(labeled_ids)
    history = []
    for _ in range(config.steps):
        batch_ids = _sample_ids(list(labeled_ids), config.labeled_per_batch, rng)
        if mode == "semi":
            batch_ids += _sample_ids(consistency_pool, config.unlabeled_per_batch, rng)
        batch = [items[i] for i in batch_ids]
        history.append(train_step(state, batch, rng))
    return TrainResult(state=state, history=history)
