"""Experiment orchestration: config defaulting, run manifests, the proposal
generation pipeline, evaluation reports, and label-fraction / ablation sweeps.

Every run directory carries a manifest.json with the complete effective
configuration, the seed, and the dataset hash; re-running a command from its
manifest reproduces all outputs byte for byte.
"""

from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass

import numpy as np

from . import __version__
from .bsn import CandidateConfig, PEMParams, TEMParams, generate_candidates, score_proposals, soft_nms, tem_forward
from .dataset import (
    DatasetConfig,
    FeatureSequence,
    VideoAnnotation,
    config_hash,
    dataset_hash,
    generate_dataset,
    load_dataset,
    save_dataset,
    split_labels,
)
from .errors import ConfigError
from .meanteacher import TrainConfig, TrainerState, TrainResult, init_trainer, train
from .metrics import (
    AR_TIOU_THRESHOLDS,
    MAP_TIOU_THRESHOLDS,
    EvalReport,
    ar_curve,
    map_at,
    tiou,
)
from . import nn

REPORT_AN_POINTS = (1, 5, 10, 20, 50, 100)


@dataclass(frozen=True)
class EvalConfig:
    an_max: int = 100
    soft_nms_sigma: float = 0.75
    score_floor: float = 1e-3
    pre_nms_top_k: int = 500
    top_k: int = 200
    rel_threshold: float = 0.5
    max_duration: float | None = None
    ar_thresholds: tuple[float, ...] = AR_TIOU_THRESHOLDS
    map_thresholds: tuple[float, ...] = MAP_TIOU_THRESHOLDS

    def to_dict(self) -> dict:
        return {
            "an_max": self.an_max,
            "soft_nms_sigma": self.soft_nms_sigma,
            "score_floor": self.score_floor,
            "pre_nms_top_k": self.pre_nms_top_k,
            "top_k": self.top_k,
            "rel_threshold": self.rel_threshold,
            "max_duration": self.max_duration,
            "ar_thresholds": list(self.ar_thresholds),
            "map_thresholds": list(self.map_thresholds),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EvalConfig":
        kw = dict(d)
        for key in ("ar_thresholds", "map_thresholds"):
            if key in kw:
                kw[key] = tuple(kw[key])
        return cls(**kw)


def generate_video_proposals(
    tem: TEMParams, pem: PEMParams, features: FeatureSequence, cfg: EvalConfig
):
    """TEM signals -> candidates -> PEM confidence -> soft-NMS -> top_k."""
    signals = tem_forward(tem, features)
    cands = generate_candidates(
        signals, CandidateConfig(cfg.max_duration, cfg.rel_threshold), top_k=cfg.pre_nms_top_k
    )
    scored = score_proposals(pem, signals.actionness, cands)
    kept = soft_nms(scored, sigma=cfg.soft_nms_sigma, score_floor=cfg.score_floor)
    return kept[: cfg.top_k]


def evaluate(
    tem: TEMParams,
    pem: PEMParams,
    videos: list[tuple[FeatureSequence, VideoAnnotation]],
    cfg: EvalConfig | None = None,
) -> tuple[EvalReport, dict[str, list]]:
    """Full metric report over a video set; also returns proposals per video.

    Detection mAP uses oracle class labels: each proposal is assigned the
    class of its best-overlapping ground-truth interval.
    """
    cfg = cfg or EvalConfig()
    proposals_by_video: dict[str, list] = {}
    prop_tuples: dict[str, list[tuple]] = {}
    det_tuples: dict[str, list[tuple]] = {}
    gts: dict[str, list[tuple]] = {}
    gts_cls: dict[str, list[tuple]] = {}
    for feats, ann in videos:
        props = generate_video_proposals(tem, pem, feats, cfg)
        proposals_by_video[ann.video_id] = props
        prop_tuples[ann.video_id] = [(p.t_start, p.t_end, p.final_score) for p in props]
        gts[ann.video_id] = [(iv.start, iv.end) for iv in ann.intervals]
        gts_cls[ann.video_id] = [(iv.start, iv.end, iv.class_id) for iv in ann.intervals]
        dets = []
        for p in props:
            overlaps = [tiou((p.t_start, p.t_end), (iv.start, iv.end)) for iv in ann.intervals]
            cls = ann.intervals[int(np.argmax(overlaps))].class_id if overlaps else 0
            dets.append((p.t_start, p.t_end, cls, p.final_score))
        det_tuples[ann.video_id] = dets
    curve = ar_curve(prop_tuples, gts, cfg.an_max, cfg.ar_thresholds)
    ar_at_an = {an: float(curve[an - 1]) for an in REPORT_AN_POINTS if an <= cfg.an_max}
    report = EvalReport(
        ar_at_an=ar_at_an,
        auc=float(curve.mean()),
        map_at_tiou={th: map_at(det_tuples, gts_cls, th) for th in cfg.map_thresholds},
        per_video_recall={
            vid: _video_recall(prop_tuples[vid], gts[vid], cfg.an_max)
            for vid in sorted(gts)
        },
    )
    report.validate()
    return report, proposals_by_video


def _video_recall(props: list[tuple], video_gts: list[tuple], an: int) -> float:
    """Recall at tIoU 0.5 with top-``an`` proposals, for one video."""
    if not video_gts:
        return 0.0
    top = sorted(props, key=lambda p: -p[2])[:an]
    hit = 0
    for gs, ge in video_gts:
        if any(tiou((s, e), (gs, ge)) >= 0.5 for s, e, _ in top):
            hit += 1
    return hit / len(video_gts)


# ---------------------------------------------------------------------------
# config files and manifests


def default_config() -> dict:
    return {
        "dataset": DatasetConfig().to_dict(),
        "train": TrainConfig().to_dict(),
        "eval": EvalConfig().to_dict(),
        "experiment": {
            "fraction": 0.2,
            "fractions": [0.2],
            "seeds": [0],
            "modes": ["supervised", "semi"],
            "axis": "fraction",
            "values": None,
            "eval_num_videos": 100,
        },
    }


def _deep_merge(base: dict, override: dict) -> dict:
    out = dict(base)
    for key, value in override.items():
        if key in out and isinstance(out[key], dict) and isinstance(value, dict):
            out[key] = _deep_merge(out[key], value)
        else:
            out[key] = value
    return out


def load_config(path: str | None) -> dict:
    """Read a JSON config (or a manifest carrying one) over full defaults."""
    cfg = default_config()
    if path is None:
        return cfg
    try:
        with open(path, encoding="utf-8") as f:
            user = json.load(f)
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
    if "config" in user and isinstance(user["config"], dict):
        user = user["config"]  # accept a manifest in place of a config
    unknown = set(user) - set(cfg)
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")
    return _deep_merge(cfg, user)


def write_json(path: str, obj) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(obj, f, indent=2, sort_keys=True)
        f.write("\n")


def write_manifest(out_dir: str, command: str, config: dict, seed: int, **extra) -> None:
    manifest = {
        "command": command,
        "version": __version__,
        "seed": seed,
        "config": config,
        "config_hash": config_hash(config),
    }
    manifest.update(extra)
    write_json(os.path.join(out_dir, "manifest.json"), manifest)


def write_history_csv(path: str, history: list[dict]) -> None:
    columns = ["step", "sup_loss", "cons_loss", "pem_loss", "weight", "kl_mean",
               "masked_frac", "alpha"]
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(columns)
        for row in history:
            writer.writerow([repr(row[c]) if isinstance(row[c], float) else row[c]
                             for c in columns])


def write_proposals_jsonl(path: str, proposals_by_video: dict[str, list]) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for vid in sorted(proposals_by_video):
            for p in proposals_by_video[vid]:
                record = {
                    "video_id": vid,
                    "t_start": p.t_start,
                    "t_end": p.t_end,
                    "start_prob": p.start_prob,
                    "end_prob": p.end_prob,
                    "confidence": p.confidence,
                    "final_score": p.final_score,
                }
                f.write(json.dumps(record, sort_keys=True) + "\n")


def write_ar_csv(path: str, curve: np.ndarray) -> None:
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["an", "average_recall"])
        for an, value in enumerate(curve, start=1):
            writer.writerow([an, repr(float(value))])


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path: str, state: TrainerState) -> None:
    """Student + teacher parameters and optimizer moments in one tensor file."""
    tensors = {}
    tensors.update(nn.params_to_tensors("student/tem", state.student_tem.layers))
    tensors.update(nn.params_to_tensors("student/pem", state.student_pem.layers))
    tensors.update(nn.params_to_tensors("teacher/tem", state.teacher_tem.layers))
    tensors.update(nn.params_to_tensors("teacher/pem", state.teacher_pem.layers))
    tensors.update(nn.params_to_tensors("opt/tem/m", state.opt_tem.m))
    tensors.update(nn.params_to_tensors("opt/tem/v", state.opt_tem.v))
    tensors.update(nn.params_to_tensors("opt/pem/m", state.opt_pem.m))
    tensors.update(nn.params_to_tensors("opt/pem/v", state.opt_pem.v))
    nn.save_tensors(path, tensors)
    meta = {
        "step": state.step,
        "opt_tem_step": state.opt_tem.step,
        "opt_pem_step": state.opt_pem.step,
        "feature_dim": state.student_tem.feature_dim,
        "train_config": state.config.to_dict(),
        "tem_topology": [nn.spec_to_dict(s) for s in state.student_tem.specs],
        "pem_topology": [nn.spec_to_dict(s) for s in state.student_pem.specs],
    }
    write_json(path + ".json", meta)


def load_checkpoint(path: str) -> TrainerState:
    tensors = nn.load_tensors(path)
    with open(path + ".json", encoding="utf-8") as f:
        meta = json.load(f)
    config = TrainConfig.from_dict(meta["train_config"])
    state = init_trainer(meta["feature_dim"], config, seed=0)
    tem_specs_ = state.student_tem.specs
    pem_specs_ = state.student_pem.specs
    state.student_tem.layers = nn.tensors_to_params("student/tem", tensors, tem_specs_)
    state.student_pem.layers = nn.tensors_to_params("student/pem", tensors, pem_specs_)
    state.teacher_tem.layers = nn.tensors_to_params("teacher/tem", tensors, tem_specs_)
    state.teacher_pem.layers = nn.tensors_to_params("teacher/pem", tensors, pem_specs_)
    state.opt_tem.m = nn.tensors_to_params("opt/tem/m", tensors, tem_specs_)
    state.opt_tem.v = nn.tensors_to_params("opt/tem/v", tensors, tem_specs_)
    state.opt_pem.m = nn.tensors_to_params("opt/pem/m", tensors, pem_specs_)
    state.opt_pem.v = nn.tensors_to_params("opt/pem/v", tensors, pem_specs_)
    state.step = meta["step"]
    state.opt_tem.step = meta["opt_tem_step"]
    state.opt_pem.step = meta["opt_pem_step"]
    return state


# ---------------------------------------------------------------------------
# run orchestration (shared by the CLI and the acceptance suite)


# generation is pure in (config, seed), so repeated sweep cells can share it
_dataset_cache: dict[tuple[str, int], list] = {}


def _cached_generate(ds_cfg: DatasetConfig, seed: int) -> list:
    key = (config_hash(ds_cfg.to_dict()), seed)
    if key not in _dataset_cache:
        if len(_dataset_cache) > 8:
            _dataset_cache.clear()
        _dataset_cache[key] = generate_dataset(ds_cfg, seed)
    return _dataset_cache[key]


def resolve_dataset(config: dict, seed: int, dataset_path: str | None = None):
    """Load a dataset directory if given, else generate from the config."""
    if dataset_path is not None:
        dataset, meta = load_dataset(dataset_path)
        return dataset, meta["config_hash"]
    ds_cfg = DatasetConfig.from_dict(config["dataset"])
    return _cached_generate(ds_cfg, seed), config_hash(ds_cfg.to_dict())


def run_training(
    config: dict,
    seed: int,
    mode: str,
    out_dir: str | None = None,
    dataset_path: str | None = None,
    resume: str | None = None,
    fraction: float | None = None,
) -> TrainResult:
    """Train one model; optionally persist manifest, history, and checkpoint."""
    dataset, ds_hash = resolve_dataset(config, seed, dataset_path)
    fraction = fraction if fraction is not None else config["experiment"]["fraction"]
    labeled, unlabeled = split_labels(dataset, fraction, seed)
    train_cfg = TrainConfig.from_dict(config["train"])
    state = load_checkpoint(resume) if resume else None
    result = train(dataset, labeled, unlabeled, train_cfg, seed, mode=mode, state=state)
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        write_manifest(
            out_dir, "train", config, seed,
            mode=mode, fraction=fraction, dataset_hash=ds_hash,
            dataset_path=dataset_path, steps_completed=result.state.step,
        )
        write_history_csv(os.path.join(out_dir, "history.csv"), result.history)
        save_checkpoint(os.path.join(out_dir, "checkpoint.bin"), result.state)
    return result


def run_eval(
    state: TrainerState,
    config: dict,
    seed: int,
    model: str = "teacher",
    out_dir: str | None = None,
    dataset_path: str | None = None,
) -> EvalReport:
    """Evaluate the selected model on the held-out set; optionally write files."""
    if model not in ("teacher", "student"):
        raise ConfigError(f"model must be 'teacher' or 'student', got {model!r}")
    eval_cfg = EvalConfig.from_dict(config["eval"])
    if dataset_path is not None:
        videos, _ = load_dataset(dataset_path)
        ds_hash = dataset_hash(dataset_path)
    else:
        ds_cfg = DatasetConfig.from_dict({
            **config["dataset"], "num_videos": config["experiment"]["eval_num_videos"],
        })
        videos = _cached_generate(ds_cfg, _eval_seed(seed))
        ds_hash = config_hash(ds_cfg.to_dict())
    tem, pem = (
        (state.teacher_tem, state.teacher_pem)
        if model == "teacher"
        else (state.student_tem, state.student_pem)
    )
    report, proposals = evaluate(tem, pem, videos, eval_cfg)
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        write_manifest(out_dir, "eval", config, seed, model=model,
                       dataset_path=dataset_path, dataset_hash=ds_hash)
        with open(os.path.join(out_dir, "report.json"), "w", encoding="utf-8") as f:
            f.write(report.to_json())
        write_proposals_jsonl(os.path.join(out_dir, "proposals.jsonl"), proposals)
        prop_tuples = {
            vid: [(p.t_start, p.t_end, p.final_score) for p in props]
            for vid, props in proposals.items()
        }
        gts = {ann.video_id: [(iv.start, iv.end) for iv in ann.intervals] for _, ann in videos}
        write_ar_csv(
            os.path.join(out_dir, "ar_an.csv"),
            ar_curve(prop_tuples, gts, eval_cfg.an_max, eval_cfg.ar_thresholds),
        )
    return report


def _eval_seed(seed: int) -> int:
    # disjoint from every train-side spawn key usage of the same seed
    return seed + 1_000_003


def run_cell(config: dict, seed: int, mode: str, fraction: float, model: str = "auto") -> dict:
    """Train + evaluate one sweep cell in memory; returns summary metrics.

    ``model="auto"`` evaluates the teacher for semi mode and the student for
    supervised mode.
    """
    result = run_training(config, seed, mode, fraction=fraction)
    chosen = model if model != "auto" else ("teacher" if mode == "semi" else "student")
    report = run_eval(result.state, config, seed, model=chosen)
    return {
        "mode": mode,
        "seed": seed,
        "fraction": fraction,
        "model": chosen,
        "auc": report.auc,
        "ar_at_100": report.ar_at_an.get(100, max(report.ar_at_an.values())),
        "report": report,
        "result": result,
    }


AXIS_CHOICES = ("fraction", "kl_band", "mask_p")

# sampler ranges able to reach each distortion regime by rejection quickly
_KL_SAMPLER_HINTS = (
    (3e-4, ((1, 2), (2.0, 60.0))),
    (0.3, ((1, 5), (0.05, 1.0))),
    (np.inf, ((1, 5), (0.01, 0.2))),
)


def config_for_axis(config: dict, axis: str, value) -> dict:
    """Specialize the training config for one ablation axis value."""
    cfg = json.loads(json.dumps(config))  # deep copy
    if axis == "fraction":
        cfg["experiment"]["fraction"] = value
    elif axis == "mask_p":
        cfg["train"]["mask_p"] = value
    elif axis == "kl_band":
        band = list(value) if isinstance(value, (list, tuple)) else [value / 2.0, value * 2.0]
        cfg["train"]["kl_band"] = band
        mid = float(np.sqrt(band[0] * band[1]))
        for limit, (n_range, sigma_rel) in _KL_SAMPLER_HINTS:
            if mid < limit:
                cfg["train"]["sampler_n_range"] = list(n_range)
                cfg["train"]["sampler_sigma_rel"] = list(sigma_rel)
                break
    else:
        raise ConfigError(f"unknown sweep axis {axis!r}; choose from {AXIS_CHOICES}")
    return cfg


def run_sweep(config: dict, out_dir: str | None = None) -> list[dict]:
    """Sweep (axis value x seed x mode) cells and aggregate mean/std metrics."""
    exp = config["experiment"]
    axis = exp.get("axis") or "fraction"
    values = exp.get("values")
    if values is None:
        values = exp["fractions"] if axis == "fraction" else None
    if not values:
        raise ConfigError(f"sweep over axis {axis!r} needs a 'values' list")
    seeds = exp["seeds"]
    modes = exp["modes"]
    rows = []
    details = []
    for value in values:
        cell_cfg = config_for_axis(config, axis, value)
        for mode in modes:
            cell_metrics = []
            for seed in seeds:
                fraction = value if axis == "fraction" else cell_cfg["experiment"]["fraction"]
                cell = run_cell(cell_cfg, seed, mode, fraction)
                cell_metrics.append(cell)
                details.append({
                    "axis": axis, "value": value, "mode": mode, "seed": seed,
                    "auc": cell["auc"], "ar_at_100": cell["ar_at_100"],
                })
            aucs = np.array([c["auc"] for c in cell_metrics])
            ars = np.array([c["ar_at_100"] for c in cell_metrics])
            rows.append({
                "axis": axis,
                "value": json.dumps(value) if isinstance(value, list) else value,
                "mode": mode,
                "num_seeds": len(seeds),
                "auc_mean": float(aucs.mean()),
                "auc_std": float(aucs.std(ddof=0)),
                "ar100_mean": float(ars.mean()),
                "ar100_std": float(ars.std(ddof=0)),
            })
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        write_manifest(out_dir, "sweep", config, seeds[0] if seeds else 0)
        with open(os.path.join(out_dir, "sweep_summary.csv"), "w", encoding="utf-8",
                  newline="") as f:
            writer = csv.DictWriter(f, fieldnames=list(rows[0].keys()))
            writer.writeheader()
            writer.writerows(rows)
        write_json(os.path.join(out_dir, "sweep_detail.json"), details)
    return rows


def gen_data_command(config: dict, seed: int, out_dir: str, force: bool = False) -> str:
    """Generate and persist a dataset; returns its hash."""
    ds_cfg = DatasetConfig.from_dict(config["dataset"])
    dataset = generate_dataset(ds_cfg, seed)
    ds_hash = save_dataset(out_dir, dataset, ds_cfg, seed, force=force)
    write_manifest(out_dir, "gen-data", config, seed, dataset_hash=ds_hash)
    return ds_hash
