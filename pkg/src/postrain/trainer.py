"""Training loop, checkpoint selection, seed aggregation and ablations.

A run writes ``<runs_root>/<name>/<seed>/`` containing ``config.json``,
``log.jsonl`` (per-step losses), ``epochs.jsonl`` (per-epoch validation
metrics), ``ckpt_best.bin`` and ``test_metrics.json``.
"""

from __future__ import annotations

import itertools
import json
import logging
import math
import os
import shutil
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import torch
from torch import nn

from . import dataio
from .backbones import Backbone, BackboneConfig, NumericalError, build_backbone
from .cam import ChannelAttention, ChannelAttentionConfig
from .checkpoint import load_checkpoint, save_checkpoint
from .config import CamSettings, ExperimentConfig
from .multitask import (DualPrediction, MultiTaskHeads, hybrid_loss, predict_classes,
                        regression_classes)
from .verification import MetricsReport, evaluate_split

log = logging.getLogger(__name__)

RUNS_ENV = "POSTRAIN_RUNS_DIR"
SUMMARY_METRICS = (("rain", "csi"), ("rain", "hss"), ("heavy_rain", "csi"), ("heavy_rain", "hss"))
ABLATION_TOGGLES = ("weighted_loss", "multitask", "cam")


class TrainingError(RuntimeError):
    pass


class DivergenceError(TrainingError):
    pass


class SelectionError(TrainingError):
    pass


def default_runs_root() -> Path:
    return Path(os.environ.get(RUNS_ENV, "runs"))


# --------------------------------------------------------------------------
# model


class CAMTModel(nn.Module):
    """Optional channel attention, a dense backbone and the two task heads."""

    def __init__(self, backbone: Backbone, heads: MultiTaskHeads, cam: ChannelAttention | None):
        super().__init__()
        self.backbone = backbone
        self.heads = heads
        self.cam = cam

    def forward(self, x: torch.Tensor) -> DualPrediction:
        if x.dim() == 4:
            x = x.unsqueeze(0)
        if self.cam is not None:
            b, t, c, h, w = x.shape
            if self.backbone.cfg.folds_time:
                x = self.cam(x.reshape(b, t * c, h, w)).reshape(b, t, c, h, w)
            else:
                x = self.cam(x.reshape(b * t, c, h, w)).reshape(b, t, c, h, w)
        return self.heads(self.backbone(x))

    @property
    def parameter_count(self) -> int:
        return sum(p.numel() for p in self.parameters())


def resolve_backbone(cfg: BackboneConfig, shape) -> BackboneConfig:
    t, c, h, w = shape
    want = t * c if cfg.folds_time else c
    if cfg.in_channels not in (0, want):
        raise ValueError(f"backbone.in_channels={cfg.in_channels} but data provides {want}")
    return replace(cfg, in_channels=want, input_size=cfg.legal_size(h, w))


def cam_config(settings: CamSettings, bcfg: BackboneConfig, shape) -> ChannelAttentionConfig:
    t, c = shape[0], shape[1]
    channels = t * c if bcfg.folds_time else c
    return ChannelAttentionConfig(channels, settings.reduction_ratio, merge=settings.merge)


def build_model(cfg: ExperimentConfig, shape, seed: int) -> CAMTModel:
    """Deterministically build the model for data of ``shape`` (T, C, H, W).

    The backbone and heads are initialised before the attention module, so
    toggling attention leaves their initial weights unchanged.
    """
    bcfg = resolve_backbone(cfg.backbone, shape)
    torch.manual_seed(seed)
    backbone = build_backbone(bcfg)
    heads = MultiTaskHeads(bcfg.out_feature_channels)
    cam = ChannelAttention(cam_config(cfg.cam, bcfg, shape)) if cfg.cam.enabled else None
    return CAMTModel(backbone, heads, cam)


# --------------------------------------------------------------------------
# data


@dataclass
class SplitData:
    ids: list[str]
    x: torch.Tensor  # (N, T, C, H, W)
    rain: torch.Tensor  # (N, H, W)
    classes: torch.Tensor  # (N, H, W) uint8

    def __len__(self) -> int:
        return len(self.ids)


def load_data(root, splits=dataio.SPLITS, stats=None, normalize: bool = True):
    """Load splits into memory; returns ``(manifest, {split: SplitData}, stats)``.

    Channel statistics come from ``stats``, else the manifest, else are
    computed on the training split.
    """
    manifest = dataio.read_manifest(root)
    raw = {s: dataio.load_split(root, s) for s in splits}
    if normalize and stats is None:
        if manifest.normalization is not None:
            stats = manifest.normalization
        else:
            train = raw["train"] if "train" in raw else dataio.load_split(root, "train")
            stats = dataio.compute_channel_stats(list(train[1]))
    out = {}
    for s, (ids, x, y) in raw.items():
        if normalize and len(ids):
            x = dataio.normalize_channels(x.reshape(-1, *x.shape[2:]), stats).reshape(x.shape)
        cls = dataio.classify_rain(y, manifest.thresholds) if len(ids) else np.zeros(y.shape, np.uint8)
        out[s] = SplitData(ids, torch.from_numpy(np.ascontiguousarray(x)),
                           torch.from_numpy(y), torch.from_numpy(cls))
    return manifest, out, stats


# --------------------------------------------------------------------------
# training primitives


def make_optimizer(model: nn.Module, cfg: ExperimentConfig) -> torch.optim.Optimizer:
    o = cfg.optimizer
    return torch.optim.Adam(model.parameters(), lr=o.lr, betas=o.betas, eps=o.eps)


def epoch_order(n: int, seed: int, epoch: int) -> np.ndarray:
    return np.random.default_rng([seed, epoch]).permutation(n)


def train_epoch(model: CAMTModel, opt, data: SplitData, cfg: ExperimentConfig, seed: int,
                epoch: int, step0: int = 0, on_step=None) -> int:
    """One pass over ``data`` in a seed-derived order; returns the next step index."""
    model.train()
    order = epoch_order(len(data), seed, epoch)
    step = step0
    for start in range(0, len(order), cfg.batch_size):
        idx = torch.from_numpy(order[start:start + cfg.batch_size])
        pred = model(data.x[idx])
        try:
            total, l_cls, l_reg = hybrid_loss(pred, data.rain[idx], data.classes[idx], cfg.loss)
        except FloatingPointError as exc:
            raise DivergenceError(f"epoch {epoch} step {step}: {exc}") from exc
        opt.zero_grad()
        total.backward()
        if cfg.optimizer.grad_clip > 0:
            nn.utils.clip_grad_norm_(model.parameters(), cfg.optimizer.grad_clip)
        opt.step()
        if on_step is not None:
            on_step({"epoch": epoch, "step": step, "loss_cls": l_cls.item(),
                     "loss_reg": l_reg.item(), "loss_total": total.item()})
        step += 1
    return step


@torch.no_grad()
def predict(model: CAMTModel, x: torch.Tensor, batch_size: int = 8, mode: str = "classification",
            thresholds=None, log1p_target: bool = False) -> np.ndarray:
    """Class grids (N, H, W) from the classification head (or thresholded regression)."""
    model.eval()
    out = []
    for start in range(0, x.shape[0], batch_size):
        pred = model(x[start:start + batch_size])
        if mode == "classification":
            out.append(predict_classes(pred))
        else:
            out.append(regression_classes(pred, thresholds, log1p_target))
    return torch.cat(out).numpy()


def evaluate_model(model: CAMTModel, data: SplitData, cfg: ExperimentConfig | None = None,
                   thresholds=None) -> MetricsReport:
    mode = cfg.eval_mode if cfg else "classification"
    log1p = cfg.loss.log1p_target if cfg else False
    pred = predict(model, data.x, mode=mode, thresholds=thresholds, log1p_target=log1p)
    return evaluate_split(list(pred), list(data.classes.numpy()))


def selection_value(report: MetricsReport, metric: str) -> float:
    if metric == "rain_csi":
        return report.get("rain", "csi")
    if metric == "heavy_csi":
        return report.get("heavy_rain", "csi")
    if metric == "mean_csi":
        return 0.5 * (report.get("rain", "csi") + report.get("heavy_rain", "csi"))
    raise ValueError(f"unknown selection metric {metric!r}")


def select_best(values, metric: str = "rain_csi") -> int:
    """1-based epoch maximising the selection metric; ties go to the earliest epoch.

    ``values`` holds floats or :class:`MetricsReport` objects; undefined (NaN)
    epochs are skipped.
    """
    vals = [v if isinstance(v, (int, float)) else selection_value(v, metric) for v in values]
    if not vals:
        raise SelectionError("no epochs recorded")
    best, best_epoch = -math.inf, None
    for i, v in enumerate(vals, start=1):
        if not math.isnan(v) and (best_epoch is None or v > best):
            best, best_epoch = v, i
    if best_epoch is None:
        raise SelectionError(
            f"{metric} is undefined for every epoch (no positive pixels in validation); "
            "use a larger validation split"
        )
    return best_epoch


# --------------------------------------------------------------------------
# checkpoints


def checkpoint_tensors(model: CAMTModel, opt=None, epoch: int = 0) -> dict[str, np.ndarray]:
    out = {f"model.{k}": v.detach().cpu().numpy() for k, v in model.state_dict().items()}
    if opt is not None:
        for i, st in opt.state_dict()["state"].items():
            for k, v in st.items():
                out[f"optim.{i}.{k}"] = torch.as_tensor(v).detach().cpu().numpy()
    out["rng.torch"] = torch.get_rng_state().numpy().astype(np.float32)
    out["meta.epoch"] = np.array([epoch], np.float32)
    return out


def restore_model(model: CAMTModel, tensors: dict[str, np.ndarray]) -> None:
    state = {k[6:]: torch.from_numpy(v.copy()) for k, v in tensors.items() if k.startswith("model.")}
    model.load_state_dict(state)


# --------------------------------------------------------------------------
# runs


@dataclass
class RunRecord:
    seed: int
    run_dir: Path
    val_reports: list[MetricsReport] = field(default_factory=list)
    best_epoch: int | None = None
    checkpoint: Path | None = None
    test: MetricsReport | None = None
    diverged: str | None = None
    parameter_count: int = 0


def _json_line(f, obj) -> None:
    f.write(json.dumps(obj, allow_nan=False) + "\n")
    f.flush()


def _report_line(epoch: int, rep: MetricsReport) -> dict:
    return {"epoch": epoch, **rep.to_dict()}


def run_seed(cfg: ExperimentConfig, seed: int, data: dict[str, SplitData], manifest,
             stats, run_dir: Path, dataset_hash: str) -> RunRecord:
    run_cfg = replace(cfg, seeds=(seed,))
    run_dir.mkdir(parents=True, exist_ok=True)
    meta = {
        "config_hash": run_cfg.hash().hex(),
        "dataset_hash": dataset_hash,
        "experiment": run_cfg.to_dict(),
        "normalization": None if stats is None else {
            "mean": [float(v) for v in stats[0]], "std": [float(v) for v in stats[1]]},
        "seed": seed,
    }
    (run_dir / "config.json").write_text(json.dumps(meta, indent=2) + "\n", encoding="utf-8")

    model = build_model(cfg, manifest.shape, seed)
    opt = make_optimizer(model, cfg)
    rec = RunRecord(seed, run_dir, parameter_count=model.parameter_count)
    ckpt = run_dir / "ckpt_best.bin"
    best = None
    step = 0
    with open(run_dir / "log.jsonl", "w", encoding="utf-8") as flog, \
            open(run_dir / "epochs.jsonl", "w", encoding="utf-8") as fep:
        for epoch in range(1, cfg.epochs + 1):
            try:
                step = train_epoch(model, opt, data["train"], cfg, seed, epoch, step,
                                   on_step=lambda r: _json_line(flog, r))
            except (DivergenceError, NumericalError) as exc:
                rec.diverged = str(exc)
                log.error("seed %d diverged: %s", seed, exc)
                (run_dir / "diverged.txt").write_text(str(exc) + "\n", encoding="utf-8")
                return rec
            rep = evaluate_model(model, data["val"], cfg, manifest.thresholds)
            rec.val_reports.append(rep)
            _json_line(fep, _report_line(epoch, rep))
            v = selection_value(rep, cfg.selection_metric)
            if not math.isnan(v) and (best is None or v > best):
                best = v
                save_checkpoint(ckpt, checkpoint_tensors(model, opt, epoch), run_cfg.hash())

    rec.best_epoch = select_best(rec.val_reports, cfg.selection_metric)
    rec.checkpoint = ckpt
    _, tensors = load_checkpoint(ckpt)
    restore_model(model, tensors)
    rec.test = evaluate_model(model, data["test"], cfg, manifest.thresholds)
    (run_dir / "test_metrics.json").write_text(rec.test.to_json(), encoding="utf-8")
    return rec


def train(cfg: ExperimentConfig, runs_root=None, overwrite: bool = False) -> list[RunRecord]:
    """Train one model per seed and evaluate each best checkpoint on the test split."""
    cfg.validate()
    torch.use_deterministic_algorithms(True, warn_only=True)
    root = Path(cfg.dataset).resolve()
    cfg = replace(cfg, dataset=str(root))
    runs_root = Path(runs_root) if runs_root is not None else default_runs_root()
    manifest, data, stats = load_data(root, normalize=cfg.normalize)
    for s in ("train", "val", "test"):
        if not len(data[s]):
            raise TrainingError(f"split {s!r} is empty")
    dhash = dataio.manifest_hash(root)
    records = []
    for seed in cfg.seeds:
        run_dir = runs_root / cfg.name / str(seed)
        if run_dir.exists():
            if not overwrite:
                raise FileExistsError(f"{run_dir} exists; pass --overwrite (overwrite=True) to replace it")
            shutil.rmtree(run_dir)
        records.append(run_seed(cfg, seed, data, manifest, stats, run_dir, dhash))
    return records


def read_run_config(run_dir) -> tuple[ExperimentConfig, dict]:
    meta = json.loads((Path(run_dir) / "config.json").read_text(encoding="utf-8"))
    return ExperimentConfig.from_dict(meta["experiment"]), meta


def load_run_model(ckpt_path, config_path=None):
    """Rebuild a model from a checkpoint and its run ``config.json``."""
    ckpt_path = Path(ckpt_path)
    config_path = Path(config_path) if config_path else ckpt_path.parent / "config.json"
    meta = json.loads(config_path.read_text(encoding="utf-8"))
    cfg = ExperimentConfig.from_dict(meta["experiment"])
    chash, tensors = load_checkpoint(ckpt_path)
    if chash != cfg.hash():
        raise TrainingError(f"{ckpt_path} was written for a different config than {config_path}")
    manifest = dataio.read_manifest(cfg.dataset)
    model = build_model(cfg, manifest.shape, cfg.seeds[0])
    restore_model(model, tensors)
    stats = meta.get("normalization")
    if stats is not None:
        stats = (np.asarray(stats["mean"]), np.asarray(stats["std"]))
    return model, cfg, meta, stats


def evaluate_checkpoint(ckpt_path, split: str = "test", config_path=None) -> MetricsReport:
    model, cfg, meta, stats = load_run_model(ckpt_path, config_path)
    manifest, data, _ = load_data(cfg.dataset, splits=(split,), stats=stats, normalize=cfg.normalize)
    return evaluate_model(model, data[split], cfg, manifest.thresholds)


# --------------------------------------------------------------------------
# aggregation and ablation


def aggregate_seeds(records) -> dict[str, dict[str, float]]:
    """Mean, population std and best (max) of the summary scores across seeds."""
    reports = [r.test if isinstance(r, RunRecord) else r for r in records]
    reports = [r for r in reports if r is not None]
    if not reports:
        raise ValueError("aggregate_seeds needs at least one completed run")
    out = {}
    for cat, score in SUMMARY_METRICS:
        vals = np.array([r.get(cat, score) for r in reports], dtype=float)
        vals = vals[~np.isnan(vals)]
        key = f"{'heavy' if cat == 'heavy_rain' else 'rain'}_{score}"
        if vals.size == 0:
            out[key] = {"mean": math.nan, "std": math.nan, "best": math.nan, "n": 0}
        else:
            out[key] = {"mean": float(vals.mean()), "std": float(vals.std()),
                        "best": float(vals.max()), "n": int(vals.size)}
    return out


def ablation_config(base: ExperimentConfig, flags: dict[str, bool]) -> ExperimentConfig:
    loss = replace(base.loss,
                   enable_weighting=flags.get("weighted_loss", base.loss.enable_weighting),
                   enable_regression_branch=flags.get("multitask", base.loss.enable_regression_branch))
    cam = replace(base.cam, enabled=flags.get("cam", base.cam.enabled))
    tag = "_".join(f"{k}{int(v)}" for k, v in flags.items())
    return replace(base, name=f"{base.name}__{tag}", loss=loss, cam=cam)


@dataclass
class AblationRow:
    flags: dict[str, bool]
    summary: dict[str, dict[str, float]]
    parameter_count: int
    deltas: dict[str, float] = field(default_factory=dict)


@dataclass
class AblationTable:
    toggles: tuple[str, ...]
    rows: list[AblationRow]

    COLUMNS = ("rain_csi", "rain_hss", "heavy_csi", "heavy_hss")

    def to_dict(self) -> dict:
        return {
            "toggles": list(self.toggles),
            "rows": [{"flags": r.flags, "parameter_count": r.parameter_count,
                      **{c: _nn(r.summary[c]["mean"]) for c in self.COLUMNS},
                      "delta_pct": {c: _nn(r.deltas.get(c, math.nan)) for c in self.COLUMNS}}
                     for r in self.rows],
        }

    def to_csv(self) -> str:
        head = list(self.toggles) + ["parameter_count"] + list(self.COLUMNS) + \
            [f"{c}_delta_pct" for c in self.COLUMNS]
        lines = [",".join(head)]
        for r in self.rows:
            vals = [str(int(r.flags[t])) for t in self.toggles] + [str(r.parameter_count)]
            vals += [_csv(r.summary[c]["mean"]) for c in self.COLUMNS]
            vals += [_csv(r.deltas.get(c, math.nan)) for c in self.COLUMNS]
            lines.append(",".join(vals))
        return "\n".join(lines) + "\n"

    def format(self) -> str:
        tw = max(len(t) for t in self.toggles)
        head = " ".join(f"{t:>{tw}}" for t in self.toggles)
        lines = [f"{'':4}{head} | {'Rain CSI':>16} {'Rain HSS':>16} | {'Heavy CSI':>16} {'Heavy HSS':>16}"]
        for i, r in enumerate(self.rows):
            marks = " ".join(f"{'on' if r.flags[t] else 'off':>{tw}}" for t in self.toggles)
            cells = []
            for c in self.COLUMNS:
                v = r.summary[c]["mean"]
                d = r.deltas.get(c, math.nan)
                txt = "  -  " if math.isnan(v) else f"{v:.3f}"
                if i and not math.isnan(d):
                    txt += f" ({d:+.1f}%)"
                cells.append(f"{txt:>16}")
            lines.append(f"({chr(97 + i)}) {marks} | {cells[0]} {cells[1]} | {cells[2]} {cells[3]}")
        return "\n".join(lines)


def _nn(v):
    return None if isinstance(v, float) and math.isnan(v) else v


def _csv(v: float) -> str:
    return "" if math.isnan(v) else repr(float(v))


def _run_cell(cfg_dict: dict, runs_root: str, overwrite: bool):
    cfg = ExperimentConfig.from_dict(cfg_dict)
    records = train(cfg, runs_root, overwrite)
    done = [r for r in records if r.test is not None]
    if not done:
        raise TrainingError(f"every seed diverged for {cfg.name}")
    return aggregate_seeds(done), records[0].parameter_count


def run_ablation(base: ExperimentConfig, toggles=ABLATION_TOGGLES, runs_root=None,
                 overwrite: bool = False, workers: int = 1) -> AblationTable:
    """Train every on/off combination of ``toggles`` (all-on first) and tabulate.

    Deltas are relative changes (%) against the all-on row.
    """
    toggles = tuple(toggles)
    unknown = set(toggles) - set(ABLATION_TOGGLES)
    if unknown or not toggles:
        raise ValueError(f"toggles must be a non-empty subset of {ABLATION_TOGGLES}")
    runs_root = str(runs_root if runs_root is not None else default_runs_root())
    combos = [dict(zip(toggles, bits)) for bits in itertools.product((True, False), repeat=len(toggles))]
    cfgs = [ablation_config(base, flags).to_dict() for flags in combos]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_run_cell, cfgs, [runs_root] * len(cfgs), [overwrite] * len(cfgs)))
    else:
        results = [_run_cell(c, runs_root, overwrite) for c in cfgs]
    rows = [AblationRow(flags, summ, n) for flags, (summ, n) in zip(combos, results)]
    ref = rows[0].summary
    for r in rows:
        for c in AblationTable.COLUMNS:
            base_v, v = ref[c]["mean"], r.summary[c]["mean"]
            r.deltas[c] = math.nan if (math.isnan(base_v) or base_v == 0) else 100.0 * (v - base_v) / base_v
    return AblationTable(toggles, rows)
