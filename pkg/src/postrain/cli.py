"""Command-line entry point: ``postrain <subcommand> ...``.

Exit codes: 0 success, 1 I/O failure, 2 validation/usage failure,
3 every seed diverged, 130 interrupted.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import math
import sys
from pathlib import Path

import numpy as np

from . import dataio, trainer
from .backbones import ConfigError
from .config import (ConfigKeyError, ExperimentConfig, apply_overrides, flatten, load_config,
                     preset, toy)
from .dataio import CLASS_NAMES, DataError, LoadError, SyntheticSpec, ValidationError
from .multitask import LossError
from .verification import MetricsReport, format_report

EXIT_OK, EXIT_IO, EXIT_VALIDATION, EXIT_DIVERGED, EXIT_INTERRUPT = 0, 1, 2, 3, 130
CLASS_COLORS = ("#f0f0f0", "#4c9be8", "#d7301f")


class CliError(Exception):
    def __init__(self, msg: str, code: int):
        super().__init__(msg)
        self.code = code


def config_key_help() -> str:
    lines = ["config keys (override with --override key=value; values parse as JSON):"]
    for k, v in flatten(ExperimentConfig()).items():
        lines.append(f"  {k} = {json.dumps(v)}")
    return "\n".join(lines)


def _write_text(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8", newline="\n")


def _csv_text(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def _resolve_config(args) -> ExperimentConfig:
    if args.config and args.preset:
        raise CliError("give either --config or --preset, not both", EXIT_VALIDATION)
    if args.config:
        path = Path(args.config)
        if not path.is_file():
            raise CliError(f"config file {path} not found", EXIT_IO)
        cfg = load_config(path)
    elif args.preset:
        cfg = toy() if args.preset == "toy" else preset(args.preset, args.backbone or "swin_unet")
    else:
        raise CliError("--config or --preset is required", EXIT_VALIDATION)
    overrides = list(args.override or [])
    if args.dataset:
        overrides.append(f"dataset={json.dumps(args.dataset)}")
    cfg = apply_overrides(cfg, overrides)
    cfg.validate()
    if not cfg.dataset:
        raise CliError("no dataset given (set 'dataset' in the config or pass --dataset)", EXIT_VALIDATION)
    manifest = dataio.read_manifest(cfg.dataset)
    trainer.resolve_backbone(cfg.backbone, manifest.shape).validate()
    return cfg


def _runs_root(args) -> Path:
    return Path(args.out) if args.out else trainer.default_runs_root()


# --------------------------------------------------------------------------
# subcommands


def cmd_gen_synthetic(args) -> int:
    if args.spec:
        path = Path(args.spec)
        if not path.is_file():
            raise CliError(f"spec file {path} not found", EXIT_IO)
        try:
            d = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise CliError(f"{path}: invalid JSON ({exc})", EXIT_VALIDATION) from exc
        spec = SyntheticSpec.from_json(d)
    else:
        spec = SyntheticSpec()
    if args.seed is not None:
        spec = SyntheticSpec.from_json({**spec.to_json(), "seed": args.seed})
    out = Path(args.out)
    if out.exists() and any(out.iterdir()):
        if not args.overwrite:
            raise CliError(f"{out} is not empty; pass --overwrite to replace it", EXIT_IO)
        import shutil
        shutil.rmtree(out)
    summary = dataio.generate_synthetic(spec, out)
    dataio.validate_dataset(out)
    props = summary["proportions"]
    print(f"wrote {spec.total_samples} samples ({summary['pixels']} pixels) to {out}")
    for name, p, target in zip(CLASS_NAMES, props, spec.class_proportions):
        print(f"  {name:<11} {100 * p:6.2f}%  (target {100 * target:.2f}%)")
    return EXIT_OK


def cmd_validate_data(args) -> int:
    info = dataio.validate_dataset(args.dataset)
    total = sum(info["class_counts"])
    info["proportions"] = [c / total for c in info["class_counts"]] if total else [0.0, 0.0, 0.0]
    info["manifest_sha256"] = dataio.manifest_hash(args.dataset)
    print(json.dumps(info, indent=2))
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _resolve_config(args)
    root = _runs_root(args)
    records = trainer.train(cfg, root, overwrite=args.overwrite)
    done = [r for r in records if r.test is not None]
    for r in records:
        if r.test is None:
            print(f"seed {r.seed}: diverged ({r.diverged})")
        else:
            print(f"seed {r.seed}: best epoch {r.best_epoch}, test rain CSI "
                  f"{_fmt(r.test.get('rain', 'csi'))}, heavy CSI {_fmt(r.test.get('heavy_rain', 'csi'))}")
    print(f"runs written under {root / cfg.name}")
    if not done:
        return EXIT_DIVERGED
    return EXIT_OK if len(done) == len(records) else EXIT_IO


def cmd_evaluate(args) -> int:
    ckpt = Path(args.ckpt)
    if not ckpt.is_file():
        raise CliError(f"checkpoint {ckpt} not found", EXIT_IO)
    rep = trainer.evaluate_checkpoint(ckpt, args.split, args.config)
    text = rep.to_json()
    if args.json_out:
        _write_text(Path(args.json_out), text)
    print(text, end="")
    print(format_report(rep, args.split))
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = _resolve_config(args)
    toggles = tuple(t.strip() for t in args.toggles.split(",") if t.strip())
    bad = set(toggles) - set(trainer.ABLATION_TOGGLES)
    if bad or not toggles:
        raise CliError(f"--toggles must be a subset of {','.join(trainer.ABLATION_TOGGLES)}",
                       EXIT_VALIDATION)
    root = _runs_root(args)
    table = trainer.run_ablation(cfg, toggles, root, overwrite=args.overwrite, workers=args.workers)
    out = root / f"{cfg.name}__ablation"
    _write_text(out / "ablation.json", json.dumps(table.to_dict(), indent=2) + "\n")
    _write_text(out / "ablation.csv", table.to_csv())
    _write_text(out / "ablation.txt", table.format() + "\n")
    print(table.format())
    print(f"tables written to {out}")
    return EXIT_OK


# --------------------------------------------------------------------------
# report


def _seed_dirs(path: Path) -> list[Path]:
    if (path / "config.json").is_file():
        return [path]
    found = sorted((p for p in path.iterdir() if (p / "config.json").is_file()),
                   key=lambda p: (not p.name.isdigit(), int(p.name) if p.name.isdigit() else 0, p.name))
    if not found:
        raise CliError(f"{path} contains no completed runs", EXIT_IO)
    return found


def collect_runs(paths) -> dict[str, list[dict]]:
    """Group seed run directories by experiment name."""
    groups: dict[str, list[dict]] = {}
    hashes = {}
    for p in paths:
        p = Path(p)
        if not p.is_dir():
            raise CliError(f"run directory {p} not found", EXIT_IO)
        for d in _seed_dirs(p):
            meta = json.loads((d / "config.json").read_text(encoding="utf-8"))
            name = meta["experiment"]["name"]
            hashes.setdefault(meta["dataset_hash"], []).append(str(d))
            test = d / "test_metrics.json"
            rep = MetricsReport.from_dict(json.loads(test.read_text(encoding="utf-8"))) if test.is_file() else None
            groups.setdefault(name, []).append({"dir": d, "meta": meta, "test": rep})
    if len(hashes) > 1:
        detail = "; ".join(f"{h[:12]}: {', '.join(ds)}" for h, ds in sorted(hashes.items()))
        raise CliError(f"runs were trained on different datasets, refusing to compare ({detail})",
                       EXIT_VALIDATION)
    return groups


def _fmt(v) -> str:
    return "-" if v is None or (isinstance(v, float) and math.isnan(v)) else f"{v:.3f}"


def _cell(s: dict) -> str:
    return f"{_fmt(s['mean'])}({_fmt(s['std'])}) {_fmt(s['best'])}"


def _summary(groups):
    rows = []
    for name in sorted(groups):
        reps = [r["test"] for r in groups[name] if r["test"] is not None]
        if not reps:
            continue
        rows.append((name, len(reps), trainer.aggregate_seeds(reps)))
    if not rows:
        raise CliError("no completed run has test metrics", EXIT_IO)
    return rows


def _summary_md(rows) -> str:
    cols = ("rain_csi", "rain_hss", "heavy_csi", "heavy_hss")
    heads = ("Rain CSI", "Rain HSS", "Heavy Rain CSI", "Heavy Rain HSS")
    out = ["| Model | Seeds | " + " | ".join(f"{h} Mean(Std) Best" for h in heads) + " |",
           "|---|---|" + "---|" * len(cols)]
    for name, n, agg in rows:
        out.append(f"| {name} | {n} | " + " | ".join(_cell(agg[c]) for c in cols) + " |")
    return "\n".join(out) + "\n"


def _summary_csv(rows) -> str:
    cols = ("rain_csi", "rain_hss", "heavy_csi", "heavy_hss")
    header = ["model", "seeds"] + [f"{c}_{s}" for c in cols for s in ("mean", "std", "best")]
    body = []
    for name, n, agg in rows:
        body.append([name, n] + ["" if math.isnan(agg[c][s]) else repr(agg[c][s])
                                 for c in cols for s in ("mean", "std", "best")])
    return _csv_text(header, body)


def _loss_curves(groups):
    rows = []
    for name in sorted(groups):
        for r in groups[name]:
            path = r["dir"] / "log.jsonl"
            if not path.is_file():
                continue
            per_epoch: dict[int, list] = {}
            for line in path.read_text(encoding="utf-8").splitlines():
                rec = json.loads(line)
                per_epoch.setdefault(rec["epoch"], []).append(rec)
            for ep in sorted(per_epoch):
                recs = per_epoch[ep]
                rows.append([name, r["meta"]["seed"], ep] +
                            [repr(float(np.mean([x[k] for x in recs]))) for k in ("loss_cls", "loss_reg", "loss_total")])
    return rows


def _class_maps(groups, n_samples: int):
    """Observed and predicted test class grids for the first seed of each model."""
    out = []
    for name in sorted(groups):
        run = next((r for r in groups[name] if (r["dir"] / "ckpt_best.bin").is_file()), None)
        if run is None:
            continue
        model, cfg, meta, stats = trainer.load_run_model(run["dir"] / "ckpt_best.bin", run["dir"] / "config.json")
        _, data, _ = trainer.load_data(cfg.dataset, splits=("test",), stats=stats, normalize=cfg.normalize)
        test = data["test"]
        k = min(n_samples, len(test))
        pred = trainer.predict(model, test.x[:k])
        for i in range(k):
            out.append((name, test.ids[i], test.classes[i].numpy(), pred[i]))
    return out


def _plots(out: Path, rows, curves, maps) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    from matplotlib.colors import ListedColormap
    from matplotlib.patches import Patch

    names = [r[0] for r in rows]
    x = np.arange(len(names))
    fig, ax = plt.subplots(figsize=(max(4, 1.6 * len(names) + 2), 3.5))
    for j, (key, label) in enumerate((("rain_csi", "Rain"), ("heavy_csi", "Heavy Rain"))):
        means = [r[2][key]["mean"] for r in rows]
        stds = [r[2][key]["std"] for r in rows]
        ax.bar(x + (j - 0.5) * 0.38, means, 0.38, yerr=stds, capsize=3, label=label)
    ax.set_xticks(x, names, rotation=20, ha="right")
    ax.set_ylabel("CSI")
    ax.set_ylim(0, 1)
    ax.legend()
    fig.tight_layout()
    fig.savefig(out / "csi_bar.png", dpi=120)
    plt.close(fig)

    fig, ax = plt.subplots(figsize=(6, 3.5))
    series: dict[tuple, tuple[list, list]] = {}
    for name, seed, ep, _, _, hyb in curves:
        s = series.setdefault((name, seed), ([], []))
        s[0].append(ep)
        s[1].append(float(hyb))
    for (name, seed), (eps, vals) in series.items():
        ax.plot(eps, vals, label=f"{name} seed {seed}")
    ax.set_xlabel("epoch")
    ax.set_ylabel("mean hybrid loss per step")
    if series:
        ax.set_yscale("log")
        ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(out / "loss_curves.png", dpi=120)
    plt.close(fig)

    if maps:
        cmap = ListedColormap(CLASS_COLORS)
        fig, axes = plt.subplots(len(maps), 2, figsize=(6, 3 * len(maps)), squeeze=False)
        for i, (name, sid, obs, pred) in enumerate(maps):
            for j, (grid, title) in enumerate(((obs, "observed"), (pred, "predicted"))):
                ax = axes[i, j]
                ax.imshow(grid, cmap=cmap, vmin=-0.5, vmax=2.5, interpolation="nearest")
                ax.set_title(f"{name} {sid} {title}", fontsize=8)
                ax.set_xticks([])
                ax.set_yticks([])
        fig.legend(handles=[Patch(color=c, label=n) for c, n in zip(CLASS_COLORS, CLASS_NAMES)],
                   loc="lower center", ncol=3)
        fig.tight_layout(rect=(0, 0.06, 1, 1))
        fig.savefig(out / "class_maps.png", dpi=120)
        plt.close(fig)


def cmd_report(args) -> int:
    groups = collect_runs(args.runs)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = _summary(groups)
    _write_text(out / "summary.md", _summary_md(rows))
    _write_text(out / "summary.csv", _summary_csv(rows))
    _write_text(out / "summary.json", json.dumps(
        {name: {"seeds": n, **{k: {s: (None if math.isnan(v) else v) for s, v in d.items()}
                               for k, d in agg.items()}} for name, n, agg in rows}, indent=2) + "\n")
    bars = [[name, cat, repr(agg[key]["mean"]), repr(agg[key]["std"])]
            for name, _, agg in rows for key, cat in (("rain_csi", "rain"), ("heavy_csi", "heavy_rain"))]
    _write_text(out / "csi_bar.csv", _csv_text(["model", "category", "csi_mean", "csi_std"], bars))
    curves = _loss_curves(groups)
    _write_text(out / "loss_curves.csv",
                _csv_text(["model", "seed", "epoch", "loss_cls", "loss_reg", "loss_total"], curves))
    maps = _class_maps(groups, args.samples) if args.samples > 0 else []
    map_rows = []
    for name, sid, obs, pred in maps:
        for kind, grid in (("observed", obs), ("predicted", pred)):
            for r, row in enumerate(grid):
                map_rows.append([name, sid, kind, r, " ".join(str(int(v)) for v in row)])
    _write_text(out / "class_maps.csv", _csv_text(["model", "sample_id", "kind", "row", "classes"], map_rows))
    if not args.no_plots:
        _plots(out, rows, curves, maps)
    print(_summary_md(rows), end="")
    print(f"report written to {out}")
    return EXIT_OK


# --------------------------------------------------------------------------
# parser


def _add_config_args(p) -> None:
    p.add_argument("--config", help="experiment config JSON")
    p.add_argument("--preset", choices=("korea", "germany", "china", "toy"),
                   help="start from a built-in configuration instead of --config")
    p.add_argument("--backbone", choices=("swin_unet", "unet", "convlstm"),
                   help="backbone for --preset (region presets only)")
    p.add_argument("--dataset", help="dataset directory (overrides the config)")
    p.add_argument("--override", action="append", metavar="KEY=VALUE",
                   help="dotted config key override; repeatable")
    p.add_argument("--out", help="run root (default: $POSTRAIN_RUNS_DIR or ./runs)")
    p.add_argument("--overwrite", action="store_true", help="replace existing run directories")


def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.RawDescriptionHelpFormatter
    keys = config_key_help()
    parser = argparse.ArgumentParser(prog="postrain", description=__doc__, epilog=keys, formatter_class=fmt)
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-synthetic", help="generate a synthetic imbalanced dataset")
    p.add_argument("--spec", help="synthetic spec JSON (default: Korea-like proportions)")
    p.add_argument("--out", required=True, help="output dataset directory")
    p.add_argument("--seed", type=int, help="override the SyntheticSpec seed")
    p.add_argument("--overwrite", action="store_true")
    p.set_defaults(func=cmd_gen_synthetic)

    p = sub.add_parser("validate-data", help="load and check every sample of a dataset")
    p.add_argument("dataset")
    p.set_defaults(func=cmd_validate_data)

    p = sub.add_parser("train", help="train one model per seed", epilog=keys, formatter_class=fmt)
    _add_config_args(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="score a checkpoint on a split")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--split", default="test", choices=dataio.SPLITS)
    p.add_argument("--config", help="run config.json (default: next to the checkpoint)")
    p.add_argument("--json-out", help="also write the metrics JSON here")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("ablate", help="train on/off combinations of framework components",
                       epilog=keys, formatter_class=fmt)
    _add_config_args(p)
    p.add_argument("--toggles", default=",".join(trainer.ABLATION_TOGGLES),
                   help="comma-separated subset of weighted_loss,multitask,cam")
    p.add_argument("--workers", type=int, default=1, help="parallel training processes")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("report", help="summary tables and plots for run directories")
    p.add_argument("runs", nargs="+", help="experiment or seed run directories")
    p.add_argument("--out", required=True, help="report directory")
    p.add_argument("--samples", type=int, default=2, help="test samples shown as class maps")
    p.add_argument("--no-plots", action="store_true", help="write tables and CSVs only")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except (ValidationError, ConfigKeyError, ConfigError, LossError, trainer.SelectionError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (LoadError, OSError, DataError, trainer.TrainingError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except KeyboardInterrupt:
        print("interrupted; completed epoch artifacts are kept", file=sys.stderr)
        return EXIT_INTERRUPT


if __name__ == "__main__":
    sys.exit(main())
