"""Command-line front end.

Every command takes ``--out`` (its run directory), an optional ``--config``
JSON file and repeatable ``--set section.key=value`` overrides. Each
artifact-producing command writes one ``run_manifest.json`` and a
line-delimited JSON log (``log.jsonl``) into its run directory.

Exit codes: 0 success, 2 invalid configuration or arguments, 1 runtime failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
import time
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np

from . import __version__
from .config import ConfigError, RunConfig, default_config_text, load_config, parse_override

log = logging.getLogger("longichange")

RUN_MANIFEST = "run_manifest.json"
LOG_FILE = "log.jsonl"


class JsonLineFormatter(logging.Formatter):
    def format(self, record):
        doc = {"time": round(record.created, 3), "level": record.levelname,
               "logger": record.name, "message": record.getMessage()}
        if record.exc_info:
            doc["exception"] = self.formatException(record.exc_info)
        return json.dumps(doc)


def _setup_logging(out: Optional[Path], level: str):
    root = logging.getLogger()
    for h in list(root.handlers):
        if getattr(h, "_longichange", False):
            root.removeHandler(h)
            h.close()
    handlers = [logging.StreamHandler(sys.stderr)]
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        handlers.append(logging.FileHandler(out / LOG_FILE, mode="a"))
    for h in handlers:
        h.setFormatter(JsonLineFormatter())
        h._longichange = True
        root.addHandler(h)
    root.setLevel(getattr(logging, level.upper(), logging.INFO))


def _teardown_logging():
    root = logging.getLogger()
    for h in list(root.handlers):
        if getattr(h, "_longichange", False):
            root.removeHandler(h)
            h.close()


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def hash_tree(path) -> str:
    """Digest of a file, or of every file under a directory (by relative path)."""
    path = Path(path)
    if path.is_file():
        return sha256_file(path)
    h = hashlib.sha256()
    for f in sorted(p for p in path.rglob("*") if p.is_file()):
        if f.name in (RUN_MANIFEST, LOG_FILE):
            continue
        h.update(f.relative_to(path).as_posix().encode())
        h.update(bytes.fromhex(sha256_file(f)))
    return h.hexdigest()


def _dataset_root(path) -> Path:
    path = Path(path)
    return path if path.is_dir() else path.parent


def write_run_manifest(out: Path, command: str, cfg: RunConfig, inputs: Dict[str, str],
                       outputs: Dict[str, str], started: float, extra: dict = None) -> Path:
    doc = {
        "command": command,
        "config": cfg.to_dict(),
        "seed": cfg.seed,
        "code_version": __version__,
        "inputs": {k: {"path": str(v), "sha256": hash_tree(v)} for k, v in inputs.items()},
        "outputs": {k: {"path": str(v), "sha256": hash_tree(v)} for k, v in outputs.items()},
        "wall_time_s": round(time.time() - started, 3),
    }
    if extra:
        doc.update(extra)
    path = out / RUN_MANIFEST
    path.write_text(json.dumps(doc, indent=2))
    return path


# -- commands -----------------------------------------------------------------

def cmd_phantom(args, cfg: RunConfig, out: Path):
    from .io import save_pairs
    from .phantom import generate_dataset

    nc, ch = generate_dataset(cfg.phantom)
    manifest = save_pairs(nc + ch, out)
    log.info("wrote %d NoChange and %d Change pairs", len(nc), len(ch))
    return {}, {"dataset": out / "manifest.json", "manifest": manifest}, {}


def cmd_preprocess(args, cfg: RunConfig, out: Path):
    from .io import load_pairs, save_pairs
    from .volume import ScanPair, normalize_intensity, resample_isotropic

    pre = cfg.doc["preprocess"]
    result = []
    for p in load_pairs(args.data):
        def fix(v):
            v = resample_isotropic(v, pre["target_mm"])
            return normalize_intensity(v, pre["p_low"], pre["p_high"])
        mask = resample_isotropic(p.change_mask, pre["target_mm"]) if p.change_mask is not None else None
        result.append(ScanPair(fix(p.baseline), fix(p.followup), p.subject_id, mask, p.label))
    manifest = save_pairs(result, out)
    log.info("preprocessed %d pairs", len(result))
    return {"data": args.data}, {"dataset": manifest}, {}


def cmd_train_vae(args, cfg: RunConfig, out: Path):
    from .io import load_pairs
    from .training import train_vae, write_history

    pairs = load_pairs(args.data, label="NoChange")
    ckpt = out / "vae.npz"
    _, hist = train_vae(pairs, cfg.vae, cfg.vae_schedule, cfg.vae_crop_shape, checkpoint_path=ckpt)
    history = write_history(hist, out / "vae_history.csv")
    return {"data": args.data}, {"checkpoint": ckpt, "history": history}, {}


def cmd_synth_preview(args, cfg: RunConfig, out: Path):
    from .checkpoint import load_vae
    from .io import load_pairs
    from .supermix import save_synth_sample
    from .training import synth_stream
    from .viz import save_synth_overlay

    pairs = load_pairs(args.data, label="NoChange")
    vae = load_vae(args.vae)
    rows = []
    for i in range(args.n):
        s = synth_stream(pairs, vae, cfg.supermix, cfg.seed, i, cfg.crop_shape)
        stem = f"sample{i:03d}"
        save_synth_sample(s, out, stem)
        save_synth_overlay(s.x_prime.data, s.y_hat.data, out / f"{stem}.png")
        rows.append({"sample": stem, "n_seg": s.n_seg_used, "flipped_fraction": s.flipped_fraction,
                     "positive_voxels": int(s.y_hat.data.sum())})
    (out / "samples.json").write_text(json.dumps(rows, indent=2))
    return {"data": args.data, "vae": args.vae}, {"samples": out / "samples.json"}, {}


def cmd_train_detector(args, cfg: RunConfig, out: Path):
    from .checkpoint import load_vae
    from .io import load_pairs
    from .training import train_detector, write_history

    pairs = load_pairs(args.data, label="NoChange")
    vae = load_vae(args.vae)
    ckpt = out / "detector.npz"
    _, hist = train_detector(pairs, vae, cfg.detector, cfg.loss, cfg.supermix,
                             cfg.detector_schedule, cfg.crop_shape, checkpoint_path=ckpt)
    history = write_history(hist, out / "detector_history.csv")
    return {"data": args.data, "vae": args.vae}, {"checkpoint": ckpt, "history": history}, {}


def cmd_infer(args, cfg: RunConfig, out: Path):
    from .checkpoint import load_detector, read_checkpoint
    from .inference import postprocess, predict_change, write_blob_table
    from .io import load_pairs, save_volume
    from .viz import save_prediction_overlay

    net = load_detector(args.detector)
    inf = cfg.inference
    entries = []
    for p in load_pairs(args.data, label=args.label):
        prob = predict_change(p, net)
        blobs = postprocess(prob, inf["kappa"], inf["min_blob"], inf["connectivity"])
        d = out / p.subject_id
        save_volume(prob, d / "probability", p.subject_id)
        save_volume(prob.replace(data=blobs.to_mask(), role="binary_mask"), d / "blobs", p.subject_id)
        write_blob_table(blobs, d / "blobs.csv")
        truth = p.change_mask.data if p.change_mask is not None else None
        save_prediction_overlay(p.followup.data, blobs.to_mask(), d / "overlay.png", truth)
        entries.append({"subject_id": p.subject_id, "probability": f"{p.subject_id}/probability.raw",
                        "blobs": f"{p.subject_id}/blobs.raw", "n_blobs": len(blobs)})
        log.info("%s: %d blobs", p.subject_id, len(blobs))
    meta, _ = read_checkpoint(args.detector)
    doc = {"format": "longichange-predictions", "detector": meta, "inference": inf,
           "predictions": entries}
    (out / "predictions.json").write_text(json.dumps(doc, indent=2))
    return ({"data": args.data, "detector": args.detector},
            {"predictions": out / "predictions.json"}, {})


def cmd_evaluate(args, cfg: RunConfig, out: Path):
    from .evaluation import (aggregate, match_lesions, pair_metrics, write_pair_csv,
                             write_quartile_table, write_summary)
    from .inference import connected_components, postprocess
    from .io import load_pairs, load_volume

    pred_dir = _dataset_root(args.predictions)
    preds = json.loads((pred_dir / "predictions.json").read_text())
    by_id = {e["subject_id"]: e for e in preds["predictions"]}
    inf, ev = cfg.inference, cfg.evaluation
    results = []
    for p in load_pairs(args.data):
        if p.subject_id not in by_id:
            raise FileNotFoundError(f"no prediction for subject {p.subject_id!r} in {pred_dir}")
        prob = load_volume(pred_dir / by_id[p.subject_id]["probability"]).replace(role="probability")
        pred = postprocess(prob, inf["kappa"], inf["min_blob"], inf["connectivity"])
        if p.change_mask is not None:
            gt = connected_components(p.change_mask, inf["connectivity"])
        else:
            gt = connected_components(np.zeros(p.baseline.shape), inf["connectivity"])
        results.append(pair_metrics(match_lesions(gt, pred, ev["iou_min"]), p.subject_id))
    summary = aggregate(results)
    settings = {"kappa": inf["kappa"], "min_blob": inf["min_blob"],
                "connectivity": inf["connectivity"], "iou_min": ev["iou_min"],
                "detector": preds.get("detector", {})}
    pairs_csv = write_pair_csv(results, out / "pairs.csv")
    summary_json = write_summary(summary, out / "summary.json", settings)
    quartiles = write_quartile_table(summary, out / "quartiles.csv")
    log.info("LTPR %.3f LFPR %.3f PPV %.3f over %d pairs", summary["ltpr"]["mean"],
             summary["lfpr"]["mean"], summary["ppv"]["mean"], summary["n_pairs"])
    return ({"data": args.data, "predictions": pred_dir / "predictions.json"},
            {"pairs": pairs_csv, "summary": summary_json, "quartiles": quartiles}, {})


def report_row(summary: dict, name: str) -> dict:
    s = summary.get("settings", {})
    det = s.get("detector", {})
    loss = det.get("extra", {}).get("loss", {})
    arch = det.get("config", {})
    kind = loss.get("kind", "")
    return {
        "method": name,
        "loss": {"focal_tversky": "FTL", "bce": "BCE"}.get(kind, kind),
        "gamma": loss.get("gamma_final", ""),
        "l2": arch.get("l2_weight", ""),
        "blob": s.get("min_blob", ""),
        "ltpr": summary["ltpr"]["mean"],
        "lfpr": summary["lfpr"]["mean"],
        "ppv": summary["ppv"]["mean"],
    }


def cmd_report(args, cfg: RunConfig, out: Path):
    import csv

    rows = []
    inputs = {}
    for i, ev in enumerate(args.evaluations):
        ev = Path(ev)
        summary = json.loads((ev / "summary.json").read_text())
        rows.append(report_row(summary, ev.name))
        inputs[f"evaluation{i}"] = ev / "summary.json"
    cols = ["method", "loss", "gamma", "l2", "blob", "ltpr", "lfpr", "ppv"]
    table_csv = out / "table.csv"
    with open(table_csv, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=cols)
        w.writeheader()
        for r in rows:
            w.writerow({k: (f"{v:.4f}" if k in ("ltpr", "lfpr", "ppv") else v) for k, v in r.items()})
    lines = ["| Method | Loss | gamma | L2 | Blob | LTPR | LFPR | PPV |",
             "|---|---|---|---|---|---|---|---|"]
    for r in rows:
        lines.append(f"| {r['method']} | {r['loss']} | {r['gamma']} | {r['l2']} | {r['blob']} | "
                     f"{r['ltpr']:.3f} | {r['lfpr']:.3f} | {r['ppv']:.4f} |")
    table_md = out / "table.md"
    table_md.write_text("\n".join(lines) + "\n")
    print("\n".join(lines))
    return inputs, {"table_csv": table_csv, "table_md": table_md}, {}


COMMANDS = {
    "phantom": cmd_phantom,
    "preprocess": cmd_preprocess,
    "train-vae": cmd_train_vae,
    "synth-preview": cmd_synth_preview,
    "train-detector": cmd_train_detector,
    "infer": cmd_infer,
    "evaluate": cmd_evaluate,
    "report": cmd_report,
}

# flag -> dotted config key
FLAG_KEYS = {
    "seed": "seed",
    "n_pairs": "phantom.n_pairs",
    "change_probability": "phantom.change_probability",
    "kappa": "inference.kappa",
    "min_blob": "inference.min_blob",
    "iou_min": "evaluation.iou_min",
    "iterations": None,  # resolved per stage
    "lr": None,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--out", required=True, help="run directory for this command's outputs")
    common.add_argument("--config", help="JSON run config")
    common.add_argument("--set", dest="overrides", action="append", default=[],
                        metavar="SECTION.KEY=VALUE", help="override one config value (repeatable)")
    common.add_argument("--seed", type=int)
    common.add_argument("--log-level", default="info")

    parser = argparse.ArgumentParser(prog="longichange", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("--print-default-config", action="store_true",
                        help="print the default JSON config and exit")
    sub = parser.add_subparsers(dest="command")

    p = sub.add_parser("phantom", parents=[common], help="generate a synthetic dataset")
    p.add_argument("--n-pairs", type=int)
    p.add_argument("--change-probability", type=float)

    p = sub.add_parser("preprocess", parents=[common], help="resample and normalise a dataset")
    p.add_argument("--data", required=True)

    for name in ("train-vae", "train-detector"):
        p = sub.add_parser(name, parents=[common], help=f"{name.split('-')[1]} training stage")
        p.add_argument("--data", required=True)
        p.add_argument("--iterations", type=int, help="outer iterations")
        p.add_argument("--lr", type=float, help="initial learning rate")
        if name == "train-detector":
            p.add_argument("--vae", required=True, help="VAE checkpoint")

    p = sub.add_parser("synth-preview", parents=[common], help="dump SuperMix samples with overlays")
    p.add_argument("--data", required=True)
    p.add_argument("--vae", required=True)
    p.add_argument("--n", type=int, default=4)

    p = sub.add_parser("infer", parents=[common], help="predict change blobs")
    p.add_argument("--data", required=True)
    p.add_argument("--detector", required=True)
    p.add_argument("--label", choices=["Change", "NoChange"], help="only pairs with this label")
    p.add_argument("--kappa", type=float)
    p.add_argument("--min-blob", type=int)

    p = sub.add_parser("evaluate", parents=[common], help="score predictions lesion-wise")
    p.add_argument("--data", required=True)
    p.add_argument("--predictions", required=True, help="run directory of an infer command")
    p.add_argument("--kappa", type=float)
    p.add_argument("--min-blob", type=int)
    p.add_argument("--iou-min", type=float)

    p = sub.add_parser("report", parents=[common], help="summary table over evaluate runs")
    p.add_argument("evaluations", nargs="+", help="run directories of evaluate commands")
    return parser


def _flag_overrides(args) -> List:
    out = []
    for attr, key in FLAG_KEYS.items():
        value = getattr(args, attr, None)
        if value is None:
            continue
        if key is None:
            stage = "vae_schedule" if args.command == "train-vae" else "detector_schedule"
            key = f"{stage}.{'outer_iterations' if attr == 'iterations' else 'lr_initial'}"
        out.append((key, value))
    return out


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if args.print_default_config:
        print(default_config_text())
        return 0
    if not args.command:
        parser.print_usage(sys.stderr)
        return 2
    try:
        overrides = [parse_override(s) for s in args.overrides] + _flag_overrides(args)
        cfg = load_config(args.config, overrides)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2

    out = Path(args.out)
    _setup_logging(out, args.log_level)
    started = time.time()
    try:
        log.info("%s starting (seed %d)", args.command, cfg.seed)
        inputs, outputs, extra = COMMANDS[args.command](args, cfg, out)
        write_run_manifest(out, args.command, cfg, inputs, outputs, started, extra)
        log.info("%s finished in %.1fs", args.command, time.time() - started)
        return 0
    except ConfigError as exc:
        log.error("config error: %s", exc)
        return 2
    except Exception as exc:  # noqa: BLE001  (any failure maps to exit 1)
        log.error("%s failed: %s: %s", args.command, type(exc).__name__, exc)
        return 1
    finally:
        _teardown_logging()


if __name__ == "__main__":
    sys.exit(main())
