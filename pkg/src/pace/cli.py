"""``pace`` command-line entry point.

Every command loads and validates the config, checks that its inputs
exist and its outputs are writable, and only then starts writing.
Files are written to a temporary name and moved into place.

Exit codes: 0 success, 2 config error, 3 missing or unreadable artifact,
4 numeric divergence.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import shutil
import sys
from pathlib import Path

import numpy as np

from . import baseline as BL
from . import blackbox as bb
from . import config as C
from . import evalkit as E
from . import explainer as X
from . import plotting
from . import pnm
from . import synthparts as S
from .container import FormatError
from .tensor import NumericError

log = logging.getLogger("pace")

EXIT_OK, EXIT_CONFIG, EXIT_ARTIFACT, EXIT_DIVERGED = 0, 2, 3, 4

BB_FILE = "blackbox.bin"
PACE_FILE = "explainer.bin"
BASELINE_FILE = "baseline.bin"


class ArtifactError(RuntimeError):
    pass


# -- file helpers -----------------------------------------------------------

def _require(path: Path, what: str) -> Path:
    if not path.exists():
        raise ArtifactError(f"missing {what}: {path}")
    return path


def _check_writable(directory: Path) -> None:
    p = directory.resolve()
    while not p.exists():
        p = p.parent
    if not p.is_dir() or not os.access(p, os.W_OK):
        raise C.ConfigError(f"output path not writable: {directory}")


def _write(path: Path, data: bytes | str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    if isinstance(data, str):
        data = data.encode()
    tmp.write_bytes(data)
    os.replace(tmp, path)


def _json(obj) -> str:
    return json.dumps(obj, indent=1, sort_keys=True) + "\n"


def _load_dataset(cfg: C.RunConfig) -> S.LabeledDataset:
    _require(cfg.dataset_dir / "meta.json", "dataset (run 'pace gen')")
    try:
        ds = S.load_dataset(cfg.dataset_dir)
    except (OSError, ValueError, KeyError) as exc:
        raise ArtifactError(f"unreadable dataset in {cfg.dataset_dir}: {exc}") from exc
    if ds.num_classes != cfg.num_classes:
        raise ArtifactError(f"dataset has {ds.num_classes} classes, config says "
                            f"{cfg.num_classes}; re-run 'pace gen'")
    return ds


def _load_ckpt(path: Path, loader, what: str):
    _require(path, what)
    try:
        return loader(path.read_bytes())
    except (FormatError, ValueError) as exc:
        raise ArtifactError(f"unreadable {what} {path}: {exc}") from exc


def _load_bb(cfg: C.RunConfig) -> bb.BlackBox:
    model = _load_ckpt(cfg.checkpoint_dir / BB_FILE, bb.load_checkpoint,
                       "black-box checkpoint (run 'pace train-bb')")
    if model.num_classes != cfg.num_classes:
        raise ArtifactError("black-box class count differs from config; re-run 'pace train-bb'")
    return model


def _load_pace(cfg: C.RunConfig) -> X.ExplainerBank:
    return _load_ckpt(cfg.checkpoint_dir / PACE_FILE, X.load_checkpoint,
                      "explainer checkpoint (run 'pace train-pace')")


def _fmaps(model: bb.BlackBox, images: np.ndarray) -> np.ndarray:
    return np.concatenate([bb.feature_map(model, images[i:i + 256])
                           for i in range(0, len(images), 256)])


# -- commands -----------------------------------------------------------------

def cmd_gen(cfg: C.RunConfig, args) -> None:
    _check_writable(cfg.root)
    ds = S.generate(cfg.seed, cfg.num_classes, cfg.images_per_class)
    tmp = cfg.root / "dataset.tmp"
    if tmp.exists():
        shutil.rmtree(tmp)
    S.save_dataset(ds, tmp)
    if cfg.dataset_dir.exists():
        shutil.rmtree(cfg.dataset_dir)
    os.replace(tmp, cfg.dataset_dir)
    counts = {t: int((ds.split == t).sum()) for t in S.SPLITS}
    print(f"dataset: {len(ds)} images, {cfg.num_classes} classes, splits {counts} "
          f"-> {cfg.dataset_dir}")


def cmd_train_bb(cfg: C.RunConfig, args) -> None:
    ds = _load_dataset(cfg)
    _check_writable(cfg.root)
    train, val, test = ds.subset("train"), ds.subset("val"), ds.subset("test")
    model, history = bb.train_blackbox(train, cfg.blackbox_config())
    report = {"history": history,
              "val_accuracy": bb.accuracy(model, val.images, val.labels) if len(val) else None,
              "test_accuracy": bb.accuracy(model, test.images, test.labels) if len(test) else None}
    _write(cfg.checkpoint_dir / BB_FILE, bb.save_checkpoint(model))
    _write(cfg.report_dir / "blackbox.json", _json(report))
    _png(cfg.report_dir / "blackbox_loss.png", plotting.loss_figure, history, ["loss", "train_acc"])
    print(f"black-box: test accuracy {report['test_accuracy']}")


def cmd_train_pace(cfg: C.RunConfig, args) -> None:
    ds = _load_dataset(cfg)
    model = _load_bb(cfg)
    _check_writable(cfg.root)
    train = ds.subset("train")
    bank, history = X.train_explainer(model, None, cfg.explainer_config(),
                                      fmaps=_fmaps(model, train.images))
    _write(cfg.checkpoint_dir / PACE_FILE, X.save_checkpoint(bank))
    _write(cfg.report_dir / "explainer.json", _json({"history": history}))
    _png(cfg.report_dir / "explainer_loss.png", plotting.loss_figure, history,
         ["total", "ce", "relevance", "diversity", "triplet"])
    print(f"explainer: final total loss {history[-1]['total']:.4f}" if history
          else "explainer: 0 epochs, initial bank saved")


def cmd_baseline(cfg: C.RunConfig, args) -> None:
    ds = _load_dataset(cfg)
    model = _load_bb(cfg)
    _check_writable(cfg.root)
    train = ds.subset("train")
    bank = BL.fit_baseline(model, None, cfg.num_concepts, cfg.embed_dim, cfg.sub_seed("kmeans"),
                           fmaps=_fmaps(model, train.images))
    _write(cfg.checkpoint_dir / BASELINE_FILE, BL.save_checkpoint(bank))
    info = {"omitted_classes": bank.omitted,
            "rank_deficient": [bool(p.rank_deficient) if p is not None else None
                               for p in bank.pca]}
    _write(cfg.report_dir / "baseline.json", _json(info))
    print(f"baseline: {bank.num_classes - len(bank.omitted)} class modules fitted")


def _explanation_dict(ex: X.Explanation, files: list[tuple[str, str]] | None = None) -> dict:
    concepts = []
    for j, r in enumerate(ex.relevance):
        entry = {"index": j, "relevance": float(r)}
        if ex.percentages is not None:
            entry["percent"] = float(ex.percentages[j])
        if files is not None:
            entry["mask_file"], entry["presence_file"] = files[j]
        concepts.append(entry)
    return {"predicted_label": ex.predicted_label,
            "explainer_probs": ex.explainer_probs.tolist(),
            "black_box_probs": ex.black_box_probs.tolist(),
            "degenerate": ex.degenerate,
            "concepts": concepts}


def _heatmap_u8(h: np.ndarray) -> np.ndarray:
    lo, hi = float(h.min()), float(h.max())
    if hi - lo <= 0:
        return np.zeros(h.shape, dtype=np.uint8)
    return np.round(255.0 * (h - lo) / (hi - lo)).astype(np.uint8)


def write_explanation(out: Path, image: np.ndarray, ex: X.Explanation) -> None:
    files = []
    for j in range(len(ex.relevance)):
        heat, pres = f"concept_{j}_heatmap.pgm", f"concept_{j}_presence.pgm"
        _pgm(out / heat, _heatmap_u8(ex.heatmaps[j]))
        _pgm(out / pres, ex.presence_upsampled[j].astype(np.uint8) * 255)
        files.append((heat, pres))
    _write(out / "explanation.json", _json(_explanation_dict(ex, files)))
    _png(out / "explanation.png", plotting.explanation_figure, image, ex)


def cmd_explain(cfg: C.RunConfig, args) -> None:
    if not args.image:
        raise C.ConfigError("explain needs --image <path.ppm>")
    image_path = _require(Path(args.image), "input image")
    out = Path(args.out) if args.out else cfg.report_dir / "explain" / image_path.stem
    model = _load_bb(cfg)
    bank = _load_pace(cfg)
    try:
        image = pnm.read_ppm(image_path)
    except (OSError, ValueError) as exc:
        raise ArtifactError(f"unreadable image {image_path}: {exc}") from exc
    if image.shape != model.input_shape:
        raise ArtifactError(f"image is {image.shape}, black-box expects {model.input_shape}")
    _check_writable(out)
    ex = X.explain(model, bank, image)
    write_explanation(out, image, ex)
    pct = "degenerate" if ex.degenerate else ", ".join(f"{p:+.1f}%" for p in ex.percentages)
    print(f"predicted {ex.predicted_label}; relevance {np.round(ex.relevance, 4).tolist()}; {pct}")


def curated_example(model, bank, dataset) -> int | None:
    """First test image whose explanation has percentages and both signs of relevance."""
    for i in range(len(dataset)):
        ex = X.explain(model, bank, dataset.images[i])
        if not ex.degenerate and (ex.relevance > 0).any() and (ex.relevance < 0).any():
            return i
    return None


def evaluate(cfg: C.RunConfig, ds, model, bank, base) -> tuple[dict, str]:
    test = ds.subset("test")
    if len(test) == 0:
        raise ArtifactError("dataset has an empty test split")
    fm = _fmaps(model, test.images)
    pace = E.agreement_accuracy(model, bank, test.images, fmaps=fm)
    base_rep = E.agreement_accuracy(model, base, test.images, fmaps=fm) if base else None
    loc = E.localization_iou(bank, model, test, cfg.permutations, cfg.sub_seed("null"))
    digest = E.misclassification_digest(model, bank, test)
    bb_acc = bb.accuracy(model, test.images, test.labels)
    curated = curated_example(model, bank, test)
    report = {
        "black_box_test_accuracy": bb_acc,
        "pace_agreement": pace.to_dict(),
        "baseline_agreement": base_rep.to_dict() if base_rep else None,
        "localization": loc.to_dict(),
        "misclassifications": digest,
        "curated_example": None,
    }
    if curated is not None:
        ex = X.explain(model, bank, test.images[curated])
        report["curated_example"] = {"test_index": curated, **_explanation_dict(ex)}
    rows = [{"metric": "black_box_test_accuracy_pct", "value": 100.0 * bb_acc},
            {"metric": "pace_agreement_pct", "value": pace.accuracy},
            {"metric": "baseline_agreement_pct",
             "value": base_rep.accuracy if base_rep else None},
            {"metric": "localization_fraction_above_null_p95", "value": loc.fraction_exceeding},
            {"metric": "black_box_test_errors", "value": len(digest)}]
    table = E.summary_table(rows, ["metric", "value"])
    loc_rows = [{"class": c.class_index, "concept": c.concept, "best_part": c.best_part,
                 "mean_iou": c.mean_iou, "null_p95": c.null_p95,
                 "exceeds": int(c.exceeds_null), "relevance_rank": c.relevance_rank}
                for c in loc.concepts]
    table += "\n" + E.summary_table(loc_rows, ["class", "concept", "best_part", "mean_iou",
                                               "null_p95", "exceeds", "relevance_rank"])
    return report, table


def cmd_eval(cfg: C.RunConfig, args) -> None:
    ds = _load_dataset(cfg)
    model = _load_bb(cfg)
    bank = _load_pace(cfg)
    base_path = cfg.checkpoint_dir / BASELINE_FILE
    base = _load_ckpt(base_path, BL.load_checkpoint, "baseline checkpoint") \
        if base_path.exists() else None
    out = Path(args.out) if args.out else cfg.report_dir
    _check_writable(out)
    report, table = evaluate(cfg, ds, model, bank, base)
    _write(out / "eval.json", _json(report))
    _write(out / "summary.txt", table)
    bars = [("PACE", report["pace_agreement"]["accuracy"])]
    if report["baseline_agreement"]:
        bars.append(("PCA+K-means", report["baseline_agreement"]["accuracy"]))
    _png(out / "agreement.png", plotting.agreement_figure, report["black_box_test_accuracy"], bars)
    loc = E.LocalizationReport([E.ConceptLocalization(**c)
                                for c in report["localization"]["concepts"]], cfg.permutations)
    _png(out / "localization.png", plotting.localization_figure, loc)
    if report["curated_example"] is not None:
        i = report["curated_example"]["test_index"]
        test = ds.subset("test")
        write_explanation(out / "curated_example", test.images[i],
                          X.explain(model, bank, test.images[i]))
    sys.stdout.write(table)


def _png(path: Path, draw, *args) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.stem + ".tmp.png")
    draw(*args, tmp)
    os.replace(tmp, path)


def _pgm(path: Path, img: np.ndarray) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    pnm.write_pgm(tmp, img)
    os.replace(tmp, path)


COMMANDS = {"gen": cmd_gen, "train-bb": cmd_train_bb, "train-pace": cmd_train_pace,
            "baseline": cmd_baseline, "explain": cmd_explain, "eval": cmd_eval}


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(prog="pace", description="Posthoc concept extraction "
                                     "for a small CNN on synthetic part images.")
    parser.add_argument("command", choices=sorted(COMMANDS))
    parser.add_argument("--config", required=True, help="flat key = value config file")
    parser.add_argument("--image", help="P6 PPM image for 'explain'")
    parser.add_argument("--out", help="output directory for 'explain' / 'eval'")
    parser.add_argument("-v", "--verbose", action="store_true")
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = C.load(args.config)
        COMMANDS[args.command](cfg, args)
    except C.ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ArtifactError as exc:
        print(f"artifact error: {exc}", file=sys.stderr)
        return EXIT_ARTIFACT
    except NumericError as exc:
        print(f"numeric divergence: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
