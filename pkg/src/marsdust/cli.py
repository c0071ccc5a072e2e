"""Command-line entry point.

Exit codes: 0 success, 1 usage or config error, 2 data/runtime error
(missing paths, unreadable inputs, partial filter runs).
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from . import config as config_mod
from . import plots
from .dataset_io import (
    DUSTY,
    LABELS,
    NOT_DUSTY,
    PATCH_SIZE,
    SPLITS,
    DecodeError,
    ManifestError,
    compute_channel_stats,
    load_manifest,
    load_patch,
    load_rows,
    load_split_arrays,
    prepare_split,
)

log = logging.getLogger("marsdust")

EXIT_OK, EXIT_USAGE, EXIT_DATA = 0, 1, 2


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# -- shared helpers --------------------------------------------------------


def _dump(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, default=float))


def _manifest(cfg):
    path = config_mod.manifest_path(cfg)
    if not path.exists():
        raise DataError(f"manifest {path} does not exist")
    return load_manifest(path, cfg["columns"])


def _load_folder(folder: Path) -> tuple[np.ndarray, list[str]]:
    names, images = [], []
    for p in sorted(x for x in folder.iterdir() if x.is_file()):
        try:
            patch = load_patch(p)
        except DecodeError as exc:
            log.warning("skipping %s: %s", p.name, exc)
            continue
        if patch.shape != PATCH_SIZE:
            log.warning("skipping %s: shape %s", p.name, patch.shape)
            continue
        names.append(p.name)
        images.append(patch.pixels)
    stack = np.stack(images) if images else np.zeros((0, *PATCH_SIZE), np.uint8)
    return stack, names


def _load_array_file(path: Path, keys: Sequence[str]) -> tuple[np.ndarray, list[str]]:
    if path.suffix == ".npy":
        arr = np.load(path, allow_pickle=False)
        return arr, [str(i) for i in range(len(arr))]
    with np.load(path, allow_pickle=False) as z:
        for key in keys:
            if key in z.files:
                arr = z[key]
                break
        else:
            raise DataError(f"{path} has none of the arrays {list(keys)} (found {z.files})")
    names = [str(i) for i in range(len(arr))]
    if key in (DUSTY, NOT_DUSTY):
        import zipfile

        with zipfile.ZipFile(path) as zf:
            if f"{key}_names.json" in zf.namelist():
                names = json.loads(zf.read(f"{key}_names.json"))
    return arr, names


def _images(source: Path | None, cfg, split: str, label: str | None, keys: Sequence[str]) -> tuple[np.ndarray, list[str]]:
    """Raw uint8 patches from a folder, an .npy/.npz file, or the manifest split."""
    if source is not None:
        if not source.exists():
            raise DataError(f"input {source} does not exist")
        return _load_folder(source) if source.is_dir() else _load_array_file(source, keys)
    m = _manifest(cfg)
    rows = [r for r in m.select(split) if label is None or r.label == label]
    order = np.random.default_rng(cfg["seed"]).permutation(len(rows))
    patches = load_rows(m, [rows[i] for i in order], workers=cfg["workers"])
    if not patches:
        raise DataError(f"no {label or ''} patches in split {split!r}")
    return np.stack([p.pixels for p in patches]), [p.id for p in patches]


def _limit(arr: np.ndarray, names: list[str], n: int):
    return (arr[:n], names[:n]) if n and n < len(arr) else (arr, names)


def _to_unit(arr: np.ndarray) -> np.ndarray:
    arr = np.asarray(arr)
    return arr.astype(np.float32) / 255.0 if arr.dtype == np.uint8 else arr.astype(np.float32)


# -- subcommands -----------------------------------------------------------


def cmd_ingest(args, cfg) -> int:
    m = _manifest(cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    summary = {"counts": m.counts(), "labels": {s: m.label_counts(s) for s in SPLITS}, "unreadable": [], "wrong_shape": []}
    train_patches = []
    for split in SPLITS:
        for row in m.select(split):
            try:
                patch = load_patch(m.resolve(row), label=row.label, split=row.split)
            except (DecodeError, OSError) as exc:
                summary["unreadable"].append({"path": row.image_path, "reason": str(exc)})
                continue
            if patch.shape != PATCH_SIZE:
                summary["wrong_shape"].append({"path": row.image_path, "shape": list(patch.shape)})
            if split == "train":
                train_patches.append(patch)
    if train_patches:
        summary["train_stats"] = compute_channel_stats(train_patches).to_dict()
    if args.cache_size:
        side = args.cache_size
        for split in SPLITS:
            if m.select(split):
                load_split_arrays(m, split, seed=cfg["seed"], target=(side, side), cache_dir=out / "cache", workers=cfg["workers"])
    _dump(out / "ingest.json", summary)
    log.info("manifest splits %s", summary["counts"])
    print(json.dumps(summary["counts"]))
    return EXIT_DATA if summary["unreadable"] else EXIT_OK


def cmd_analyze_noise(args, cfg) -> int:
    from .noise_model import histogram

    stack, _ = _images(Path(args.input) if args.input else None, cfg, args.split, args.label, (args.label or DUSTY, "noisy"))
    h = histogram(list(stack))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "histogram.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["level", "count", "smoothed"])
        for level, (c, s) in enumerate(zip(h.counts, h.smoothed)):
            w.writerow([level, int(c), float(s)])
    _dump(out / "peaks.json", {"peaks": h.peaks, "n_images": len(stack), "total_pixels": int(h.total)})
    plots.histogram(h.counts, h.smoothed, h.peaks, out / "histogram.png")
    print(json.dumps({"peaks": h.peaks}))
    return EXIT_OK


def cmd_noise(args, cfg) -> int:
    from .noise_model import MID_HIGH_BANDS, DEFAULT_BANDS, add_salt_pepper, derive_seeds, make_noisy_dataset

    ncfg = cfg["noise"]
    clean, names = _images(Path(args.input) if args.input else None, cfg, args.split, NOT_DUSTY, ("clean", NOT_DUSTY))
    bands = MID_HIGH_BANDS if ncfg["bands"] == "mid_high" else DEFAULT_BANDS
    seeds = derive_seeds(cfg["seed"], len(clean))
    if ncfg["kind"] == "salt_pepper":
        noisy = np.stack([add_salt_pepper(c, ncfg["fraction"], s) for c, s in zip(clean, seeds)]) if len(clean) else clean.copy()
    elif ncfg["kind"] == "dust":
        pairs = make_noisy_dataset(list(clean), ncfg["level"], ncfg["low_high_ratio"], cfg["seed"], bands)
        noisy = np.stack([n for n, _ in pairs]) if pairs else clean.copy()
    else:
        raise UsageError(f"unknown noise kind {ncfg['kind']!r}")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    from .dataset_io import save_npy

    save_npy(out / "noisy.npy", noisy.astype(np.uint8))
    save_npy(out / "clean.npy", clean.astype(np.uint8))
    _dump(out / "noise.json", {**ncfg, "bands_values": bands, "seed": cfg["seed"], "pair_seeds": seeds, "names": names, "n": len(clean)})
    return EXIT_OK


def _classifier_data(cfg, split: str):
    m = _manifest(cfg)
    items = prepare_split(m, split, cfg["seed"], workers=cfg["workers"])
    if not items:
        raise DataError(f"split {split!r} is empty")
    n = cfg["classifier"]["max_train"] if split == "train" else 0
    if n:
        items = items[:n]
    raw = np.stack([p.pixels for p, _ in items])
    y = np.array([c for _, c in items], dtype=np.int64)
    return raw, y, [p for p, _ in items]


def cmd_train(args, cfg) -> int:
    from .classifiers import (
        SVMConfig,
        TorchClassifier,
        TrainHyperparams,
        build_cnn,
        build_transfer_model,
        evaluate,
        fit_pca_svm,
        elbow_point,
    )

    ccfg = cfg["classifier"]
    kind = ccfg["model"]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    raw_tr, y_tr, patches_tr = _classifier_data(cfg, "train")
    raw_va, y_va, _ = _classifier_data(cfg, "val")
    raw_te, y_te, _ = _classifier_data(cfg, "test")
    metrics: dict = {"model": kind, "seed": cfg["seed"], "n_train": len(y_tr), "n_val": len(y_va), "n_test": len(y_te)}

    if kind == "svm":
        svm_cfg = SVMConfig(C=ccfg["svm_c"], n_components=ccfg["svm_components"] or None)
        clf, full = fit_pca_svm(raw_tr.astype(np.float64) / 255.0, y_tr, svm_cfg)
        metrics["pca_components"] = clf.pca.n_components
        metrics["explained_variance_ratio"] = full.explained_variance_ratio.tolist()
        plots.variance_ratio(full.explained_variance_ratio, elbow_point(full.explained_variance_ratio), out / "pca_variance.png")
    elif kind in ("cnn", "transfer"):
        torch.manual_seed(cfg["seed"])
        if kind == "cnn":
            net, stats = build_cnn(), None
        else:
            weights = ccfg["transfer_weights"] or None
            net = build_transfer_model(weights if weights != "none" else None, allow_download=ccfg["allow_download"])
            stats = compute_channel_stats(patches_tr)
        clf = TorchClassifier(net, kind, stats, {"hidden": [512, 128], "dropout": 0.3} if kind == "transfer" else {})
        hyper = TrainHyperparams(learning_rate=ccfg["learning_rate"], epochs=ccfg["epochs"], batch_size=ccfg["batch_size"])
        _, history = _train_torch(clf, raw_tr, y_tr, raw_va, y_va, hyper, cfg["seed"])
        metrics["history"] = [asdict(h) for h in history]
        with open(out / "history.csv", "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=list(asdict(history[0])))
            w.writeheader()
            w.writerows(asdict(h) for h in history)
        plots.loss_curves({"train": [h.train_loss for h in history], "val": [h.val_loss for h in history]}, out / "loss_curve.png")
    else:
        raise UsageError(f"unknown classifier {kind!r}; choose svm, cnn or transfer")

    clf.save(out / "model", {"seed": cfg["seed"]})
    report = evaluate(clf.predict(raw_te), y_te)
    metrics["test"] = report.to_dict()
    metrics["train_accuracy"] = float((clf.predict(raw_tr) == y_tr).mean())
    _dump(out / "metrics.json", metrics)
    plots.confusion_matrix(report.confusion, LABELS, out / "confusion.png")
    print(report.table())
    return EXIT_OK


def _train_torch(clf, raw_tr, y_tr, raw_va, y_va, hyper, seed):
    from .classifiers import train_classifier

    x_tr = clf.preprocess(raw_tr).numpy()
    x_va = clf.preprocess(raw_va).numpy()
    return train_classifier(clf.net, (x_tr, y_tr), (x_va, y_va), hyper, seed=seed)


def cmd_eval(args, cfg) -> int:
    from .classifiers import evaluate, load_classifier

    model_dir = Path(args.model_dir)
    if not model_dir.is_dir():
        raise DataError(f"model directory {model_dir} does not exist")
    clf = load_classifier(model_dir)
    m = _manifest(cfg)
    items = prepare_split(m, args.split, cfg["seed"], workers=cfg["workers"])
    if not items:
        raise DataError(f"split {args.split!r} is empty")
    raw = np.stack([p.pixels for p, _ in items])
    y = np.array([c for _, c in items])
    report = evaluate(clf.predict(raw), y)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _dump(out / "metrics.json", {"split": args.split, "model_dir": str(model_dir), **report.to_dict()})
    (out / "report.txt").write_text(report.table() + "\n")
    plots.confusion_matrix(report.confusion, LABELS, out / "confusion.png")
    print(report.table())
    return EXIT_OK


def cmd_filter(args, cfg) -> int:
    from .filter_pipeline import run_filter

    folder = Path(args.input)
    if not folder.is_dir():
        raise DataError(f"input folder {folder} does not exist")
    if not Path(args.model_dir).is_dir():
        raise DataError(f"model directory {args.model_dir} does not exist")
    manifest = run_filter(folder, Path(args.model_dir), Path(args.out), batch=args.batch)
    print(json.dumps({"n_dusty": manifest.n_dusty, "n_not_dusty": manifest.n_not_dusty, "n_skipped": manifest.n_skipped}))
    if manifest.n_skipped or manifest.n_dusty + manifest.n_not_dusty == 0:
        log.warning("filter finished with %d skipped files and %d classified", manifest.n_skipped, manifest.n_dusty + manifest.n_not_dusty)
        return EXIT_DATA
    return EXIT_OK


def _split_clean(cfg, args, section: str):
    """Clean training and validation patches for the denoisers."""
    n = cfg[section]["max_train"]
    if args.input:
        clean, _ = _images(Path(args.input), cfg, "train", NOT_DUSTY, ("clean", NOT_DUSTY))
        clean, _ = _limit(clean, [], n)
        k = max(1, len(clean) // 10) if len(clean) > 1 else 0
        return clean[k:], clean[:k]
    train, names = _images(None, cfg, "train", NOT_DUSTY, ())
    train, _ = _limit(train, names, n)
    val, vnames = _images(None, cfg, "val", NOT_DUSTY, ())
    val, _ = _limit(val, vnames, max(1, n // 5) if n else 0)
    return train, val


def cmd_train_ae(args, cfg) -> int:
    from .autoencoder import AETrainConfig, build_autoencoder, denoise, prepare_pairs, save_denoiser, train_denoiser, train_reconstruction
    from .metrics import evaluate_denoiser

    acfg = cfg["autoencoder"]
    train_raw, val_raw = _split_clean(cfg, args, "autoencoder")
    torch.manual_seed(cfg["seed"])
    model = build_autoencoder(acfg["variant"], acfg["base_filters"])
    side = model.arch.input_size
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    history: dict = {}
    if acfg["pretrain_epochs"]:
        _, clean = prepare_pairs(train_raw, 0.0, side)
        pre = AETrainConfig(acfg["pretrain_epochs"], acfg["batch_size"], learning_rate=acfg["learning_rate"], loss=acfg["loss"])
        _, history["reconstruction"] = train_reconstruction(model, clean, pre, seed=cfg["seed"])
    noisy, clean = prepare_pairs(train_raw, acfg["noise_level"], side, cfg["noise"]["low_high_ratio"], cfg["seed"])
    val = None
    if len(val_raw):
        val = prepare_pairs(val_raw, acfg["noise_level"], side, cfg["noise"]["low_high_ratio"], cfg["seed"] + 1)
    tc = AETrainConfig(acfg["epochs"], acfg["batch_size"], learning_rate=acfg["learning_rate"], loss=acfg["loss"])
    _, history["denoising"] = train_denoiser(model, noisy, clean, tc, seed=cfg["seed"], val=val)
    save_denoiser(model, out / "model", {"seed": cfg["seed"], "noise_level": acfg["noise_level"], "loss": acfg["loss"]})
    _dump(out / "history.json", history)
    hist = history["denoising"]
    plots.loss_curves({"train": [h["loss"] for h in hist], "val": [h.get("val_loss", np.nan) for h in hist]}, out / "loss_curve.png")
    metrics = {"final_loss": hist[-1]["loss"], "final_val_loss": hist[-1].get("val_loss")}
    if val is not None:
        metrics["val_restored"] = evaluate_denoiser(denoise(model, val[0]), val[1]).means()
        metrics["val_noisy"] = evaluate_denoiser(val[0], val[1]).means()
    _dump(out / "metrics.json", metrics)
    print(json.dumps(metrics, default=float))
    return EXIT_OK


def cmd_train_pix2pix(args, cfg) -> int:
    from .autoencoder import save_denoiser
    from .noise_model import noisy_array
    from .pix2pix import GanConfig, restore_batch, summarize_history, train_pix2pix
    from .metrics import evaluate_denoiser

    pcfg = cfg["pix2pix"]
    train_raw, val_raw = _split_clean(cfg, args, "pix2pix")
    ratio = cfg["noise"]["low_high_ratio"]
    noisy = noisy_array(train_raw, pcfg["noise_level"], ratio, cfg["seed"])
    gc = GanConfig(
        epochs=pcfg["epochs"],
        base_filters=pcfg["base_filters"],
        lambda_l1=pcfg["lambda_l1"],
        generator_lr=pcfg["generator_lr"],
        discriminator_lr=pcfg["discriminator_lr"],
    )
    out = Path(args.out)
    gen, history = train_pix2pix(list(zip(noisy, train_raw)), gc, seed=cfg["seed"], out_dir=out / "checkpoints")
    save_denoiser(gen, out / "model", {"seed": cfg["seed"], "noise_level": pcfg["noise_level"]})
    epochs = sorted({r.epoch for r in history})
    per_epoch = [summarize_history(history, e) for e in epochs]
    _dump(out / "loss_summary.json", per_epoch)
    plots.loss_curves({k: [s[k] for s in per_epoch] for k in ("gen_l1", "disc_loss", "gen_adversarial")}, out / "loss_curve.png")
    metrics = {"final_epoch": per_epoch[-1]}
    if len(val_raw):
        val_noisy = noisy_array(val_raw, pcfg["noise_level"], ratio, cfg["seed"] + 1)
        restored = restore_batch(gen, list(val_noisy))
        metrics["val_restored"] = evaluate_denoiser(restored, _to_unit(val_raw), match_resolution=True).means()
    _dump(out / "metrics.json", metrics)
    print(json.dumps(metrics, default=float))
    return EXIT_OK


def _load_backend(model_dir: Path, backend: str):
    from .autoencoder import Autoencoder, load_denoiser

    if not model_dir.is_dir():
        raise DataError(f"model directory {model_dir} does not exist")
    model = load_denoiser(model_dir)
    kind = "autoencoder" if isinstance(model, Autoencoder) else "pix2pix"
    if backend not in ("auto", kind):
        raise UsageError(f"--backend {backend} but {model_dir} holds a {kind} model")
    return model, kind


def _restore(model, kind: str, noisy_raw: np.ndarray) -> np.ndarray:
    """Restored unit-range stack at the model's working resolution."""
    from .autoencoder import denoise
    from .dataset_io import batch_resize
    from .pix2pix import restore_batch

    if kind == "pix2pix":
        return restore_batch(model, list(noisy_raw))
    side = model.arch.input_size
    return denoise(model, batch_resize(_to_unit(noisy_raw), (side, side)))


def cmd_denoise(args, cfg) -> int:
    model, kind = _load_backend(Path(args.model_dir), args.backend)
    noisy, names = _images(Path(args.input), cfg, "test", None, ("noisy", DUSTY))
    restored = _restore(model, kind, noisy)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    np.savez_compressed(out, restored=restored.astype(np.float32), names=np.array(names, dtype=str))
    print(json.dumps({"backend": kind, "n": len(restored), "resolution": list(restored.shape[1:])}))
    return EXIT_OK


def cmd_sweep(args, cfg) -> int:
    from .autoencoder import noise_sweep, write_sweep_csv
    from .metrics import evaluate_denoiser
    from .noise_model import noisy_array

    model, kind = _load_backend(Path(args.model_dir), args.backend)
    clean, _ = _images(Path(args.input) if args.input else None, cfg, "test", NOT_DUSTY, ("clean", NOT_DUSTY))
    clean, _ = _limit(clean, [], args.max_images or 0)
    levels = [float(v) for v in cfg["sweep"]["levels"]]
    if levels != sorted(levels):
        raise UsageError("sweep levels must be sorted ascending")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ratio = cfg["noise"]["low_high_ratio"]
    if kind == "autoencoder":
        reports = noise_sweep(model, clean, levels, seed=cfg["seed"], low_high_ratio=ratio)
    else:
        reports = {}
        for level in levels:
            restored = _restore(model, kind, noisy_array(clean, level, ratio, cfg["seed"]))
            reports[level] = evaluate_denoiser(restored, _to_unit(clean), match_resolution=True)
    write_sweep_csv(reports, out / "sweep.csv")
    means = {lv: r.means() for lv, r in reports.items()}
    _dump(out / "sweep.json", {str(k): v for k, v in means.items()})
    plots.sweep(levels, {k: [means[lv][k] for lv in levels] for k in ("mae", "psnr", "ssim", "msssim")}, out / "sweep.png")
    print((out / "sweep.csv").read_text(), end="")
    return EXIT_OK


def cmd_metrics(args, cfg) -> int:
    from .metrics import evaluate_denoiser

    restored, names = _images(Path(args.restored), cfg, "test", None, ("restored", "noisy"))
    clean, _ = _images(Path(args.clean), cfg, "test", None, ("clean", NOT_DUSTY))
    report = evaluate_denoiser(_to_unit(restored), _to_unit(clean), match_resolution=args.match_resolution, pair_ids=names)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    report.write_json(out / "metrics.json")
    report.write_csv(out / "per_pair.csv")
    print(json.dumps(report.means(), default=float))
    return EXIT_OK


# -- parser ----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML config (or a previous config_resolved.json)")
    common.add_argument("--seed", type=int)
    common.add_argument("--manifest", help="manifest CSV (relative paths resolve against data_root)")
    common.add_argument("--log-level", default="INFO")

    p = _Parser(prog="marsdust", description="Dust classification, filtering, noise synthesis and denoising for grayscale image patches.")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    def add(name: str, func: Callable, help: str) -> argparse.ArgumentParser:
        sp = sub.add_parser(name, parents=[common], help=help)
        sp.set_defaults(func=func)
        return sp

    sp = add("ingest", cmd_ingest, "validate the manifest and patches, report split counts")
    sp.add_argument("--out", required=True)
    sp.add_argument("--cache-size", type=int, default=0, help="also cache unit-range NPY arrays at this side length")

    sp = add("analyze-noise", cmd_analyze_noise, "pixel histogram and peaks of a patch set")
    sp.add_argument("--in", dest="input")
    sp.add_argument("--split", default="train", choices=SPLITS)
    sp.add_argument("--label", default=DUSTY, choices=LABELS)
    sp.add_argument("--out", required=True)

    sp = add("noise", cmd_noise, "write paired noisy/clean NPY arrays")
    sp.add_argument("--in", dest="input")
    sp.add_argument("--split", default="train", choices=SPLITS)
    sp.add_argument("--kind", choices=("dust", "salt_pepper"))
    sp.add_argument("--level", type=float)
    sp.add_argument("--ratio", type=float, help="share of noised pixels drawn from the low band")
    sp.add_argument("--bands", choices=("default", "mid_high"))
    sp.add_argument("--fraction", type=float, help="salt-and-pepper fraction")
    sp.add_argument("--out", required=True)

    sp = add("train", cmd_train, "train a dusty/not-dusty classifier")
    sp.add_argument("--model", choices=("svm", "cnn", "transfer"))
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--batch-size", type=int)
    sp.add_argument("--max-train", type=int)
    sp.add_argument("--out", required=True)

    sp = add("eval", cmd_eval, "evaluate a saved classifier on a split")
    sp.add_argument("--model-dir", required=True)
    sp.add_argument("--split", default="test", choices=SPLITS)
    sp.add_argument("--out", required=True)

    sp = add("filter", cmd_filter, "classify a folder of patches into an archive")
    sp.add_argument("--in", dest="input", required=True)
    sp.add_argument("--model-dir", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--batch", type=int, default=64)

    sp = add("train-ae", cmd_train_ae, "train an autoencoder denoiser")
    sp.add_argument("--in", dest="input", help="clean patches (folder, .npy or .npz) instead of the manifest")
    sp.add_argument("--variant")
    sp.add_argument("--noise-level", type=float)
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--batch-size", type=int)
    sp.add_argument("--base-filters", type=int)
    sp.add_argument("--loss", choices=("bce", "mse"))
    sp.add_argument("--pretrain-epochs", type=int)
    sp.add_argument("--max-train", type=int)
    sp.add_argument("--out", required=True)

    sp = add("train-pix2pix", cmd_train_pix2pix, "train the conditional GAN denoiser")
    sp.add_argument("--in", dest="input")
    sp.add_argument("--noise-level", type=float)
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--base-filters", type=int)
    sp.add_argument("--lambda-l1", type=float)
    sp.add_argument("--max-train", type=int)
    sp.add_argument("--out", required=True)

    sp = add("denoise", cmd_denoise, "restore noisy patches with a saved denoiser")
    sp.add_argument("--model-dir", required=True)
    sp.add_argument("--in", dest="input", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--backend", default="auto", choices=("auto", "autoencoder", "pix2pix"))

    sp = add("sweep", cmd_sweep, "restoration quality across noise levels")
    sp.add_argument("--model-dir", required=True)
    sp.add_argument("--in", dest="input")
    sp.add_argument("--levels", help="comma-separated ascending levels")
    sp.add_argument("--max-images", type=int)
    sp.add_argument("--backend", default="auto", choices=("auto", "autoencoder", "pix2pix"))
    sp.add_argument("--out", required=True)

    sp = add("metrics", cmd_metrics, "MAE/PSNR/SSIM/MS-SSIM between restored and clean arrays")
    sp.add_argument("--restored", required=True)
    sp.add_argument("--clean", required=True)
    sp.add_argument("--match-resolution", action="store_true")
    sp.add_argument("--out", required=True)
    return p


# flag name -> (config section or None, key)
_FLAG_KEYS = {
    "seed": (None, "seed"),
    "manifest": (None, "manifest"),
    "model": ("classifier", "model"),
    "max_train": (None, "max_train"),
    "kind": ("noise", "kind"),
    "level": ("noise", "level"),
    "ratio": ("noise", "low_high_ratio"),
    "bands": ("noise", "bands"),
    "fraction": ("noise", "fraction"),
    "variant": ("autoencoder", "variant"),
    "loss": ("autoencoder", "loss"),
    "pretrain_epochs": ("autoencoder", "pretrain_epochs"),
    "lambda_l1": ("pix2pix", "lambda_l1"),
}
_SECTION = {"train": "classifier", "train-ae": "autoencoder", "train-pix2pix": "pix2pix"}


def _flags(args) -> dict:
    flags: dict = {}
    section = _SECTION.get(args.command)
    for name, value in vars(args).items():
        if value is None:
            continue
        if name in _FLAG_KEYS:
            sec, key = _FLAG_KEYS[name]
            if name == "max_train":
                if section is None:
                    continue
                sec = section
            if sec is None:
                flags[key] = value
            else:
                flags.setdefault(sec, {})[key] = value
        elif name in ("epochs", "batch_size", "base_filters", "noise_level") and section is not None:
            flags.setdefault(section, {})[name] = value
    if getattr(args, "levels", None):
        try:
            flags["sweep"] = {"levels": [float(v) for v in args.levels.split(",")]}
        except ValueError as exc:
            raise UsageError(f"--levels: {exc}") from exc
    return flags


def _out_dir(args) -> Path:
    # file outputs (filter archive, denoise result) record their config next to the file
    out = Path(args.out)
    return out.parent if args.command in ("filter", "denoise") else out


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if not args.command:
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(
        level=getattr(logging, str(args.log_level).upper(), logging.INFO),
        format="%(asctime)s level=%(levelname)s logger=%(name)s %(message)s",
        stream=sys.stderr,
    )
    try:
        cfg = config_mod.resolve(args.config, _flags(args))
        torch.use_deterministic_algorithms(True, warn_only=True)
        argv_record = {k: v for k, v in vars(args).items() if k not in ("func", "config")}
        code = args.func(args, cfg)
        config_mod.write_resolved(_out_dir(args), args.command, argv_record, cfg)
        return code
    except (UsageError, config_mod.ConfigError) as exc:
        print(f"marsdust {args.command}: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, FileNotFoundError, ManifestError, DecodeError, OSError, ValueError, RuntimeError) as exc:
        print(f"marsdust {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
