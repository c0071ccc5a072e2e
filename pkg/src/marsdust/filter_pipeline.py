"""Folder -> classifier -> archive of dusty / not-dusty patches.

Archive layout is a zip holding NPY v1.0 members ``dusty.npy`` and
``not_dusty.npy`` (uint8, shape (n, 100, 100)), the JSON name lists
``dusty_names.json`` / ``not_dusty_names.json`` and ``manifest.json``.
Member timestamps are fixed so identical inputs give identical bytes.
"""

from __future__ import annotations

import io
import json
import logging
import os
import tempfile
import zipfile
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Protocol

import numpy as np

from .dataset_io import DUSTY, NOT_DUSTY, PATCH_SIZE, DecodeError, load_patch

log = logging.getLogger(__name__)

MEMBERS = ("dusty.npy", "not_dusty.npy", "dusty_names.json", "not_dusty_names.json", "manifest.json")
_ZIP_TIME = (1980, 1, 1, 0, 0, 0)


class ArchiveError(ValueError):
    """Malformed archive; the message names the offending member."""


class Classifier(Protocol):
    def predict_proba(self, raw: np.ndarray) -> np.ndarray: ...


@dataclass
class ImageRecord:
    filename: str
    label: str
    probability: float  # P(dusty)


@dataclass
class ArchiveManifest:
    n_dusty: int
    n_not_dusty: int
    source_folder: str
    model_id: str
    created_at: str
    records: list[ImageRecord] = field(default_factory=list)
    skipped: list[dict] = field(default_factory=list)

    @property
    def n_skipped(self) -> int:
        return len(self.skipped)

    def names(self, label: str) -> list[str]:
        return [r.filename for r in self.records if r.label == label]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["n_skipped"] = self.n_skipped
        return d

    @classmethod
    def from_dict(cls, d: dict) -> ArchiveManifest:
        d = dict(d)
        d.pop("n_skipped", None)
        d["records"] = [ImageRecord(**r) for r in d.get("records", [])]
        return cls(**d)


def _npy_bytes(arr: np.ndarray) -> bytes:
    buf = io.BytesIO()
    np.lib.format.write_array(buf, np.ascontiguousarray(arr), version=(1, 0), allow_pickle=False)
    return buf.getvalue()


def _json_bytes(obj) -> bytes:
    return json.dumps(obj, indent=1, sort_keys=True).encode("utf-8")


def write_archive(path: str | Path, dusty: np.ndarray, not_dusty: np.ndarray, manifest: ArchiveManifest) -> None:
    """Atomically write the archive (temp file in the target directory, then rename)."""
    path = Path(path)
    payload = {
        "dusty.npy": _npy_bytes(dusty),
        "not_dusty.npy": _npy_bytes(not_dusty),
        "dusty_names.json": _json_bytes(manifest.names(DUSTY)),
        "not_dusty_names.json": _json_bytes(manifest.names(NOT_DUSTY)),
        "manifest.json": _json_bytes(manifest.to_dict()),
    }
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh, zipfile.ZipFile(fh, "w", zipfile.ZIP_DEFLATED) as zf:
            for name in MEMBERS:
                info = zipfile.ZipInfo(name, date_time=_ZIP_TIME)
                info.compress_type = zipfile.ZIP_DEFLATED
                info.external_attr = 0o644 << 16
                zf.writestr(info, payload[name])
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def read_archive(path: str | Path) -> tuple[dict[str, np.ndarray], ArchiveManifest]:
    path = Path(path)
    try:
        zf = zipfile.ZipFile(path)
    except zipfile.BadZipFile as exc:
        raise ArchiveError(f"{path}: not a zip archive") from exc
    with zf:
        present = set(zf.namelist())
        for name in MEMBERS:
            if name not in present:
                raise ArchiveError(f"{path}: missing member {name!r}")
        arrays = {}
        for key in (DUSTY, NOT_DUSTY):
            member = f"{key}.npy"
            try:
                arrays[key] = np.lib.format.read_array(io.BytesIO(zf.read(member)), allow_pickle=False)
            except ValueError as exc:
                raise ArchiveError(f"{path}: member {member!r} is not a valid NPY array: {exc}") from exc
        try:
            manifest = ArchiveManifest.from_dict(json.loads(zf.read("manifest.json")))
        except (ValueError, TypeError, KeyError) as exc:
            raise ArchiveError(f"{path}: member 'manifest.json' is malformed: {exc}") from exc
        for key in (DUSTY, NOT_DUSTY):
            member = f"{key}_names.json"
            names = json.loads(zf.read(member))
            if names != manifest.names(key) or len(names) != len(arrays[key]):
                raise ArchiveError(f"{path}: member {member!r} disagrees with manifest or array length")
    if manifest.n_dusty != len(arrays[DUSTY]) or manifest.n_not_dusty != len(arrays[NOT_DUSTY]):
        raise ArchiveError(f"{path}: member 'manifest.json' counts disagree with array lengths")
    return arrays, manifest


def _model_id(model_dir: Path) -> str:
    meta = model_dir / "metadata.json"
    arch = json.loads(meta.read_text()).get("architecture", "unknown") if meta.exists() else "unknown"
    return f"{arch}:{model_dir.name}"


def run_filter(
    folder: str | Path,
    model: str | Path | Classifier,
    out_path: str | Path,
    *,
    batch: int = 64,
    created_at: str | None = None,
    model_id: str | None = None,
) -> ArchiveManifest:
    """Classify every readable 100x100 patch in ``folder`` and archive both classes.

    ``model`` is a saved model directory or any object with ``predict_proba``.
    Files are processed in sorted-name order; unreadable or wrongly sized
    files are skipped and listed in the manifest.
    """
    folder = Path(folder)
    if not folder.is_dir():
        raise FileNotFoundError(f"input folder {folder} does not exist")
    if isinstance(model, (str, Path)):
        from .classifiers import load_classifier

        model_dir = Path(model)
        clf = load_classifier(model_dir)
        model_id = model_id or _model_id(model_dir)
    else:
        clf = model
        model_id = model_id or type(model).__name__

    names, images, skipped = [], [], []
    for p in sorted(x for x in folder.iterdir() if x.is_file()):
        try:
            patch = load_patch(p)
        except DecodeError as exc:
            log.warning("skipping %s: %s", p.name, exc)
            skipped.append({"filename": p.name, "reason": str(exc)})
            continue
        if patch.shape != PATCH_SIZE:
            log.warning("skipping %s: shape %s is not %s", p.name, patch.shape, PATCH_SIZE)
            skipped.append({"filename": p.name, "reason": f"shape {patch.shape} is not {PATCH_SIZE}"})
            continue
        names.append(p.name)
        images.append(patch.pixels)

    stack = np.stack(images) if images else np.zeros((0, *PATCH_SIZE), dtype=np.uint8)
    probs = np.zeros(len(stack))
    for i in range(0, len(stack), batch):
        probs[i : i + batch] = np.asarray(clf.predict_proba(stack[i : i + batch]))[:, 1]
    is_dusty = probs >= 0.5

    records = [ImageRecord(n, DUSTY if d else NOT_DUSTY, float(p)) for n, d, p in zip(names, is_dusty, probs)]
    manifest = ArchiveManifest(
        n_dusty=int(is_dusty.sum()),
        n_not_dusty=int((~is_dusty).sum()),
        source_folder=str(folder),
        model_id=model_id,
        created_at=created_at or datetime.now(timezone.utc).isoformat(timespec="seconds"),
        records=records,
        skipped=skipped,
    )
    write_archive(out_path, stack[is_dusty], stack[~is_dusty], manifest)
    log.info("filtered %d images: %d dusty, %d clear, %d skipped", len(stack), manifest.n_dusty, manifest.n_not_dusty, len(skipped))
    return manifest
