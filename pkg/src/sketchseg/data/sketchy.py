"""Sketchy-style on-disk layout.

::

    root/<class_name>/photos/<instance_id>.png
    root/<class_name>/sketches/<instance_id>_<k>.json
    root/<class_name>/masks/<instance_id>.png      (optional, eval only)
    root/dataset.json                              (manifest)
"""

from __future__ import annotations

import json
import re
from pathlib import Path

import numpy as np
from PIL import Image

from .generator import GeneratorConfig, class_names
from .types import DatasetError, PairedDataset, PhotoRecord, VectorSketch

MANIFEST_NAME = "dataset.json"
_SKETCH_RE = re.compile(r"^(\d+)_(\d+)\.json$")


def save_dataset(
    dataset: PairedDataset,
    root: str | Path,
    config: GeneratorConfig | None = None,
    seed: int | None = None,
) -> Path:
    root = Path(root)
    names = class_names(config) if config else None
    for sketch, photo in dataset.pairs:
        cname = names[photo.class_id] if names else f"class_{photo.class_id:03d}"
        cdir = root / cname
        (cdir / "photos").mkdir(parents=True, exist_ok=True)
        (cdir / "sketches").mkdir(parents=True, exist_ok=True)
        img = Image.fromarray((photo.pixels * 255.0 + 0.5).astype(np.uint8))
        img.save(cdir / "photos" / f"{photo.instance_id}.png")
        (cdir / "sketches" / f"{photo.instance_id}_0.json").write_text(sketch.to_json())
        if photo.gt_mask is not None:
            (cdir / "masks").mkdir(exist_ok=True)
            Image.fromarray((photo.gt_mask * 255).astype(np.uint8)).save(
                cdir / "masks" / f"{photo.instance_id}.png"
            )

    manifest = {
        "classes": names or sorted({f"class_{p.class_id:03d}" for _, p in dataset.pairs}),
        "association": dataset.association,
        "class_split": {"seen": dataset.class_split[0], "unseen": dataset.class_split[1]},
        "sample_split": {"train": dataset.sample_split[0], "test": dataset.sample_split[1]},
        "seed": seed,
        "generator_config": config.to_dict() if config else None,
    }
    (root / MANIFEST_NAME).write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return root / MANIFEST_NAME


def load_sketchy_format(root_path: str | Path, association: str) -> PairedDataset:
    root = Path(root_path)
    if not root.is_dir():
        raise DatasetError(f"dataset root {root} does not exist")

    manifest = None
    manifest_path = root / MANIFEST_NAME
    if manifest_path.exists():
        manifest = json.loads(manifest_path.read_text())

    if manifest and manifest.get("classes"):
        names = list(manifest["classes"])
    else:
        names = sorted(d.name for d in root.iterdir() if d.is_dir())
    if not names:
        raise DatasetError(f"no class directories under {root}")
    class_of = {name: i for i, name in enumerate(names)}

    pairs: list[tuple[VectorSketch, PhotoRecord]] = []
    for name in names:
        cdir = root / name
        if not cdir.is_dir():
            raise DatasetError(f"manifest lists class {name!r} but {cdir} is missing")
        cid = class_of[name]
        photo_dir = cdir / "photos"
        sketch_dir = cdir / "sketches"
        photo_ids = {
            int(p.stem): p for p in sorted(photo_dir.glob("*.png"))
        } if photo_dir.is_dir() else {}

        sketch_files = sorted(sketch_dir.glob("*.json")) if sketch_dir.is_dir() else []
        if not sketch_files:
            raise DatasetError(f"class {name!r} has no sketches")
        for sfile in sketch_files:
            m = _SKETCH_RE.match(sfile.name)
            if not m:
                raise DatasetError(f"unrecognised sketch filename {sfile}")
            iid = int(m.group(1))
            if iid not in photo_ids:
                raise DatasetError(
                    f"orphan sketch {sfile}: no photo for instance id {iid} in class {name!r}"
                )
            sketch = VectorSketch.from_json(sfile.read_text(), class_id=cid, instance_id=iid)
            sketch.validate()

            pixels = np.asarray(Image.open(photo_ids[iid]).convert("RGB"), dtype=np.float32) / 255.0
            mask_file = cdir / "masks" / f"{iid}.png"
            gt = None
            if mask_file.exists():
                gt = (np.asarray(Image.open(mask_file).convert("L")) >= 128).astype(np.uint8)
            pairs.append(
                (sketch, PhotoRecord(pixels=pixels, class_id=cid, instance_id=iid, gt_mask=gt))
            )

    if manifest:
        class_split = (
            list(manifest["class_split"]["seen"]),
            list(manifest["class_split"]["unseen"]),
        )
        sample_split = (
            list(manifest["sample_split"]["train"]),
            list(manifest["sample_split"]["test"]),
        )
    else:
        class_split = (sorted({p.class_id for _, p in pairs}), [])
        sample_split = (sorted(p.instance_id for _, p in pairs), [])

    return PairedDataset(
        pairs=pairs,
        association=association,
        class_split=class_split,
        sample_split=sample_split,
    )
