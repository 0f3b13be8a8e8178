"""HTTP inference service: gallery management and sketch-query segmentation.

Masks travel as base64 PNGs inside JSON. Identical requests replay from an
in-memory cache byte-exactly (single-flight per key); the cache key includes
the model hash, so swapping checkpoints invalidates it. At most four
segmentations run concurrently; excess requests receive 429.
"""

from __future__ import annotations

import base64
import hashlib
import io
import json
import os
import threading
import uuid
from pathlib import Path

import numpy as np
from fastapi import FastAPI, File, Request, UploadFile
from fastapi.responses import JSONResponse, Response
from fastapi.staticfiles import StaticFiles
from PIL import Image

from .augment import partition
from .checkpoints import file_sha256
from .data.types import DatasetError, VectorSketch
from .inference import RefineParams, confidence_score, segment_gallery
from .trainer import Segmenter

SYNC_GALLERY_LIMIT = 64
MAX_CONCURRENT_SEGMENTATIONS = 4

PNG_MAGIC = b"\x89PNG\r\n\x1a\n"
JPEG_MAGIC = b"\xff\xd8"


def mask_png_bytes(mask: np.ndarray) -> bytes:
    buf = io.BytesIO()
    Image.fromarray((mask.astype(np.uint8) * 255)).save(buf, format="PNG")
    return buf.getvalue()


def _sketch_from_payload(payload) -> VectorSketch:
    if not isinstance(payload, dict):
        raise DatasetError("sketch must be an object with canvas and strokes")
    sketch = VectorSketch.from_json(json.dumps(payload))
    sketch.validate()
    return sketch


class GalleryStore:
    """Disk-backed gallery registry; ids survive restarts."""

    def __init__(self, root: Path):
        self.root = root
        self.root.mkdir(parents=True, exist_ok=True)
        self._lock = threading.Lock()

    def create(self, files: list[tuple[str, bytes]]) -> str:
        entries = []
        for name, data in files:
            if data.startswith(PNG_MAGIC):
                pass
            elif data.startswith(JPEG_MAGIC):
                pass
            else:
                raise UnsupportedFormat(name)
            try:
                img = Image.open(io.BytesIO(data))
                img.load()
            except Exception as exc:
                raise CorruptImage(name) from exc
            entries.append((name, data, img.convert("RGB")))

        gallery_id = uuid.uuid4().hex[:12]
        gdir = self.root / gallery_id
        with self._lock:
            gdir.mkdir(parents=True)
            meta = []
            for photo_id, (name, data, img) in enumerate(entries):
                (gdir / f"{photo_id}.png").write_bytes(
                    data if data.startswith(PNG_MAGIC) else _reencode_png(img)
                )
                thumb = img.copy()
                thumb.thumbnail((64, 64))
                thumb.save(gdir / f"{photo_id}_thumb.png")
                meta.append({"photo_id": photo_id, "filename": name, "size": list(img.size)})
            (gdir / "gallery.json").write_text(json.dumps(meta))
        return gallery_id

    def get(self, gallery_id: str) -> list[dict] | None:
        gdir = self.root / gallery_id
        meta = gdir / "gallery.json"
        if not meta.exists():
            return None
        return json.loads(meta.read_text())

    def photos(self, gallery_id: str) -> list[np.ndarray]:
        meta = self.get(gallery_id)
        if meta is None:
            raise KeyError(gallery_id)
        out = []
        for entry in meta:
            img = Image.open(self.root / gallery_id / f"{entry['photo_id']}.png").convert("RGB")
            out.append(np.asarray(img, dtype=np.float32) / 255.0)
        return out


class UnsupportedFormat(Exception):
    pass


class CorruptImage(Exception):
    pass


def _reencode_png(img: Image.Image) -> bytes:
    buf = io.BytesIO()
    img.save(buf, format="PNG")
    return buf.getvalue()


def create_app(
    checkpoint: str | Path | None = None,
    data_dir: str | Path | None = None,
) -> FastAPI:
    checkpoint = checkpoint or os.environ.get("SKETCHSEG_CHECKPOINT")
    data_dir = Path(data_dir or os.environ.get("SKETCHSEG_DATA_DIR") or ".sketchseg")

    app = FastAPI(title="sketchseg", version="0.1.0")
    store = GalleryStore(data_dir / "galleries")

    state = {
        "model": None,
        "model_hash": None,
        "cache": {},  # key -> response bytes
        "locks": {},  # key -> threading.Lock (single flight)
        "jobs": {},  # job_id -> {"status", "body"}
    }
    locks_guard = threading.Lock()
    jobs_guard = threading.Lock()
    seg_slots = threading.BoundedSemaphore(MAX_CONCURRENT_SEGMENTATIONS)

    if checkpoint:
        state["model"] = Segmenter.from_checkpoint(checkpoint)
        state["model"].encoder.eval()
        state["model_hash"] = file_sha256(checkpoint)

    # -- status -------------------------------------------------------------

    @app.get("/health")
    async def health():
        return {"status": "ok", "loaded": state["model"] is not None}

    @app.get("/model")
    def model_info():
        model: Segmenter | None = state["model"]
        if model is None:
            return {"loaded": False}
        return {
            "loaded": True,
            "regime": model.regime,
            "checkpoint_hash": state["model_hash"],
            "tau": model.tau,
            "threshold": model.threshold,
        }

    # -- galleries ------------------------------------------------------------

    @app.post("/galleries")
    async def upload_gallery(files: list[UploadFile] = File(default=[])):
        if not files:
            return JSONResponse({"error": "empty upload"}, status_code=400)
        blobs = [(f.filename or f"file{i}", await f.read()) for i, f in enumerate(files)]
        try:
            gallery_id = store.create(blobs)
        except UnsupportedFormat as exc:
            return JSONResponse(
                {"error": f"unsupported format: {exc.args[0]} (PNG/JPEG only)"}, status_code=415
            )
        except CorruptImage as exc:
            return JSONResponse(
                {"error": f"corrupt image: {exc.args[0]}; nothing persisted"}, status_code=400
            )
        return {"gallery_id": gallery_id, "count": len(blobs)}

    @app.get("/galleries/{gallery_id}")
    def list_gallery(gallery_id: str):
        meta = store.get(gallery_id)
        if meta is None:
            return JSONResponse({"error": f"unknown gallery {gallery_id}"}, status_code=404)
        return {"gallery_id": gallery_id, "photos": meta}

    # -- sketch utilities -----------------------------------------------------

    @app.post("/sketch/echo")
    async def sketch_echo(request: Request):
        body = await request.json()
        try:
            sketch = _sketch_from_payload(body.get("sketch"))
        except DatasetError as exc:
            return JSONResponse(
                {"error": "invalid sketch", "detail": str(exc), "field": "sketch"},
                status_code=422,
            )
        return JSONResponse(json.loads(sketch.to_json()))

    @app.post("/partition")
    async def partition_preview(request: Request):
        body = await request.json()
        try:
            sketch = _sketch_from_payload(body.get("sketch"))
        except DatasetError as exc:
            return JSONResponse(
                {"error": "invalid sketch", "detail": str(exc), "field": "sketch"},
                status_code=422,
            )
        n = int(body.get("n", 2))
        seed = int(body.get("seed", 0))
        try:
            split = partition(sketch, n=n, seed=seed)
        except DatasetError as exc:
            return JSONResponse({"error": str(exc), "field": "n"}, status_code=422)
        return {
            "centroid": list(split.centroid),
            "slopes_deg": split.slopes_deg,
            "parts": [json.loads(p.to_json()) for p in split.parts],
        }

    # -- segmentation -----------------------------------------------------------

    def run_segmentation(sketch: VectorSketch, gallery_id: str, options: dict) -> bytes:
        photos = store.photos(gallery_id)
        model: Segmenter = state["model"]
        threshold = float(options.get("threshold", 0.5))
        use_crf = bool(options.get("crf", False))
        result = segment_gallery(
            sketch,
            photos,
            model,
            postprocess=use_crf,
            binarize_threshold=threshold,
            refine_params=RefineParams(threshold=threshold),
        )
        payload = {
            "gallery_id": gallery_id,
            "options": {"crf": use_crf, "threshold": threshold},
            "results": [
                {
                    "photo_id": e.photo_id,
                    "mask": base64.b64encode(mask_png_bytes(e.mask)).decode("ascii"),
                    "confidence": e.confidence,
                }
                for e in result.entries
            ],
        }
        return json.dumps(payload, sort_keys=True).encode()

    @app.post("/segment")
    async def segment(request: Request):
        body = await request.json()
        if state["model"] is None:
            return JSONResponse({"error": "no model loaded"}, status_code=503)
        try:
            sketch = _sketch_from_payload(body.get("sketch"))
        except DatasetError as exc:
            return JSONResponse(
                {"error": "invalid sketch", "detail": str(exc), "field": "sketch"},
                status_code=422,
            )
        gallery_id = body.get("gallery_id")
        meta = store.get(gallery_id) if gallery_id else None
        if meta is None:
            return JSONResponse({"error": f"unknown gallery {gallery_id}"}, status_code=404)
        options = body.get("options") or {}

        key = hashlib.sha256(
            (sketch.to_json() + "|" + gallery_id + "|" + str(state["model_hash"]) + "|"
             + json.dumps(options, sort_keys=True)).encode()
        ).hexdigest()

        cached = state["cache"].get(key)
        if cached is not None:
            return Response(content=cached, media_type="application/json")

        if len(meta) > SYNC_GALLERY_LIMIT:
            job_id = uuid.uuid4().hex[:12]
            with jobs_guard:
                state["jobs"][job_id] = {"status": "pending", "body": None}

            def worker():
                try:
                    with seg_slots:
                        body_bytes = run_segmentation(sketch, gallery_id, options)
                    state["cache"][key] = body_bytes
                    with jobs_guard:
                        state["jobs"][job_id] = {"status": "done", "body": body_bytes}
                except Exception as exc:  # surfaced on poll
                    with jobs_guard:
                        state["jobs"][job_id] = {"status": "error", "body": str(exc).encode()}

            threading.Thread(target=worker, daemon=True).start()
            return JSONResponse(
                {"job_id": job_id, "poll": f"/jobs/{job_id}"}, status_code=202
            )

        with locks_guard:
            lock = state["locks"].setdefault(key, threading.Lock())
        if not seg_slots.acquire(blocking=False):
            return JSONResponse(
                {"error": "segmentation queue full", "retry_after_s": 1}, status_code=429,
                headers={"Retry-After": "1"},
            )
        try:
            with lock:
                cached = state["cache"].get(key)
                if cached is None:
                    cached = run_segmentation(sketch, gallery_id, options)
                    state["cache"][key] = cached
        finally:
            seg_slots.release()
        return Response(content=cached, media_type="application/json")

    @app.get("/jobs/{job_id}")
    def poll_job(job_id: str):
        with jobs_guard:
            job = state["jobs"].get(job_id)
        if job is None:
            return JSONResponse({"error": f"unknown job {job_id}"}, status_code=404)
        if job["status"] == "pending":
            return JSONResponse({"status": "pending"}, status_code=202)
        if job["status"] == "error":
            return JSONResponse({"error": job["body"].decode()}, status_code=500)
        return Response(content=job["body"], media_type="application/json")

    # -- static UI bundle ---------------------------------------------------

    ui_dist = Path(
        os.environ.get("SKETCHSEG_UI_DIR")
        or Path(__file__).resolve().parents[2] / "frontend" / "dist"
    )
    if ui_dist.is_dir():
        app.mount("/app", StaticFiles(directory=ui_dist, html=True), name="app")

    return app


def main() -> None:
    import uvicorn

    port = int(os.environ.get("SKETCHSEG_PORT", "8000"))
    uvicorn.run(create_app(), host="127.0.0.1", port=port)
