"""HTTP inference service: versioned JSON API plus optional static UI hosting.

Routes:
  POST /api/v1/predict  multipart upload, field "audio" (WAV bytes) for MFCC
                        models or field "embedding" (PERS file) for embedding
                        models; returns the prediction document.
  GET  /api/v1/health   liveness plus loaded-model identity.

The loaded model is immutable shared state; request handling is stateless.
"""

from __future__ import annotations

import time

import numpy as np
from fastapi import FastAPI, File, Request, UploadFile
from fastapi.responses import JSONResponse
from fastapi.staticfiles import StaticFiles

from .audio import AudioError, ingest_wav_bytes
from .features import EmbeddingFormatError, FeatureType, embedding_from_bytes, extract_mfcc_vector
from .model import ModelParams, predict
from .store import load_model

MAX_UPLOAD_BYTES = 50 * 1024 * 1024


def _error(status: int, message: str) -> JSONResponse:
    return JSONResponse(status_code=status, content={"error": message})


def _looks_like_mp3(data: bytes) -> bool:
    if data[:3] == b"ID3":
        return True
    return len(data) >= 2 and data[0] == 0xFF and (data[1] & 0xE0) == 0xE0


def prediction_response(params: ModelParams, vector, inference_ms: int) -> dict:
    p = predict(params, vector)
    return {
        "emotion": {"label": p.emotion_label, "probabilities": p.emotion_probs},
        "gender": {"label": p.gender_label, "probabilities": p.gender_probs},
        "age": {"years": round(p.age_years, 1)},
        "model_id": params.model_id,
        "feature_type": params.config.feature_type.name.lower(),
        "inference_ms": inference_ms,
    }


def create_app(model: ModelParams | None = None, ui_dir: str | None = None) -> FastAPI:
    app = FastAPI(title="persona", docs_url=None, redoc_url=None)
    app.state.model = model
    app.state.started = time.monotonic()

    @app.post("/api/v1/predict")
    def handle_predict(
        request: Request,
        audio: UploadFile | None = File(None),
        embedding: UploadFile | None = File(None),
    ):
        params: ModelParams | None = app.state.model
        if params is None:
            return _error(503, "no model is loaded")
        declared = request.headers.get("content-length")
        if declared and declared.isdigit() and int(declared) > MAX_UPLOAD_BYTES:
            return _error(413, f"request body exceeds the {MAX_UPLOAD_BYTES} byte limit")

        start = time.perf_counter()
        if params.config.feature_type is FeatureType.MFCC:
            if audio is None:
                return _error(400, 'missing multipart field "audio" (WAV bytes)')
            data = audio.file.read(MAX_UPLOAD_BYTES + 1)
            if len(data) > MAX_UPLOAD_BYTES:
                return _error(413, f"audio upload exceeds the {MAX_UPLOAD_BYTES} byte limit")
            if _looks_like_mp3(data):
                return _error(
                    415, "MP3 is not supported; convert the file to WAV (16-bit PCM) and retry"
                )
            try:
                clip = ingest_wav_bytes(data, source_name=audio.filename or "upload.wav")
                vector = extract_mfcc_vector(clip).values
            except (AudioError, ValueError) as err:
                return _error(415, f"could not decode audio ({err}); convert to WAV and retry")
        else:
            if embedding is None:
                return _error(
                    400,
                    'this model consumes precomputed embeddings; send multipart field '
                    '"embedding" (PERS file)',
                )
            data = embedding.file.read(MAX_UPLOAD_BYTES + 1)
            if len(data) > MAX_UPLOAD_BYTES:
                return _error(413, f"embedding upload exceeds the {MAX_UPLOAD_BYTES} byte limit")
            try:
                vec = embedding_from_bytes(data)
            except EmbeddingFormatError as err:
                return _error(422, f"bad embedding file: {err}")
            if vec.feature_type is not params.config.feature_type:
                return _error(
                    422,
                    f"embedding is {vec.feature_type.name.lower()}, model expects "
                    f"{params.config.feature_type.name.lower()}",
                )
            vector = vec.values
        body = prediction_response(params, vector, inference_ms=0)
        body["inference_ms"] = int(round((time.perf_counter() - start) * 1000))
        return JSONResponse(content=body)

    @app.get("/api/v1/health")
    def handle_health():
        params: ModelParams | None = app.state.model
        uptime = int(time.monotonic() - app.state.started)
        if params is None:
            return _error(503, "no model is loaded")
        return {
            "status": "ok",
            "model_id": params.model_id,
            "feature_type": params.config.feature_type.name.lower(),
            "uptime_s": uptime,
        }

    if ui_dir is not None:
        app.mount("/", StaticFiles(directory=ui_dir, html=True), name="ui")
    return app


def serve(model_path: str, port: int = 8000, host: str = "127.0.0.1", ui_dir: str | None = None):
    """Load the model, then block serving requests until interrupted."""
    import uvicorn

    model = load_model(model_path)
    app = create_app(model=model, ui_dir=ui_dir)
    uvicorn.run(app, host=host, port=port, log_level="info")
