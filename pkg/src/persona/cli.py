"""Operator CLI: extract features, train with cross-validation, evaluate,
predict on one file, or serve the HTTP API.

Exit codes: 0 success, 1 user error (bad flags, bad paths, bad data),
2 internal error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from pathlib import Path

from .audio import AudioError, ingest_wav_bytes
from .features import (
    EmbeddingFormatError,
    FeatureError,
    FeatureType,
    extract_mfcc_vector,
    read_embedding_file,
    write_embedding_file,
)
from .model import evaluate
from .service import create_app, prediction_response
from .store import ModelStoreError, load_model, save_model
from .training import (
    ManifestError,
    TrainConfig,
    TrainingDataError,
    load_manifest,
    resolve_features,
    run_cross_validation,
)


class UserError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with code 2 on bad flags; route through UserError for exit 1
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UserError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="persona", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("extract", help="compute MFCC vectors into PERS files")
    p.add_argument("--manifest", required=True)
    p.add_argument("--feature", default="mfcc", choices=["mfcc", "xvector", "wavlm"])
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("train", help="run k-fold cross-validation training")
    p.add_argument("--manifest", required=True)
    p.add_argument("--feature", required=True, choices=["mfcc", "xvector", "wavlm"])
    p.add_argument("--arch", required=True, choices=["fcn", "cnn"])
    p.add_argument("--folds", type=int, default=5)
    p.add_argument("--epochs", type=int, default=20)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="directory for cv_report.json and the best model")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a saved model on a manifest")
    p.add_argument("--model", default=os.environ.get("PERSONA_MODEL"))
    p.add_argument("--manifest", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", help="predict on one audio/embedding file")
    p.add_argument("--model", default=os.environ.get("PERSONA_MODEL"))
    p.add_argument("--audio")
    p.add_argument("--embedding")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("serve", help="run the HTTP inference service")
    p.add_argument("--model", default=os.environ.get("PERSONA_MODEL"))
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8000)
    p.add_argument("--ui-dir", default=None, help="static assets to serve at /")
    p.set_defaults(func=cmd_serve)

    return parser


def _require_model_path(args) -> str:
    if not args.model:
        raise UserError("no model given: pass --model or set PERSONA_MODEL")
    if not Path(args.model).is_file():
        raise UserError(f"model file not found: {args.model}")
    return args.model


def _load_manifest_checked(path):
    if not Path(path).is_file():
        raise UserError(f"manifest not found: {path}")
    return load_manifest(path)


def cmd_extract(args) -> int:
    if args.feature != "mfcc":
        raise UserError(
            f"{args.feature} vectors come from an external exporter; "
            "only mfcc can be computed here"
        )
    examples = _load_manifest_checked(args.manifest)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = 0
    for ex in examples:
        if not ex.audio_path:
            raise UserError(f"manifest row {ex.clip_id} has no audio_path")
        with open(ex.audio_path, "rb") as f:
            clip = ingest_wav_bytes(f.read(), source_name=ex.clip_id)
        vec = extract_mfcc_vector(clip)
        write_embedding_file(vec, out_dir / f"{ex.clip_id}.pers")
        written += 1
    print(f"wrote {written} PERS files to {out_dir}")
    return 0


def cmd_train(args) -> int:
    examples = _load_manifest_checked(args.manifest)
    config = TrainConfig(
        folds=args.folds,
        epochs=args.epochs,
        lr=args.lr,
        batch_size=args.batch_size,
        seed=args.seed,
    )
    feature_type = FeatureType.from_name(args.feature)
    report, best_model = run_cross_validation(examples, config, args.arch, feature_type)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "cv_report.json").write_text(report.to_json() + "\n", encoding="utf-8")
    model_path = out / "model.persmodl"
    save_model(best_model, model_path)
    print(report.format_table())
    print(f"\nbest fold: {report.best_fold_index}")
    print(f"report: {out / 'cv_report.json'}")
    print(f"model:  {model_path}")
    return 0


def cmd_eval(args) -> int:
    params = load_model(_require_model_path(args))
    examples = _load_manifest_checked(args.manifest)
    x, ye, yg, age = resolve_features(examples, params.config.feature_type)
    metrics = evaluate(params, x, ye, yg, age)
    print(
        json.dumps(
            {
                "emotion_acc": metrics.emotion_acc,
                "gender_acc": metrics.gender_acc,
                "age_rmse": metrics.age_rmse,
                "n_examples": len(examples),
            },
            indent=2,
            sort_keys=True,
        )
    )
    return 0


def cmd_predict(args) -> int:
    params = load_model(_require_model_path(args))
    start = time.perf_counter()
    if params.config.feature_type is FeatureType.MFCC:
        if not args.audio:
            raise UserError("this model consumes audio: pass --audio FILE.wav")
        if not Path(args.audio).is_file():
            raise UserError(f"audio file not found: {args.audio}")
        with open(args.audio, "rb") as f:
            clip = ingest_wav_bytes(f.read(), source_name=Path(args.audio).name)
        vector = extract_mfcc_vector(clip).values
    else:
        if not args.embedding:
            raise UserError("this model consumes embeddings: pass --embedding FILE.pers")
        if not Path(args.embedding).is_file():
            raise UserError(f"embedding file not found: {args.embedding}")
        vec = read_embedding_file(args.embedding)
        if vec.feature_type is not params.config.feature_type:
            raise UserError(
                f"embedding is {vec.feature_type.name.lower()}, model expects "
                f"{params.config.feature_type.name.lower()}"
            )
        vector = vec.values
    body = prediction_response(params, vector, inference_ms=0)
    body["inference_ms"] = int(round((time.perf_counter() - start) * 1000))
    print(json.dumps(body, indent=2, sort_keys=True))
    return 0


def cmd_serve(args) -> int:
    import uvicorn

    model = load_model(_require_model_path(args))
    if args.ui_dir and not Path(args.ui_dir).is_dir():
        raise UserError(f"ui directory not found: {args.ui_dir}")
    app = create_app(model=model, ui_dir=args.ui_dir)
    uvicorn.run(app, host=args.host, port=args.port, log_level="info")
    return 0


_USER_ERRORS = (
    UserError,
    ManifestError,
    TrainingDataError,
    AudioError,
    FeatureError,
    EmbeddingFormatError,
    ModelStoreError,
    FileNotFoundError,
)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UserError as err:
        print(f"error: {err}", file=sys.stderr)
        return 1
    except SystemExit as exit_:  # --help
        return int(exit_.code or 0)
    try:
        return args.func(args)
    except _USER_ERRORS as err:
        print(f"error: {err}", file=sys.stderr)
        return 1
    except Exception as err:  # noqa: BLE001 - the CLI boundary reports and exits 2
        print(f"internal error: {type(err).__name__}: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
