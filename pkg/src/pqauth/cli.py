"""Command-line entry point wiring the full pipeline.

Subcommands: synth, preprocess, featurize, train, eval, enroll, verify,
identify.  Exit codes: 0 success, 1 domain error, 2 usage error; `verify`
additionally exits 3 on a clean rejection.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import chaos01, metrics, net, pipeline, signal, store
from .errors import PqAuthError

EXIT_OK = 0
EXIT_DOMAIN_ERROR = 1
EXIT_USAGE = 2
EXIT_REJECT = 3


def _read_record(path: str) -> signal.PpgRecord:
    if path.endswith(".csv"):
        return signal.read_ppg_csv(path)
    return signal.read_ppg_bin(path)


def _load_model_with_config(model_path: str, config_path: str | None):
    model, meta = net.load_model(model_path)
    if config_path is not None:
        cfg = pipeline.load_run_config(config_path)
    elif meta.get("run_config"):
        cfg = pipeline.load_run_config(meta["run_config"])
    else:
        cfg = None
    return model, meta, cfg


def _featurizer_settings(cfg):
    if cfg is None:
        return signal.PreprocessMode.Band05_8Norm, [chaos01.PqParams()] * 3
    mode = signal.PreprocessMode.from_string(cfg["preprocess"]["mode"])
    return mode, pipeline.channel_params(cfg)


def cmd_synth(args) -> int:
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    cfg = pipeline.load_run_config(
        {"seed": args.seed, "dataset": {"subjects": args.subjects, "duration_s": args.duration}}
    )
    for record in pipeline.synth_records(cfg):
        path = out_dir / f"{record.subject_id}.csv"
        signal.write_ppg_csv(record, path)
        print(path)
    return EXIT_OK


def cmd_preprocess(args) -> int:
    record = _read_record(args.infile)
    mode = signal.PreprocessMode.from_string(args.mode)
    out = signal.preprocess(record, mode)
    if args.out.endswith(".csv"):
        signal.write_ppg_csv(out, args.out)
    else:
        signal.write_ppg_bin(out, args.out)
    print(args.out)
    return EXIT_OK


def cmd_featurize(args) -> int:
    record = _read_record(args.infile)
    mode = signal.PreprocessMode.from_string(args.mode)
    conditioned = signal.preprocess(record, mode)
    segments = signal.segment(conditioned, signal.Consecutive())[:3]
    if len(segments) < 3:
        raise PqAuthError("featurize needs at least 3000 samples (three 1000-point segments)")
    params = [chaos01.PqParams(c=c) for c in (args.c if args.c else [chaos01.DEFAULT_C])]
    if len(params) == 1:
        params = params * 3
    image = chaos01.featurize(segments, params, size=args.size)
    out = Path(args.out)
    chaos01.write_pqi(image, out)
    print(out)
    if args.png:
        for path in chaos01.write_pgm_channels(image, out):
            print(path)
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = pipeline.load_run_config(args.config)
    result = pipeline.run_experiment(cfg, log=print if args.verbose else None)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    net.save_model(result.model, out, eer_threshold=result.eer_threshold, run_config=cfg)
    net.save_history(result.history, out.with_suffix(out.suffix + ".history.json"))
    print(f"model: {out}")
    print(f"best epoch: {result.best_epoch}")
    print(f"validation-split EER: {result.report.eer:.4f} at threshold {result.eer_threshold:.4f}")
    return EXIT_OK


def cmd_eval(args) -> int:
    model, meta, cfg = _load_model_with_config(args.model, args.config)
    if cfg is None:
        raise PqAuthError("eval needs --config (the model file embeds none)")
    report, roc_curve, prf_curve, _ = pipeline.evaluate_model(model, cfg, split=args.split)
    report_path = Path(args.report)
    report_path.parent.mkdir(parents=True, exist_ok=True)
    report_path.write_text(report.to_json() + "\n")
    metrics.write_roc_csv(roc_curve, report_path.with_suffix(".roc.csv"))
    metrics.write_prf_csv(prf_curve, report_path.with_suffix(".prf.csv"))
    print(f"report: {report_path}")
    print(report.to_json())
    return EXIT_OK


def cmd_enroll(args) -> int:
    model, meta, cfg = _load_model_with_config(args.model, args.config)
    mode, params = _featurizer_settings(cfg)
    created_at = None if cfg is None else cfg["store"]["created_at"]
    tstore = store.TemplateStore(args.store)
    record = _read_record(args.ppg)
    subject_id = args.id or record.subject_id
    if not subject_id:
        raise PqAuthError("no subject id: pass --id or use a CSV record that names one")
    template = tstore.enroll(
        subject_id,
        record,
        model,
        mode,
        params=params,
        overwrite=args.overwrite,
        created_at=created_at,
    )
    print(f"enrolled {template.subject_id!r} -> {tstore.path_for(template.subject_id)}")
    return EXIT_OK


def _model_threshold(args, meta) -> float | None:
    if args.threshold is not None:
        return args.threshold
    return meta.get("eer_threshold")


def cmd_verify(args) -> int:
    model, meta, cfg = _load_model_with_config(args.model, args.config)
    tstore = store.TemplateStore(args.store)
    record = _read_record(args.ppg)
    subject_id = args.id or record.subject_id
    if not subject_id:
        raise PqAuthError("no subject id: pass --id or use a CSV record that names one")
    result = tstore.verify(subject_id, record, model, threshold=_model_threshold(args, meta))
    print(f"score={result.score:.6f} threshold={result.threshold:.6f} decision={result.decision}")
    return EXIT_OK if result.accepted else EXIT_REJECT


def cmd_identify(args) -> int:
    model, meta, cfg = _load_model_with_config(args.model, args.config)
    tstore = store.TemplateStore(args.store)
    record = _read_record(args.ppg)
    for sid, value in tstore.identify(record, model):
        print(f"{sid}\t{value:.6f}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pqauth",
        description="PPG biometric verification from binary (p,q)-plane patterns",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate synthetic PPG records")
    p.add_argument("--subjects", type=int, default=8)
    p.add_argument("--duration", type=float, default=60.0, help="seconds per subject")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True, help="output directory for CSV records")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("preprocess", help="apply one conditioning mode to a record")
    p.add_argument("--in", dest="infile", required=True)
    p.add_argument("--mode", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("featurize", help="build the 3-channel (p,q) pattern of a record")
    p.add_argument("--in", dest="infile", required=True)
    p.add_argument("--mode", default=signal.PreprocessMode.Band05_8Norm.value)
    p.add_argument("--c", type=float, action="append", help="rotation parameter (repeat for per-channel values)")
    p.add_argument("--size", type=int, default=chaos01.IMAGE_SIZE)
    p.add_argument("--out", required=True, help="output .pqi path")
    p.add_argument("--png", action="store_true", help="also write per-channel PGM images")
    p.set_defaults(func=cmd_featurize)

    p = sub.add_parser("train", help="train a model per a JSON run config")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True, help="output model path")
    p.add_argument("--verbose", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a model on the held-out split")
    p.add_argument("--model", required=True)
    p.add_argument("--split", choices=[m.value for m in net.SplitMode], default=None)
    p.add_argument("--report", required=True, help="output report JSON path")
    p.add_argument("--config", default=None, help="run config (default: the one embedded in the model)")
    p.set_defaults(func=cmd_eval)

    for name, func in (("enroll", cmd_enroll), ("verify", cmd_verify), ("identify", cmd_identify)):
        p = sub.add_parser(name, help=f"{name} against a template store")
        p.add_argument("--store", required=True)
        p.add_argument("--model", required=True)
        p.add_argument("--ppg", required=True)
        p.add_argument("--config", default=None)
        if name != "identify":
            p.add_argument("--id", default=None)
        if name == "verify":
            p.add_argument("--threshold", type=float, default=None)
        if name == "enroll":
            p.add_argument("--overwrite", action="store_true")
        p.set_defaults(func=func)
    return parser


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else EXIT_USAGE
    try:
        return args.func(args)
    except PqAuthError as exc:
        print(f"error [{type(exc).__name__}]: {exc}", file=sys.stderr)
        return EXIT_DOMAIN_ERROR
    except FileNotFoundError as exc:
        print(f"error [FileNotFound]: {exc}", file=sys.stderr)
        return EXIT_DOMAIN_ERROR
    except json.JSONDecodeError as exc:
        print(f"error [InvalidJSON]: {exc}", file=sys.stderr)
        return EXIT_DOMAIN_ERROR


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
