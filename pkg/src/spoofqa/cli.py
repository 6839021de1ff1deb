"""Command-line entry point wiring the detection workflows together.

Subcommands: gen-corpus, build-subsets, zeroshot, finetune, eval, report,
bridge-health. Every run writes its resolved configuration under --out for
replay; randomized commands require an explicit --seed. Exit codes: 0 ok,
2 config error, 3 I/O error, 4 insufficient spoof pool, 5 backend failure,
6 degraded run.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from . import corpus as corpus_mod
from . import evaluation
from .backend import BackendDescriptor, BackendError, LocalBackend, healthcheck, make_backend
from .corpus import InsufficientSpoofError, SynthConfig
from .lora import LoraConfig, attach_lora
from .model import CheckpointError, ConfigError, ModelConfig, init_model
from .train import TrainConfig, TrainDivergedError, finetune

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_INSUFFICIENT_SPOOF = 4
EXIT_BACKEND = 5
EXIT_DEGRADED = 6

_PROMPT_FLAG_TO_ID = {"p1": "P1", "p2": "P2", "p3": "P3", "multi": "MULTI"}


def _log(message: str) -> None:
    print(message, file=sys.stderr)


def _write_run_config(out_dir: Path, args: argparse.Namespace) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    skip = {"func", "config"}
    lines = [
        f"{key.replace('_', '-')}={value}"
        for key, value in sorted(vars(args).items())
        if key not in skip and value is not None
    ]
    (out_dir / "run_config.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")


def _load_config_defaults(argv: list[str], parser: argparse.ArgumentParser) -> list[str]:
    """Apply key=value pairs from --config FILE as defaults (flags override)."""
    probe = argparse.ArgumentParser(add_help=False)
    probe.add_argument("--config")
    known, _ = probe.parse_known_args(argv)
    if not known.config:
        return argv
    defaults = {}
    for lineno, line in enumerate(Path(known.config).read_text().splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise SystemExit(f"config {known.config}: line {lineno}: expected key=value")
        key, _, value = line.partition("=")
        defaults[key.strip().replace("-", "_")] = value.strip()

    def apply(target: argparse.ArgumentParser) -> None:
        for action in target._actions:
            if isinstance(action, argparse._SubParsersAction):
                for sub in action.choices.values():
                    apply(sub)
            elif action.dest in defaults:
                raw = defaults[action.dest]
                if isinstance(action, (argparse._StoreTrueAction, argparse._StoreFalseAction)):
                    action.default = raw.lower() in ("1", "true", "yes")
                elif callable(action.type):
                    action.default = action.type(raw)
                else:
                    action.default = raw
                action.required = False

    apply(parser)
    return argv


def _parse_families(text: str) -> tuple[str, ...]:
    return tuple(sorted({f.strip() for f in text.split(",") if f.strip()}))


def cmd_gen_corpus(args) -> int:
    out = Path(args.out)
    try:
        cfg = SynthConfig(
            n_bonafide=args.bonafide,
            n_spoof=args.spoof,
            duration_s=args.duration,
            artifact_families=_parse_families(args.families),
            seed=args.seed,
        )
    except ValueError as exc:
        _log(f"config error: {exc}")
        return EXIT_CONFIG
    _write_run_config(out, args)
    try:
        manifest = corpus_mod.gen_synthetic_corpus(cfg, out, split=args.split)
    except OSError as exc:
        _log(f"write error: {exc}")
        return EXIT_IO
    print(manifest.source_path)
    return EXIT_OK


def cmd_build_subsets(args) -> int:
    out = Path(args.out)
    _write_run_config(out, args)
    try:
        manifest = corpus_mod.load_manifest(args.manifest)
    except (OSError, ValueError) as exc:
        _log(f"manifest error: {exc}")
        return EXIT_IO
    splits = [s.strip() for s in args.splits.split(",") if s.strip()]
    try:
        for split in splits:
            subset = corpus_mod.build_balanced_subset(manifest, split, args.seed)
            subset_path = out / f"subset_{split}.txt"
            corpus_mod.save_subset(subset, subset_path)
            balanced = subset.to_manifest(manifest)
            manifest_path = out / f"subset_{split}.tsv"
            corpus_mod.save_manifest(balanced, manifest_path)
            print(f"{split}\t{subset_path}\t{manifest_path}")
    except InsufficientSpoofError as exc:
        _log(f"insufficient spoof pool: {exc}")
        return EXIT_INSUFFICIENT_SPOOF
    except ValueError as exc:
        _log(f"config error: {exc}")
        return EXIT_CONFIG
    return EXIT_OK


def _run_evaluation(backend, manifest_path, prompt_id: str, constrained: bool, out: Path) -> int:
    manifest = corpus_mod.load_manifest(manifest_path)
    try:
        run = evaluation.evaluate(backend, manifest, prompt_id, constrained=constrained)
    except BackendError as exc:
        _log(f"backend failure: {exc}")
        return EXIT_BACKEND
    evaluation.write_predictions_csv(out / "predictions.csv", run.predictions)
    evaluation.write_summary_json(out / "summary.json", run)
    print(out / "predictions.csv")
    print(out / "summary.json")
    for prompt, report in sorted(run.reports.items()):
        print(f"{prompt}\tacc={report.accuracy:.4f}\tmf1={report.macro_f1:.4f}\t"
              f"excluded={report.n_excluded}/{report.n_total}")
    if run.degraded:
        _log(f"degraded run: {len(run.errors)} backend errors")
        return EXIT_DEGRADED
    return EXIT_OK


def cmd_zeroshot(args) -> int:
    out = Path(args.out)
    _write_run_config(out, args)
    model = init_model(ModelConfig(), seed=args.seed)
    backend = LocalBackend.from_model(model, name=f"toy-untrained-s{args.seed}")
    try:
        return _run_evaluation(backend, args.manifest, _PROMPT_FLAG_TO_ID[args.prompt],
                               args.constrained, out)
    except (OSError, ValueError) as exc:
        _log(f"error: {exc}")
        return EXIT_IO


def cmd_finetune(args) -> int:
    out = Path(args.out)
    _write_run_config(out, args)
    try:
        train_manifest = corpus_mod.load_manifest(args.train_manifest)
        dev_manifest = corpus_mod.load_manifest(args.dev_manifest)
    except (OSError, ValueError) as exc:
        _log(f"manifest error: {exc}")
        return EXIT_IO
    try:
        train_cfg = TrainConfig(
            epochs=args.epochs,
            lr=args.lr,
            batch_size=args.batch_size,
            prompt_mode=_PROMPT_FLAG_TO_ID[args.prompt_mode],
            seed=args.seed,
            grad_clip=args.grad_clip,
            full_finetune=args.full_finetune,
        )
        model = init_model(ModelConfig(), seed=args.seed)
        if not args.full_finetune:
            lora_cfg = LoraConfig(
                rank=args.lora_rank,
                alpha=args.lora_alpha,
                dropout_p=args.lora_dropout,
                include_encoder=args.lora_encoder,
                a_init_std=args.lora_a_std,
            )
            attach_lora(model, lora_cfg, seed=args.seed + 1)
    except (ValueError, ConfigError) as exc:
        _log(f"config error: {exc}")
        return EXIT_CONFIG
    try:
        _, history = finetune(model, train_manifest, dev_manifest, train_cfg, out)
    except TrainDivergedError as exc:
        _log(f"training diverged: {exc}; last checkpoint: {exc.last_checkpoint}")
        return EXIT_BACKEND
    print(out / "model.ckpt")
    print(out / "history.csv")
    final = history.records[-1]
    print(f"final\tloss={final.loss:.6f}\tdev_acc={final.dev_accuracy:.4f}\tdev_mf1={final.dev_macro_f1:.4f}")
    return EXIT_OK


def _descriptor_from_args(args) -> BackendDescriptor:
    if args.checkpoint:
        return BackendDescriptor(
            kind="local", checkpoint=args.checkpoint, adapter=args.adapter,
            model_name=args.model_name or "",
        )
    if args.endpoint:
        return BackendDescriptor(
            kind="remote", endpoint=args.endpoint, timeout_s=args.timeout,
            model_name=args.model_name or "remote",
        )
    if args.server_cmd:
        return BackendDescriptor(
            kind="remote", command=tuple(args.server_cmd.split()), timeout_s=args.timeout,
            model_name=args.model_name or "remote",
        )
    raise ConfigError("need one of --checkpoint, --endpoint, or --server-cmd")


def cmd_eval(args) -> int:
    out = Path(args.out)
    _write_run_config(out, args)
    try:
        descriptor = _descriptor_from_args(args)
        backend = make_backend(descriptor)
    except (ConfigError, ValueError, CheckpointError, BackendError, OSError) as exc:
        _log(f"backend error: {exc}")
        return EXIT_BACKEND
    try:
        return _run_evaluation(backend, args.manifest, _PROMPT_FLAG_TO_ID[args.prompt],
                               args.constrained, out)
    except (OSError, ValueError) as exc:
        _log(f"error: {exc}")
        return EXIT_IO
    finally:
        if hasattr(backend, "close"):
            backend.close()


def cmd_report(args) -> int:
    out = Path(args.out)
    _write_run_config(out, args)
    try:
        rows = evaluation.summary_rows(args.summaries)
    except (OSError, ValueError, KeyError) as exc:
        _log(f"summary error: {exc}")
        return EXIT_IO
    text_path = out / "table.txt"
    csv_path = out / "table.csv"
    text_path.write_text(evaluation.render_table_text(rows), encoding="utf-8")
    csv_path.write_text(evaluation.render_table_csv(rows), encoding="utf-8")
    print(text_path)
    print(csv_path)
    return EXIT_OK


def cmd_bridge_health(args) -> int:
    try:
        descriptor = _descriptor_from_args(args)
    except ConfigError as exc:
        _log(f"config error: {exc}")
        return EXIT_CONFIG
    status, model_name = healthcheck(descriptor)
    print(f"status={status}\tmodel={model_name or '-'}")
    if status == "ready":
        return EXIT_OK
    return EXIT_DEGRADED if status == "degraded" else EXIT_BACKEND


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="spoofqa",
        description="Audio deepfake detection as audio question answering.",
    )
    parser.add_argument("--config", help="key=value file supplying flag defaults")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-corpus", help="generate a synthetic labeled corpus")
    p.add_argument("--bonafide", type=int, required=True)
    p.add_argument("--spoof", type=int, required=True)
    p.add_argument("--families", default="glitch,monotone,robotic")
    p.add_argument("--duration", type=float, default=2.0)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--split", default="train", choices=["train", "dev", "eval"])
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_corpus)

    p = sub.add_parser("build-subsets", help="build class-balanced attack-stratified subsets")
    p.add_argument("--manifest", required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--splits", default="train,dev,eval")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_build_subsets)

    p = sub.add_parser("zeroshot", help="evaluate an untrained model")
    p.add_argument("--manifest", required=True)
    p.add_argument("--prompt", default="p1", choices=sorted(_PROMPT_FLAG_TO_ID))
    p.add_argument("--constrained", action="store_true")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_zeroshot)

    p = sub.add_parser("finetune", help="LoRA fine-tuning on a labeled manifest")
    p.add_argument("--train-manifest", required=True)
    p.add_argument("--dev-manifest", required=True)
    p.add_argument("--prompt-mode", default="multi", choices=["p1", "p3", "multi"])
    p.add_argument("--epochs", type=int, default=10)
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--batch-size", type=int, default=8)
    p.add_argument("--grad-clip", type=float, default=None)
    p.add_argument("--lora-rank", type=int, default=8)
    p.add_argument("--lora-alpha", type=float, default=32.0)
    p.add_argument("--lora-dropout", type=float, default=0.1)
    p.add_argument("--lora-encoder", action="store_true")
    p.add_argument("--lora-a-std", type=float, default=2.0)
    p.add_argument("--full-finetune", action="store_true")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("eval", help="evaluate a checkpoint or remote backend")
    p.add_argument("--manifest", required=True)
    p.add_argument("--prompt", default="p1", choices=sorted(_PROMPT_FLAG_TO_ID))
    p.add_argument("--constrained", action="store_true")
    p.add_argument("--checkpoint")
    p.add_argument("--adapter")
    p.add_argument("--endpoint")
    p.add_argument("--server-cmd")
    p.add_argument("--timeout", type=float, default=120.0)
    p.add_argument("--model-name")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("report", help="render stored summaries as tables")
    p.add_argument("--summaries", nargs="+", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("bridge-health", help="probe a backend")
    p.add_argument("--checkpoint")
    p.add_argument("--adapter")
    p.add_argument("--endpoint")
    p.add_argument("--server-cmd")
    p.add_argument("--timeout", type=float, default=10.0)
    p.add_argument("--model-name")
    p.set_defaults(func=cmd_bridge_health)

    return parser


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    argv = _load_config_defaults(argv, parser)
    args = parser.parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
