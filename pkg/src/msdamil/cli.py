"""Command-line entry point: ``msdamil {synth,train,eval,heatmap,gradcheck}``.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

from . import evaluate as E
from .config import RunConfig, load_config, parse_overrides
from .data import (ConfigError, DataError, MANIFEST_NAME, export_corpus, extract_bags,
                   generate_synthetic_corpus, ingest_patch_directory, split_dataset)
from .gradcheck import run_gradcheck
from .train import (Checkpoint, NumericError, TrainedModel, patch_train, select_alpha, stage1_train,
                    stage2_train, write_history)

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


class PrerequisiteError(DataError):
    """An input produced by an earlier command is missing."""


def checkpoint_path(run: RunConfig, mode: str, scale: int | None = None) -> Path:
    root = run.path("checkpoint_dir")
    if mode == "msdamil":
        return root / "msdamil.ckpt"
    kind = "damil" if mode == "damil" else mode
    return root / f"{kind}_scale{scale}.ckpt"


def _load_checkpoint(path: Path, what: str) -> TrainedModel:
    if not path.is_file():
        raise PrerequisiteError(f"missing {what} ({path})")
    try:
        return TrainedModel.from_checkpoint(Checkpoint.load(path))
    except (ValueError, KeyError) as exc:
        raise DataError(f"unreadable checkpoint {path}: {exc}") from None


def load_corpus(run: RunConfig):
    root = run.path("corpus_dir")
    if not (root / MANIFEST_NAME).is_file():
        raise DataError(f"no corpus at {root} (expected {MANIFEST_NAME}); run 'synth' first")
    return ingest_patch_directory(root)


def splits(run: RunConfig):
    slides = load_corpus(run)
    return slides, split_dataset(slides, seed=run.seed)


# ---------------------------------------------------------------------------
# commands


def cmd_synth(run: RunConfig, args) -> int:
    out = run.path("corpus_dir")
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot create corpus directory {out}: {exc.strerror}") from None
    slides = generate_synthetic_corpus(run.corpus)
    export_corpus(slides, out)
    n_bags = sum(min(run.corpus.max_bags, s.n_regions // run.corpus.bag_size) for s in slides)
    n_pos = sum(s.label for s in slides)
    print(f"wrote {len(slides)} slides ({n_pos} positive, {len(slides) - n_pos} negative), "
          f"{run.corpus.scales} scales, {run.corpus.regions_per_slide} regions per slide, "
          f"{n_bags} bags of {run.corpus.bag_size} to {out}")
    return EXIT_OK


def _scales_for(run: RunConfig, args) -> list[int]:
    return [args.scale] if args.scale is not None else run.scales


def cmd_train(run: RunConfig, args) -> int:
    ckdir = run.path("checkpoint_dir")
    if args.stage == 2:
        scales = run.scales
        extractors, heads, domain = {}, {}, {}
        for s in scales:
            path = checkpoint_path(run, "damil", s)
            if not path.is_file():
                raise PrerequisiteError(f"missing stage-1 checkpoint for scale {s} ({path})")
        _, (train, val, _) = splits(run)
        for s in scales:
            m = _load_checkpoint(checkpoint_path(run, "damil", s), f"stage-1 checkpoint for scale {s}")
            extractors[s], heads[s] = m.extractors[s], m.heads[s]
            if s in m.domain:
                domain[s] = m.domain[s]
        result = stage2_train(train, extractors, run.train, scales)
        model = TrainedModel("msdamil", train[0].patches[scales[0]].shape[-1], extractors, heads, domain,
                             result.theta_y_all, config=run.train.to_dict(), epoch=run.train.epochs)
        path = checkpoint_path(run, "msdamil")
        model.to_checkpoint().save(path)
        write_history(ckdir / "history_stage2.tsv", result.history)
        acc = E.evaluate_model(model, val, "msdamil").accuracy
        print(f"stage 2 scales {scales}: checkpoint {path}; validation accuracy {acc:.4f}")
        return EXIT_OK

    _, (train, val, _) = splits(run)
    ckdir.mkdir(parents=True, exist_ok=True)
    mode = run.mode if run.mode != "msdamil" else "damil"
    for s in _scales_for(run, args):
        if s not in train[0].patches:
            raise DataError(f"corpus has no scale {s} (available: {train[0].scales})")
        p = train[0].patches[s].shape[-1]
        if mode == "patch":
            r = patch_train(train, run.train, s)
            model = TrainedModel("patch", p, {s: r.theta_f}, patch_heads={s: r.head},
                                 config=run.train.to_dict(), epoch=run.train.epochs)
        else:
            cfg = run.train

            def snapshot(m, r, s=s, p=p):
                return TrainedModel(mode, p, {s: r.theta_f}, {s: r.theta_y},
                                    {s: r.theta_d} if r.theta_d is not None else {},
                                    config=cfg.to_dict(), epoch=m)

            if args.select_alpha and mode == "damil":
                best, scores, r = select_alpha(train, val, cfg, s)
                cfg = replace(cfg, alpha=best)
                print(f"scale {s}: validation accuracy by alpha "
                      + " ".join(f"{a:g}={v:.4f}" for a, v in scores.items()) + f"; chose {best:g}")
            else:
                # the checkpoint is rewritten after every epoch, so an interrupted run keeps its progress
                r = stage1_train(train, cfg, s, domain_adversarial=(mode == "damil"),
                                 on_epoch=lambda m, r: snapshot(m, r).to_checkpoint().save(
                                     checkpoint_path(run, mode, s)))
            model = snapshot(cfg.epochs, r)
        path = checkpoint_path(run, mode, s)
        model.to_checkpoint().save(path)
        write_history(ckdir / f"history_{mode}_scale{s}.tsv", r.history)
        acc = E.evaluate_model(model, val, mode, s).accuracy
        print(f"stage 1 {mode} scale {s}: checkpoint {path}; validation accuracy {acc:.4f}")
    return EXIT_OK


def _model_for(run: RunConfig, mode: str, scale: int | None) -> tuple[TrainedModel, int | None]:
    if mode == "msdamil":
        return _load_checkpoint(checkpoint_path(run, mode), "stage-2 checkpoint (run 'train --stage 2')"), None
    s = scale if scale is not None else run.scales[0]
    return _load_checkpoint(checkpoint_path(run, mode, s), f"{mode} checkpoint for scale {s}"), s


def cmd_eval(run: RunConfig, args) -> int:
    mode = args.mode or run.mode
    model, scale = _model_for(run, mode, args.scale)
    _, (_, _, test) = splits(run)
    metrics, preds = E.evaluate_corpus(model, test, mode, scale)
    out = run.path("output_dir")
    out.mkdir(parents=True, exist_ok=True)
    tag = mode if scale is None else f"{mode}_scale{scale}"
    E.write_predictions(out / f"predictions_{tag}.tsv", preds, mode)
    E.write_metrics(out / f"metrics_{tag}.tsv", metrics, mode)
    print(f"mode {mode}: accuracy {metrics.accuracy:.4f} precision {metrics.precision:.4f} "
          f"recall {metrics.recall:.4f} (tp {metrics.tp} fp {metrics.fp} fn {metrics.fn} tn {metrics.tn})")
    for flag in metrics.flags:
        print(f"note: {flag}")
    if mode == "msdamil":
        stats = E.attention_scale_stats(preds)
        print("attention mass per scale: " + " ".join(f"scale{s}={v:.4f}" for s, v in stats.items()))
    return EXIT_OK


def cmd_heatmap(run: RunConfig, args) -> int:
    mode = args.mode or run.mode
    if mode == "patch":
        raise ConfigError("heatmaps need an attention model (mil, damil or msdamil)")
    model, scale = _model_for(run, mode, args.scale)
    slides = {s.slide_id: s for s in load_corpus(run)}
    if args.slide not in slides:
        raise DataError(f"unknown slide {args.slide!r}; available: {', '.join(sorted(slides))}")
    slide = slides[args.slide]
    pred = E.predict_slide(model, slide, mode, scale)
    bs, mb, sd = E.bag_settings(model, None, None, None)
    bags = extract_bags(slide, bs, mb, sd)
    out = run.path("output_dir") / "heatmaps" / args.slide
    written = E.write_heatmaps(out, slide, pred, bags)
    print(f"wrote {len(written)} heatmaps for {args.slide} ({len(bags)} bags) to {out}")
    return EXIT_OK


def cmd_gradcheck(run: RunConfig | None, args) -> int:
    report = run_gradcheck()
    print("\n".join(report.lines()))
    return EXIT_OK if report.passed else EXIT_NUMERIC


# ---------------------------------------------------------------------------
# argument handling


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="msdamil", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log per-epoch losses")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config_required=True):
        p.add_argument("config", nargs=None if config_required else "?", help="key = value config file")
        p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config key (repeatable)")
        p.add_argument("--seed", type=int, help="shorthand for --set seed=N")

    common(sub.add_parser("synth", help="generate a synthetic corpus"))
    p = sub.add_parser("train", help="stage-1 or stage-2 training")
    common(p)
    p.add_argument("--stage", type=int, choices=(1, 2), default=1)
    p.add_argument("--scale", type=int)
    p.add_argument("--select-alpha", action="store_true",
                   help="stage 1 with domain adaptation: pick alpha from {0.5, 1, 2, 4} on the validation split")
    p = sub.add_parser("eval", help="evaluate on the test split")
    common(p)
    p.add_argument("--mode", choices=("patch", "mil", "damil", "msdamil"))
    p.add_argument("--scale", type=int)
    p = sub.add_parser("heatmap", help="attention heatmaps for one slide")
    common(p)
    p.add_argument("--slide", required=True)
    p.add_argument("--mode", choices=("mil", "damil", "msdamil"))
    p.add_argument("--scale", type=int)
    sub.add_parser("gradcheck", help="finite-difference check of every differentiable op")
    return parser


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "eval": cmd_eval, "heatmap": cmd_heatmap,
            "gradcheck": cmd_gradcheck}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        run = None
        if args.command != "gradcheck":
            overrides = parse_overrides(args.overrides)
            if args.seed is not None:
                overrides["seed"] = args.seed
            run = load_config(args.config, overrides)
        return COMMANDS[args.command](run, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, E.IncompatibleCheckpoint) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
