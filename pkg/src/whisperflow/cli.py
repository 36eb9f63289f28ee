"""Command-line interface.

Exit codes: 0 success, 1 invalid input or configuration, 2 runtime failure,
3 an acceptance threshold was missed (oracle-check, misalignment-study and
eval with ``--check``).
"""
from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from collections import Counter
from pathlib import Path
from typing import Sequence

import numpy as np
import yaml

from .codec import Normalizer
from .config import ConfigError, ExperimentConfig, config_to_dict, dump_config, load_config
from .experiments import conversion_seed, misalignment_study, split_indices, train_flow
from .flow.checkpoint import CheckpointError, load_checkpoint, save_checkpoint, write_loss_curve
from .layers import FeatureFormatError, load_triplets, score_layers, write_scores
from .pipeline import (convert_waveform, encode_corpus, evaluate, load_corpus,
                       save_corpus, synth_corpus, whisperize_corpus, write_csv)
from .signal import read_wav, write_wav
from .studies import CHECK_HEADER, oracle_check

EXIT_OK = 0
EXIT_INVALID = 1
EXIT_RUNTIME = 2
EXIT_THRESHOLD = 3

log = logging.getLogger("whisperflow")


class UsageError(ValueError):
    """Bad arguments, paths or inputs detected before the work starts."""


# ---------------------------------------------------------------------------
# Argument parsing
# ---------------------------------------------------------------------------

def _global_flags(parser: argparse.ArgumentParser, suppress: bool) -> None:
    default = argparse.SUPPRESS if suppress else None
    parser.add_argument("--config", default=default, help="YAML experiment config")
    parser.add_argument("--seed", type=int, default=default, help="global seed")
    parser.add_argument("--out", default=default, help="output directory")
    parser.add_argument("--steps", type=int, default=default, help="Euler steps for sampling")
    parser.add_argument("--jobs", type=int, default=default, help="utterance-level workers")
    parser.add_argument("-v", "--verbose", action="store_true",
                        default=argparse.SUPPRESS if suppress else False)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="whisperflow",
                                     description="Toy whisper-to-normal conversion toolkit")
    _global_flags(parser, suppress=False)
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")

    def command(name, help_text):
        p = sub.add_parser(name, help=help_text, description=help_text)
        _global_flags(p, suppress=True)
        return p

    p = command("synth-demo", "generate a seeded toy corpus of vowel-sequence utterances")
    p.add_argument("--count", type=int, help="number of utterances (default from config)")

    p = command("whisperize", "add a synthetic whisper to every utterance of a corpus")
    p.add_argument("--corpus", help="input corpus (default: --out)")

    p = command("train", "train a velocity model on a whisperised corpus")
    p.add_argument("--corpus", help="whisperised corpus directory")
    p.add_argument("--paired", action="store_true",
                   help="paired-source mode: integrate from the whisper latent")

    p = command("convert", "convert whispers with a trained model")
    p.add_argument("--model", help="directory written by the train command")
    p.add_argument("--corpus", help="convert the whispers of this corpus")
    p.add_argument("--split", choices=("held-out", "train", "all"), default="held-out",
                   help="which corpus utterances to convert")
    p.add_argument("--speakers", help="speakers.csv for loose WAV inputs")
    p.add_argument("inputs", nargs="*", help="whisper WAV files")

    command("oracle-check", "closed-form checks of the flow-matching engine")

    p = command("misalignment-study", "paired training on aligned, misaligned and DTW pairs")
    p.add_argument("--corpus", help="whisperised corpus directory")

    p = command("layer-select", "score encoder layers and pick the best one")
    p.add_argument("--features", help="<dir>/<utt>/<modality>/layer_<k>.fmat")
    p.add_argument("--alignments", help="<dir>/<utt>/<modality>.csv")
    p.add_argument("--allow-degenerate", action="store_true", default=None,
                   help="exit 0 even when a score vector is constant")
    p.add_argument("--frame-level-cca", action="store_true", default=None,
                   help="run CCA on frames instead of word-pooled vectors")

    p = command("eval", "compare converted WAVs with reference WAVs")
    p.add_argument("--references", help="directory of reference WAVs")
    p.add_argument("--converted", help="directory of converted WAVs")
    p.add_argument("--check", action="store_true",
                   help="exit 3 unless enough utterances meet the conversion criteria")
    return parser


@dataclasses.dataclass
class Context:
    config: ExperimentConfig
    seed: int
    jobs: int
    steps: int
    out: Path | None

    def require_out(self) -> Path:
        if self.out is None:
            raise UsageError("an output directory is required (--out or paths.out)")
        self.out.mkdir(parents=True, exist_ok=True)
        return self.out


def _context(args) -> Context:
    config = load_config(args.config)
    seed = config.seed if args.seed is None else args.seed
    jobs = config.jobs if args.jobs is None else args.jobs
    steps = config.sampler.steps if args.steps is None else args.steps
    if seed < 0:
        raise UsageError("--seed must be nonnegative")
    if jobs < 1:
        raise UsageError("--jobs must be at least 1")
    if steps < 1:
        raise UsageError("--steps must be at least 1")
    out = args.out if args.out is not None else config.paths.out
    return Context(config, seed, jobs, steps, None if out is None else Path(out))


def _existing_dir(value: str | None, fallback: str | None, what: str) -> Path:
    path = value if value is not None else fallback
    if path is None:
        raise UsageError(f"no {what} directory given")
    path = Path(path)
    if not path.is_dir():
        raise UsageError(f"{what} directory {path} not found")
    return path


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_synth_demo(args, ctx: Context) -> int:
    count = ctx.config.corpus.count if args.count is None else args.count
    if count < 1:
        raise UsageError("--count must be positive")
    out = ctx.require_out()
    items = synth_corpus(count, ctx.seed, ctx.config.corpus.sample_rate, ctx.jobs)
    save_corpus(items, out, ctx.config.codec)
    log.info("wrote %d utterances to %s", len(items), out)
    return EXIT_OK


def cmd_whisperize(args, ctx: Context) -> int:
    src = _existing_dir(args.corpus, ctx.config.paths.corpus or ctx.out, "corpus")
    out = ctx.out if ctx.out is not None else src
    items = load_corpus(src)
    out.mkdir(parents=True, exist_ok=True)
    paired = whisperize_corpus(items, ctx.config.whisperize, ctx.seed, ctx.jobs)
    save_corpus(paired, out, ctx.config.codec)
    counts = Counter(it.method.value for it in paired)
    log.info("whisperised %d utterances (%s)", len(paired),
             ", ".join(f"{k}={v}" for k, v in sorted(counts.items())))
    return EXIT_OK


def _paired_corpus(args, ctx: Context):
    src = _existing_dir(args.corpus, ctx.config.paths.corpus, "corpus")
    items = load_corpus(src, require_whisper=True)
    if len(items) <= ctx.config.corpus.train:
        raise UsageError(f"corpus has {len(items)} utterances; corpus.train="
                         f"{ctx.config.corpus.train} leaves none held out")
    return items


def cmd_train(args, ctx: Context) -> int:
    items = _paired_corpus(args, ctx)
    out = ctx.require_out()
    settings = ctx.config.flow
    if args.paired:
        settings = dataclasses.replace(settings, paired=True)
    train_idx, held_idx = split_indices(len(items), ctx.config.corpus.train)
    latents = encode_corpus(items, train_idx, ctx.config.codec, ctx.jobs)

    def progress(step, loss):
        if step % 500 == 0 or step == settings.steps - 1:
            log.info("step %d loss %.4f", step, loss)

    result = train_flow(latents, train_idx, settings, ctx.seed, callback=progress)
    save_checkpoint(out / "model.fwm", result.model)
    latents.normal_norm.save(out / "normal.nrm")
    latents.whisper_norm.save(out / "whisper.nrm")
    write_loss_curve(out / "loss.csv", result.losses)
    meta = {"mode": settings.mode.value, "seed": ctx.seed,
            "train": [items[i].utt_id for i in train_idx],
            "held_out": [items[i].utt_id for i in held_idx],
            "codec": config_to_dict(ctx.config)["codec"]}
    (out / "model.yaml").write_text(yaml.safe_dump(meta, sort_keys=False))
    (out / "config.yaml").write_text(dump_config(ctx.config))
    log.info("trained %d steps on %d utterances; model in %s", settings.steps, len(train_idx),
             out)
    return EXIT_OK


def _load_model(model_dir: Path, ctx: Context):
    for name in ("model.fwm", "normal.nrm", "whisper.nrm", "model.yaml"):
        if not (model_dir / name).is_file():
            raise UsageError(f"{model_dir}: missing {name} (not a train output directory)")
    meta = yaml.safe_load((model_dir / "model.yaml").read_text())
    if meta.get("codec") != config_to_dict(ctx.config)["codec"]:
        raise UsageError("codec settings differ from the ones the model was trained with")
    model = load_checkpoint(model_dir / "model.fwm")
    if model.config.latent_dim != ctx.config.codec.n_mels:
        raise UsageError("checkpoint latent size does not match codec.n_mels")
    return model, meta, Normalizer.load(model_dir / "normal.nrm"), \
        Normalizer.load(model_dir / "whisper.nrm")


def _read_speakers(path: Path) -> dict[str, np.ndarray]:
    rows = [line.split(",") for line in path.read_text().splitlines()[1:] if line.strip()]
    return {r[0]: np.array([float(v) for v in r[1:]]) for r in rows}


def cmd_convert(args, ctx: Context) -> int:
    model_dir = _existing_dir(args.model, ctx.config.paths.model, "model")
    if args.inputs and args.corpus:
        raise UsageError("give either --corpus or WAV inputs, not both")
    model, meta, normal_norm, whisper_norm = _load_model(model_dir, ctx)
    jobs = []  # (name, whisper, speaker, index for the seed)
    if args.inputs:
        speakers = _read_speakers(Path(args.speakers)) if args.speakers else {}
        for k, name in enumerate(args.inputs):
            path = Path(name)
            if not path.is_file():
                raise UsageError(f"input {path} not found")
            spk = speakers.get(path.stem, np.zeros(model.config.speaker_dim))
            jobs.append((path.stem, read_wav(path), spk, k))
    else:
        src = _existing_dir(args.corpus, ctx.config.paths.corpus, "corpus")
        items = load_corpus(src, require_whisper=True)
        wanted = {"held-out": set(meta["held_out"]), "train": set(meta["train"]),
                  "all": {it.utt_id for it in items}}[args.split]
        jobs = [(it.utt_id, it.whisper, it.speaker, k) for k, it in enumerate(items)
                if it.utt_id in wanted]
        if not jobs:
            raise UsageError(f"no {args.split} utterances of the model found in {src}")
    out = ctx.require_out()
    paired = meta["mode"] == "paired_source"
    for name, whisper, speaker, k in jobs:
        if len(speaker) != model.config.speaker_dim:
            raise UsageError(f"{name}: speaker descriptor has {len(speaker)} values, model "
                             f"expects {model.config.speaker_dim}")
        y = convert_waveform(model, whisper, speaker, normal_norm, whisper_norm,
                             ctx.config.codec, conversion_seed(ctx.seed, k), ctx.steps, paired)
        write_wav(out / f"{name}.wav", y, encoding="float32")
    log.info("converted %d utterances with N=%d into %s", len(jobs), ctx.steps, out)
    return EXIT_OK


def _report(rows: Sequence[Sequence[str]]) -> None:
    for row in rows[1:]:
        log.info("%s", "  ".join(str(v) for v in row))


def cmd_oracle_check(args, ctx: Context) -> int:
    out = ctx.require_out()
    report = oracle_check(ctx.seed, ctx.config.oracle.delta, ctx.config.oracle.transport)
    write_csv(out / "oracle.csv", report.rows())
    _report(report.rows())
    return EXIT_OK if report.passed else EXIT_THRESHOLD


def cmd_misalignment_study(args, ctx: Context) -> int:
    cfg = dataclasses.replace(ctx.config.misalignment, euler_steps=ctx.steps)
    src = _existing_dir(args.corpus, ctx.config.paths.corpus, "corpus")
    items = load_corpus(src, require_whisper=True)
    if len(items) <= cfg.train:
        raise UsageError(f"corpus has {len(items)} utterances; misalignment.train={cfg.train} "
                         "leaves none held out")
    out = ctx.require_out()
    result = misalignment_study(items, cfg, ctx.seed, ctx.jobs, ctx.config.codec)
    checks = [CHECK_HEADER] + [c.row() for c in result.checks()]
    write_csv(out / "misalignment.csv", result.rows())
    write_csv(out / "misalignment_checks.csv", checks)
    _report(result.rows())
    _report(checks)
    return EXIT_OK if result.passed else EXIT_THRESHOLD


def cmd_layer_select(args, ctx: Context) -> int:
    settings = ctx.config.layer_select
    features = _existing_dir(args.features, ctx.config.paths.features, "features")
    alignments = _existing_dir(args.alignments, ctx.config.paths.alignments, "alignments")
    allow = settings.allow_degenerate if args.allow_degenerate is None else args.allow_degenerate
    frame_level = settings.frame_level_cca if args.frame_level_cca is None else args.frame_level_cca
    out = ctx.require_out()
    triplets = load_triplets(features, alignments)
    if triplets[0].layers < 2:
        raise UsageError("layer selection needs features from at least two layers")
    try:
        selection = score_layers(triplets, frame_level_cca=frame_level)
    except ValueError as exc:  # e.g. a zero-variance view or a single word label
        raise UsageError(f"features cannot be scored: {exc}") from None
    write_scores(out / "layer_scores.csv", selection.scores)
    (out / "selected_layer.txt").write_text(f"{selection.best}\n")
    log.info("selected layer %d%s", selection.best, " (tie)" if selection.tie else "")
    if selection.degenerate:
        log.warning("constant score vector(s): %s", ", ".join(selection.degenerate))
        if not allow:
            return EXIT_INVALID
    return EXIT_OK


def cmd_eval(args, ctx: Context) -> int:
    refs = _existing_dir(args.references, ctx.config.paths.references, "references")
    conv = _existing_dir(args.converted, ctx.config.paths.converted, "converted")
    names = sorted(p.stem for p in conv.glob("*.wav"))
    if not names:
        raise UsageError(f"no WAV files in {conv}")
    missing = [n for n in names if not (refs / f"{n}.wav").is_file()]
    if missing:
        raise UsageError(f"no reference for {', '.join(missing[:5])}")
    out = ctx.require_out()
    report = evaluate(names, [read_wav(refs / f"{n}.wav") for n in names],
                      [read_wav(conv / f"{n}.wav") for n in names], ctx.jobs)
    write_csv(out / "eval.csv", report.csv_rows())
    _report(report.csv_rows())
    if args.check:
        check = ctx.config.conversion.check(report.rows)
        write_csv(out / "eval_checks.csv", [CHECK_HEADER, check.row()])
        log.info("%d/%d utterances meet the conversion criteria", int(check.value), len(names))
        return EXIT_OK if check.passed else EXIT_THRESHOLD
    return EXIT_OK


COMMANDS = {
    "synth-demo": cmd_synth_demo,
    "whisperize": cmd_whisperize,
    "train": cmd_train,
    "convert": cmd_convert,
    "oracle-check": cmd_oracle_check,
    "misalignment-study": cmd_misalignment_study,
    "layer-select": cmd_layer_select,
    "eval": cmd_eval,
}


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_INVALID
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(message)s", stream=sys.stderr, force=True)
    try:
        ctx = _context(args)
        return COMMANDS[args.command](args, ctx)
    except (UsageError, ConfigError, FeatureFormatError, CheckpointError,
            FileNotFoundError) as exc:
        log.error("%s", exc)
        return EXIT_INVALID
    except Exception as exc:  # noqa: BLE001 - reported as a runtime failure
        log.error("%s: %s", type(exc).__name__, exc)
        log.debug("traceback", exc_info=True)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
