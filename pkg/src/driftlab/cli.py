"""Command-line entry point. Every subcommand reads and writes artifacts in ``--out-dir``.

Exit codes: 0 ok, 2 configuration or input error, 3 numeric failure,
4 contract violation (frozen decoder, pass counts).
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

from .checkpoint import CheckpointError
from .conditions import CONDITIONS
from .models import VAE
from .pipeline import (
    ConfigError,
    PipelineError,
    RunConfig,
    SampleSet,
    SharedData,
    build_context,
    calibrate,
    evaluate_samples,
    load_generator,
    load_scales,
    make_corpus,
    read_corpus,
    run_ablation,
    sample_grid,
    save_generator,
    save_scales,
    train_stage1,
    train_stage2,
    write_corpus,
)
from .references import CacheError, LatentCache, build_cache

log = logging.getLogger("driftlab")

DEFAULT_ABLATION = (
    "coupled-default",
    "latent-space",
    "detached-decoder",
    "stop-grad-decoder",
    "no-drift",
    "coupled-no-zdiv",
)


class Artifacts:
    """File names inside the output directory."""

    def __init__(self, out_dir: Path, config: RunConfig):
        self.dir = out_dir
        self.config = config

    def _need(self, path: Path, producer: str) -> Path:
        if not path.exists():
            raise ConfigError(f"{path} not found; run `driftlab {producer}` first")
        return path

    @property
    def corpus(self) -> Path:
        return self.dir / "corpus.txt"

    @property
    def vae(self) -> Path:
        return self.dir / "vae.ckpt"

    @property
    def cache(self) -> Path:
        return self.dir / "cache.bin"

    @property
    def scales(self) -> Path:
        return self.dir / f"scales-{self.config.condition}.ckpt"

    @property
    def generator(self) -> Path:
        return self.dir / f"generator-{self.config.condition}-{self.config.seed}.ckpt"

    @property
    def samples(self) -> Path:
        return self.dir / f"samples-{self.config.condition}-{self.config.seed}.txt"

    @property
    def report(self) -> Path:
        return self.dir / f"report-{self.config.condition}-{self.config.seed}.txt"

    def load_vae(self) -> VAE:
        return VAE.load(self._need(self.vae, "train-vae"))

    def load_cache(self, vae: VAE) -> LatentCache:
        return LatentCache.load(self._need(self.cache, "build-cache"), vae)

    def load_corpus(self):
        return read_corpus(self._need(self.corpus, "make-corpus"))


def cmd_make_corpus(cfg: RunConfig, art: Artifacts, args) -> None:
    corpus = make_corpus(cfg)
    write_corpus(corpus, art.corpus)
    print(f"wrote {len(corpus)} molecules to {art.corpus}")


def cmd_train_vae(cfg: RunConfig, art: Artifacts, args) -> None:
    _, history = train_stage1(cfg, art.load_corpus(), art.vae)
    last = history.epochs[-1]
    print(
        f"wrote {art.vae}: loss {last['loss']:.3f}, held-out exact {last['val_exact']:.3f},"
        f" token accuracy {last['val_token_acc']:.3f}"
    )


def cmd_build_cache(cfg: RunConfig, art: Artifacts, args) -> None:
    cache = build_cache(art.load_vae(), art.load_corpus())
    cache.save(art.cache)
    print(f"wrote {art.cache}: {len(cache)} entries, {cache.skipped} skipped")


def cmd_calibrate(cfg: RunConfig, art: Artifacts, args) -> None:
    vae = art.load_vae()
    scales = calibrate(build_context(cfg, vae, art.load_cache(vae)))
    save_scales(art.scales, scales)
    print(f"wrote {art.scales}: " + ", ".join(f"tau={t:g} lambda={v:.6g}" for t, v in sorted(scales.lambdas.items())))


def cmd_train_drift(cfg: RunConfig, art: Artifacts, args) -> None:
    vae = art.load_vae()
    ctx = build_context(cfg, vae, art.load_cache(vae))
    scales = load_scales(art.scales) if art.scales.exists() and cfg.lambda_mode == "fixed" else None
    gen, scales, history = train_stage2(ctx, cfg.seed, scales)
    save_generator(art.generator, gen, scales)
    print(f"wrote {art.generator}: final loss {history.steps[-1]['loss']:.4f}")


def cmd_sample(cfg: RunConfig, art: Artifacts, args) -> None:
    vae = art.load_vae()
    ctx = build_context(cfg, vae, art.load_cache(vae))
    gen, _ = load_generator(art._need(art.generator, "train-drift"))
    samples = sample_grid(ctx, gen, cfg.seed)
    art.samples.write_text(samples.to_text())
    print(f"wrote {sum(len(t) for t in samples.tokens)} samples to {art.samples}")


def cmd_eval(cfg: RunConfig, art: Artifacts, args) -> None:
    vae = art.load_vae()
    cache = art.load_cache(vae)
    samples = SampleSet.from_text(art._need(art.samples, "sample").read_text())
    report = evaluate_samples(samples, cache, cfg.condition, cfg.seed, cfg.condition_mode)
    art.report.write_text(report.to_text())
    print(report.to_text(), end="")


def cmd_ablate(cfg: RunConfig, art: Artifacts, args) -> None:
    conditions = args.conditions.split(",") if args.conditions else list(DEFAULT_ABLATION)
    unknown = [c for c in conditions if c not in CONDITIONS]
    if unknown:
        raise ConfigError(f"unknown conditions: {unknown}")
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else [cfg.seed]
    data = None
    if art.vae.exists() and art.cache.exists() and art.corpus.exists():
        vae = art.load_vae()
        data = SharedData(art.load_corpus(), vae, art.load_cache(vae), None)
    summary = run_ablation(cfg, conditions, seeds, data, art.dir)
    print(summary.to_text(), end="")


COMMANDS = {
    "make-corpus": (cmd_make_corpus, "generate the random molecule corpus and its splits"),
    "train-vae": (cmd_train_vae, "Stage 1: fit the VAE"),
    "build-cache": (cmd_build_cache, "encode the corpus into the latent cache"),
    "calibrate": (cmd_calibrate, "compute fixed per-temperature drift scales"),
    "train-drift": (cmd_train_drift, "Stage 2: train the generator against the frozen decoder"),
    "sample": (cmd_sample, "draw samples on the guidance grid"),
    "eval": (cmd_eval, "score samples and select a guidance scale"),
    "ablate": (cmd_ablate, "train and evaluate several conditions and seeds"),
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="JSON run configuration")
    common.add_argument("--seed", type=int, help="override the run seed")
    common.add_argument("--condition", choices=sorted(CONDITIONS), help="override the ablation condition")
    common.add_argument("--out-dir", type=Path, default=Path("runs"), help="artifact directory (default: runs)")
    common.add_argument("--samples-per-alpha", type=int, help="override the evaluation sample count")
    common.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    parser = argparse.ArgumentParser(prog="driftlab", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, parents=[common], help=help_text)
        if name == "ablate":
            p.add_argument("--conditions", help="comma-separated condition ids")
            p.add_argument("--seeds", help="comma-separated Stage-2 seeds")
    return parser


def resolve_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.condition is not None:
        overrides["condition"] = args.condition
    if args.samples_per_alpha is not None:
        overrides["samples_per_alpha"] = args.samples_per_alpha
    return replace(cfg, **overrides).validate()


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        args.out_dir.mkdir(parents=True, exist_ok=True)
        COMMANDS[args.command][0](cfg, Artifacts(args.out_dir, cfg), args)
    except PipelineError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except (CacheError, CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return ConfigError.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
