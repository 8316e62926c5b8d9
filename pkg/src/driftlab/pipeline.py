"""End-to-end orchestration: corpus, Stage-1 VAE, latent cache, calibration,
Stage-2 drift training, sampling, evaluation and ablation sweeps.

Randomness is drawn from named streams ``default_rng([seed, stream, *index])``
so that each phase (and each training step) is reproducible on its own.
"""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from . import autodiff as ad
from . import checkpoint
from .conditions import CONDITIONS, AblationCondition, ExternalFeatureNet, RandomFeatureMap, get_condition, gradient_path
from .drift import DriftGroup, DriftScales, DriftSettings, calibrate_lambda, drift_loss, sample_alpha, zdiv_loss
from .grammar import ATOM_TOKENS, BRANCH, INDEX_TOKENS, RING, EncodingError, decode, encode, parse_tokens
from .metrics import GRID, EvalReport, EvalRow, intdiv, mae_slope, scaffold_div, spearman, summarize, vun_from_flags
from .models import VAE, Dims, Generator, make_optimizer, reparameterize, token_ids, vae_loss
from .molecule import canonical_hash, descriptors, fingerprint, scaffold_hash
from .references import (
    SPLITS,
    LatentCache,
    build_cache,
    sample_positives_binned_hybrid,
    sample_positives_v2,
    sample_uncond,
)

log = logging.getLogger(__name__)

STREAMS = {"corpus": 1, "vae": 2, "calibrate": 3, "train": 4, "eval": 5, "aux": 6, "init": 7}
MODES = ("scalar-binned", "v2-multi")


class PipelineError(Exception):
    exit_code = 1


class ConfigError(PipelineError):
    exit_code = 2


class NumericError(PipelineError):
    exit_code = 3


class ContractViolation(PipelineError):
    exit_code = 4


def stream(seed: int, name: str, *index: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), STREAMS[name], *(int(i) for i in index)])


# -- configuration -----------------------------------------------------------

@dataclass
class RunConfig:
    """Every tunable of a run. Serialized as JSON; unknown keys are rejected."""

    seed: int = 42
    data_seed: int = 0
    # corpus
    n_molecules: int = 20000
    min_tokens: int = 8
    max_tokens: int = 48
    # shapes
    seq_len: int = 64
    d_tok: int = 256
    d_enc: int = 256
    d_z: int = 16
    d_trunk: int = 128
    d_phi: int = 32
    d_g: int = 128
    # stage 1
    beta: float = 0.01
    vae_epochs: int = 30
    vae_lr: float = 1e-3
    vae_batch: int = 64
    vae_optimizer: str = "adam"
    vae_clip_norm: float | None = None
    # stage 2
    condition: str = "coupled-default"
    condition_mode: str = "scalar-binned"
    positive_mode: str = "hybrid"
    taus: tuple[float, ...] = (0.5, 1.0, 2.0)
    lambda_z: float = 2.0
    knn_k: int = 5
    margin: float = 3.0
    n_g: int = 32
    n_pos: int = 64
    n_unc: int = 32
    alpha_max: float = 4.0
    lambda_mode: str = "fixed"
    uncond_repel: bool = False
    n_cal_groups: int = 32
    stage2_steps: int = 400
    groups_per_step: int = 4
    stage2_lr: float = 1e-3
    stage2_optimizer: str = "adam"
    aux_steps: int = 600
    # evaluation
    alpha_grid: tuple[float, ...] = GRID
    samples_per_alpha: int = 2000
    eval_batch: int = 500

    def __post_init__(self):
        self.taus = tuple(float(t) for t in self.taus)
        self.alpha_grid = tuple(float(a) for a in self.alpha_grid)

    def validate(self) -> "RunConfig":
        problems = []
        if self.condition not in CONDITIONS:
            problems.append(f"unknown condition {self.condition!r}")
        if self.condition_mode not in MODES:
            problems.append(f"condition_mode must be one of {MODES}")
        if self.positive_mode not in ("hybrid", "property"):
            problems.append("positive_mode must be 'hybrid' or 'property'")
        if self.lambda_mode not in ("fixed", "batch"):
            problems.append("lambda_mode must be 'fixed' or 'batch'")
        if not self.taus or any(t <= 0 for t in self.taus):
            problems.append("taus must be a non-empty list of positive numbers")
        if self.n_g < 2 or self.n_pos < 1 or self.n_unc < 1:
            problems.append("need n_g >= 2, n_pos >= 1, n_unc >= 1")
        if not 1.0 <= self.alpha_max <= 8.0 or any(not 1.0 <= a <= 8.0 for a in self.alpha_grid):
            problems.append("guidance scales must lie in [1, 8]")
        if not 1 <= self.min_tokens <= self.max_tokens <= self.seq_len:
            problems.append("need 1 <= min_tokens <= max_tokens <= seq_len")
        for name in ("vae_epochs", "stage2_steps", "groups_per_step", "samples_per_alpha", "eval_batch", "n_molecules"):
            if getattr(self, name) < 1:
                problems.append(f"{name} must be positive")
        if problems:
            raise ConfigError("; ".join(problems))
        return self

    @property
    def dims(self) -> Dims:
        return Dims(
            seq_len=self.seq_len,
            d_tok=self.d_tok,
            d_enc=self.d_enc,
            d_z=self.d_z,
            d_trunk=self.d_trunk,
            d_phi=self.d_phi,
            d_g=self.d_g,
            d_cond=1 if self.condition_mode == "scalar-binned" else 4,
        )

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        try:
            return cls(**data).validate()
        except TypeError as exc:
            raise ConfigError(str(exc)) from None

    @classmethod
    def from_json(cls, text: str) -> "RunConfig":
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from None
        if not isinstance(data, dict):
            raise ConfigError("config must be a JSON object")
        return cls.from_dict(data)

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config: {exc}") from None
        return cls.from_json(text)


# -- corpus ------------------------------------------------------------------

_ELEMENT_P = {"C": 0.72, "N": 0.12, "O": 0.09, "S": 0.04, "F": 0.03}
_ORDER_P = (0.86, 0.11, 0.03)
_ATOM_BY = {(tok.strip("[]=#"), 1 + ("=" in tok) + 2 * ("#" in tok)): tok for tok in ATOM_TOKENS}


def random_tokens(rng: np.random.Generator, length: int) -> list[str]:
    """Token string biased toward organic-looking molecules: mostly atoms, some branches and rings."""
    elements, probs = list(_ELEMENT_P), list(_ELEMENT_P.values())
    toks: list[str] = []
    while len(toks) < length:
        u = rng.random()
        if u < 0.78:
            el = elements[rng.choice(len(elements), p=probs)]
            order = int(rng.choice(3, p=_ORDER_P)) + 1
            toks.append(_ATOM_BY[(el, order)])
        elif u < 0.90:
            toks += [BRANCH, INDEX_TOKENS[rng.integers(0, 6)]]
        else:
            toks += [RING, INDEX_TOKENS[rng.integers(1, 8)]]
    return toks[:length]


def make_corpus(config: RunConfig, max_attempts_factor: int = 5) -> list[tuple[list[str], str]]:
    """Canonical token sequences of distinct random molecules, split 80/10/10."""
    rng = stream(config.data_seed, "corpus")
    seen: dict[int, list[str]] = {}
    attempts = 0
    while len(seen) < config.n_molecules and attempts < max_attempts_factor * config.n_molecules:
        attempts += 1
        graph = decode(random_tokens(rng, int(rng.integers(config.min_tokens, config.max_tokens + 1))))
        if graph.n_atoms == 0:
            continue
        try:
            toks = encode(graph)
        except EncodingError:
            continue
        if len(toks) > config.seq_len:
            continue
        seen.setdefault(canonical_hash(graph), toks)
    if len(seen) < config.n_molecules:
        log.warning("corpus has %d distinct molecules, fewer than the %d requested", len(seen), config.n_molecules)
    entries = list(seen.values())
    order = rng.permutation(len(entries))
    n_train, n_val = int(0.8 * len(entries)), int(0.1 * len(entries))
    split = ["train"] * n_train + ["val"] * n_val + ["test"] * (len(entries) - n_train - n_val)
    return [(entries[i], split[k]) for k, i in enumerate(order)]


def write_corpus(corpus: Iterable[tuple[Sequence[str], str]], path) -> None:
    Path(path).write_text("".join(f"{s}\t{''.join(t)}\n" for t, s in corpus))


def read_corpus(path) -> list[tuple[list[str], str]]:
    out = []
    for line in Path(path).read_text().splitlines():
        if line:
            split, _, text = line.partition("\t")
            if split not in SPLITS:
                raise ConfigError(f"bad split label {split!r} in corpus")
            out.append((parse_tokens(text), split))
    return out


# -- stage 1 -----------------------------------------------------------------

@dataclass
class Stage1Log:
    epochs: list[dict] = field(default_factory=list)


def reconstruction_accuracy(vae: VAE, sequences: Sequence[Sequence[str]], batch: int = 500) -> tuple[float, float]:
    """(exact sequence match, per-position token accuracy) decoding the posterior mean."""
    if not sequences:
        return math.nan, math.nan
    exact = tok = 0.0
    for start in range(0, len(sequences), batch):
        ids = token_ids(sequences[start : start + batch], vae.dims.seq_len)
        mu, _ = vae.encoder(ids)
        pred = np.argmax(vae.decoder.logits(mu.value), axis=-1)
        exact += float((pred == ids).all(axis=1).sum())
        tok += float((pred == ids).mean(axis=1).sum())
    return exact / len(sequences), tok / len(sequences)


def train_stage1(config: RunConfig, corpus, checkpoint_path=None) -> tuple[VAE, Stage1Log]:
    """Fit the VAE on the train split; aborts on a non-finite loss, keeping the last good weights."""
    dims = config.dims
    vae = VAE(dims, seed=config.data_seed)
    train = [t for t, s in corpus if s == "train" and len(t) <= dims.seq_len]
    val = [t for t, s in corpus if s == "val" and len(t) <= dims.seq_len]
    if not train:
        raise ConfigError("corpus has no training molecules")
    ids = token_ids(train, dims.seq_len)
    opt = make_optimizer(config.vae_optimizer, vae.parameters(), config.vae_lr, config.vae_clip_norm)
    history = Stage1Log()
    last_good = vae.state_dict()
    for epoch in range(config.vae_epochs):
        rng = stream(config.data_seed, "vae", epoch)
        order = rng.permutation(len(ids))
        totals = np.zeros(3)
        n_batches = 0
        for start in range(0, len(ids), config.vae_batch):
            x = ids[order[start : start + config.vae_batch]]
            mu, logvar = vae.encoder(x)
            logits, _ = vae.decoder(reparameterize(mu, logvar, rng))
            loss, recon, kl = vae_loss(x, mu, logvar, logits, config.beta)
            if not math.isfinite(loss.item()):
                vae.load_state_dict(last_good)
                if checkpoint_path is not None:
                    vae.save(checkpoint_path)
                raise NumericError(f"non-finite VAE loss at epoch {epoch}")
            opt.zero_grad()
            ad.backward(loss)
            opt.step()
            totals += (loss.item(), recon.item(), kl.item())
            n_batches += 1
        last_good = vae.state_dict()
        exact, tok = reconstruction_accuracy(vae, val[:1000])
        row = dict(zip(("loss", "recon", "kl"), (totals / n_batches).tolist()))
        row.update(epoch=epoch, val_exact=exact, val_token_acc=tok)
        history.epochs.append(row)
        log.info("vae epoch %d loss %.3f exact %.3f tokens %.3f", epoch, row["loss"], exact, tok)
    vae.decoder.forward_calls = vae.decoder.samples_decoded = 0
    if checkpoint_path is not None:
        vae.save(checkpoint_path)
    return vae, history


# -- stage 2 -----------------------------------------------------------------

@dataclass
class Stage2Context:
    """Everything a Stage-2 step needs besides the generator."""

    config: RunConfig
    condition: AblationCondition
    vae: VAE
    cache: LatentCache
    feature_fn: Callable
    ref_feats: np.ndarray
    settings: DriftSettings

    @property
    def multi(self) -> bool:
        return self.config.condition_mode == "v2-multi"

    def condition_vector(self, targets: np.ndarray) -> np.ndarray:
        """Standardize raw property targets into the generator's condition channel."""
        targets = np.atleast_2d(np.asarray(targets, dtype=np.float64))
        if self.multi:
            return (targets - self.cache.prop_mean) / self.cache.prop_std
        return (targets[:, :1] - self.cache.prop_mean[0]) / self.cache.prop_std[0]

    def draw_target(self, rng: np.random.Generator) -> np.ndarray:
        if self.multi:
            return self.cache.props[rng.choice(self.cache.train_ids)].copy()
        lo, hi = self.cache.prop_range
        return np.array([rng.uniform(lo, hi)])

    def positives(self, target: np.ndarray, group_phi_mean: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        n_pos = self.config.n_pos
        if self.multi:
            draw = sample_positives_v2(self.cache, target, n_pos)
        else:
            draw = sample_positives_binned_hybrid(
                self.cache, float(target[0]), n_pos, group_phi_mean, rng, self.config.positive_mode
            )
        return draw.ids

    def uncond(self, alpha: float, rng: np.random.Generator) -> np.ndarray | None:
        if not self.settings.cfg or alpha <= 1.0:
            return None
        return sample_uncond(self.cache, self.config.n_unc, rng).ids


def build_context(config: RunConfig, vae: VAE, cache: LatentCache, condition: AblationCondition | None = None) -> Stage2Context:
    condition = condition or get_condition(config.condition)
    vae.decoder.freeze()
    train_z = cache.z[cache.train_ids]
    z_mean, z_std = train_z.mean(axis=0), train_z.std(axis=0) + 1e-8
    aux_rng = stream(config.data_seed, "aux")
    if condition.feature == "decoder":
        base, ref = vae.decoder.features, cache.phi
    elif condition.feature == "latent":
        base, ref = (lambda z: z), cache.z
    elif condition.feature == "random":
        rf = RandomFeatureMap(config.d_z, config.d_phi, z_mean, z_std, seed=config.data_seed)
        base, ref = rf, rf(cache.z).value
    else:
        net = ExternalFeatureNet(
            config.d_z, config.d_phi, z_mean, z_std, seed=config.data_seed, reconstruct=condition.feature == "external-guided"
        )
        net.fit(train_z, cache.props[cache.train_ids, 0], aux_rng, steps=config.aux_steps)
        base, ref = net, net(cache.z).value
    settings = DriftSettings(
        taus=condition.taus,
        normalization=condition.normalization,
        cfg=condition.cfg,
        uncond_repel=config.uncond_repel,
        lambda_mode=config.lambda_mode,
    )
    return Stage2Context(config, condition, vae, cache, gradient_path(base, condition.gradient), ref, settings)


def calibrate(ctx: Stage2Context) -> DriftScales:
    """Fixed lambda per temperature from groups of cached train features standing in for generated samples."""
    cfg, cache = ctx.config, ctx.cache
    groups = []
    for g in range(cfg.n_cal_groups):
        rng = stream(cfg.data_seed, "calibrate", g)
        target = ctx.draw_target(rng)
        alpha = sample_alpha(rng.random(), cfg.alpha_max)
        gen_ids = rng.choice(cache.train_ids, size=cfg.n_g, replace=cfg.n_g > len(cache.train_ids))
        pos = ctx.positives(target, cache.phi[gen_ids].mean(axis=0), rng)
        unc = ctx.uncond(alpha, rng)
        groups.append(
            DriftGroup(
                ctx.ref_feats[gen_ids],
                ctx.ref_feats[pos],
                None if unc is None else ctx.ref_feats[unc],
                alpha,
                ctx.settings.taus,
            )
        )
    return DriftScales({tau: calibrate_lambda(groups, tau, ctx.settings) for tau in ctx.settings.taus}, "fixed")


@dataclass
class Stage2Log:
    steps: list[dict] = field(default_factory=list)


def new_generator(ctx: Stage2Context, seed: int) -> Generator:
    train_z = ctx.cache.z[ctx.cache.train_ids]
    return Generator(
        ctx.config.dims, stream(seed, "init"), z_mean=train_z.mean(axis=0), z_std=train_z.std(axis=0) + 1e-8
    )


def _assert_decoder_frozen(vae: VAE) -> None:
    for name, p in vae.decoder.params.items():
        if p.requires_grad or (p.grad is not None and np.any(p.grad != 0)):
            raise ContractViolation(f"decoder parameter {name} received a gradient during Stage 2")


def stage2_step(ctx: Stage2Context, gen: Generator, scales: DriftScales, seed: int, step: int) -> tuple[ad.Tensor, dict]:
    """Build the averaged loss over ``groups_per_step`` drift groups for one optimizer step."""
    cfg = ctx.config
    rng = stream(seed, "train", step)
    total = None
    stats = {"drift": 0.0, "zdiv": 0.0}
    for _ in range(cfg.groups_per_step):
        target = ctx.draw_target(rng)
        alpha = sample_alpha(rng.random(), cfg.alpha_max)
        eps = rng.standard_normal((cfg.n_g, cfg.d_z))
        cond = np.repeat(ctx.condition_vector(target), cfg.n_g, axis=0)
        z_hat = gen(eps, cond, alpha)
        parts = []
        if ctx.condition.drift:
            phi_mean = ctx.vae.decoder.features(z_hat.value).value.mean(axis=0)
            pos = ctx.positives(target, phi_mean, rng)
            unc = ctx.uncond(alpha, rng)
            group = DriftGroup(
                z_hat, ctx.ref_feats[pos], None if unc is None else ctx.ref_feats[unc], alpha, ctx.settings.taus
            )
            d = drift_loss(group, scales, ctx.feature_fn, ctx.settings)
            stats["drift"] += d.item() / cfg.groups_per_step
            parts.append(d)
        if ctx.condition.zdiv and cfg.lambda_z > 0:
            zd = zdiv_loss(z_hat, cfg.knn_k, cfg.margin)
            stats["zdiv"] += zd.item() / cfg.groups_per_step
            parts.append(ad.scale(zd, cfg.lambda_z))
        for p in parts:
            total = p if total is None else total + p
    if total is None:
        total = ad.Tensor(0.0)
    return ad.scale(total, 1.0 / cfg.groups_per_step), stats


def train_stage2(
    ctx: Stage2Context, seed: int, scales: DriftScales | None = None, steps: int | None = None
) -> tuple[Generator, DriftScales, Stage2Log]:
    """Train a fresh generator against the frozen decoder. Returns (generator, scales, log)."""
    cfg = ctx.config
    if scales is None:
        scales = calibrate(ctx)
    frozen = {k: v.copy() for k, v in ctx.vae.decoder.state_dict().items()}
    lambdas_before = dict(scales.lambdas)
    gen = new_generator(ctx, seed)
    opt = make_optimizer(cfg.stage2_optimizer, gen.parameters(), cfg.stage2_lr)
    history = Stage2Log()
    for step in range(cfg.stage2_steps if steps is None else steps):
        loss, stats = stage2_step(ctx, gen, scales, seed, step)
        if not math.isfinite(loss.item()):
            raise NumericError(f"non-finite Stage-2 loss at step {step}")
        opt.zero_grad()
        ctx.vae.decoder.zero_grad()
        if loss.requires_grad:
            ad.backward(loss)
        _assert_decoder_frozen(ctx.vae)
        opt.step()
        stats.update(step=step, loss=loss.item())
        history.steps.append(stats)
    for k, v in ctx.vae.decoder.state_dict().items():
        if not np.array_equal(v, frozen[k]):
            raise ContractViolation(f"decoder parameter {k} changed during Stage 2")
    if scales.lambdas != lambdas_before:
        raise ContractViolation("fixed drift scales changed during Stage 2")
    gen.forward_calls = gen.samples_generated = 0
    return gen, scales, history


def save_generator(path, gen: Generator, scales: DriftScales) -> None:
    tensors = gen.state_dict()
    tensors["lambdas"] = np.array(sorted(scales.lambdas.items()), dtype=np.float64).reshape(-1, 2)
    checkpoint.save(path, "generator", tensors, asdict(gen.dims))


def load_generator(path) -> tuple[Generator, DriftScales]:
    _, dims, tensors = checkpoint.load(path, "generator")
    gen = Generator(Dims(**dims))
    lambdas = tensors.pop("lambdas")
    gen.load_state_dict(tensors)
    return gen, DriftScales({float(t): float(v) for t, v in lambdas}, "fixed")


def save_scales(path, scales: DriftScales) -> None:
    checkpoint.save(path, "scales", {"lambdas": np.array(sorted(scales.lambdas.items())).reshape(-1, 2)})


def load_scales(path) -> DriftScales:
    _, _, tensors = checkpoint.load(path, "scales")
    return DriftScales({float(t): float(v) for t, v in tensors["lambdas"]}, "fixed")


# -- sampling and evaluation -------------------------------------------------

@dataclass(frozen=True)
class Analysis:
    valid: bool
    hash: int
    scaffold: int
    props: np.ndarray
    fp: np.ndarray


class Analyzer:
    """Memoized decode-and-measure of token strings."""

    def __init__(self):
        self._memo: dict[str, Analysis] = {}

    def __call__(self, tokens: Sequence[str]) -> Analysis:
        key = "".join(tokens)
        hit = self._memo.get(key)
        if hit is None:
            g = decode(tokens)
            hit = Analysis(
                g.n_atoms > 0 and g.is_valid(), canonical_hash(g), scaffold_hash(g), descriptors(g), fingerprint(g)
            )
            self._memo[key] = hit
        return hit


@dataclass
class SampleSet:
    """Decoded samples per guidance scale with the targets they were drawn for."""

    alphas: list[float]
    targets: list[np.ndarray]
    tokens: list[list[list[str]]]

    def to_text(self) -> str:
        lines = []
        for a, ts, toks in zip(self.alphas, self.targets, self.tokens):
            for t, seq in zip(ts, toks):
                lines.append(f"{a!r}\t{','.join(repr(float(v)) for v in t)}\t{''.join(seq)}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "SampleSet":
        grouped: dict[float, tuple[list, list]] = {}
        for line in text.splitlines():
            if not line:
                continue
            a, t, seq = line.split("\t")
            bucket = grouped.setdefault(float(a), ([], []))
            bucket[0].append([float(v) for v in t.split(",")])
            bucket[1].append(parse_tokens(seq))
        alphas = list(grouped)
        return cls(alphas, [np.array(grouped[a][0]) for a in alphas], [grouped[a][1] for a in alphas])


def sample_grid(ctx: Stage2Context, gen: Generator, seed: int, samples_per_alpha: int | None = None) -> SampleSet:
    """One generator pass and one decoder pass per molecule, for every grid guidance scale."""
    cfg = ctx.config
    n = samples_per_alpha or cfg.samples_per_alpha
    decoder = ctx.vae.decoder
    alphas, targets, tokens = [], [], []
    for k, alpha in enumerate(cfg.alpha_grid):
        rng = stream(seed, "eval", k)
        tgt = np.array([ctx.draw_target(rng) for _ in range(n)])
        eps = rng.standard_normal((n, cfg.d_z))
        gen.samples_generated = decoder.samples_decoded = 0
        seqs: list[list[str]] = []
        for start in range(0, n, cfg.eval_batch):
            stop = min(start + cfg.eval_batch, n)
            z = gen(eps[start:stop], ctx.condition_vector(tgt[start:stop]), alpha).value
            seqs += decoder.decode_tokens(z)
        if gen.samples_generated != n or decoder.samples_decoded != n:
            raise ContractViolation(
                f"alpha={alpha}: {gen.samples_generated} generator and {decoder.samples_decoded} decoder"
                f" sample-passes for {n} molecules"
            )
        alphas.append(alpha)
        targets.append(tgt)
        tokens.append(seqs)
    return SampleSet(alphas, targets, tokens)


def evaluate_samples(
    samples: SampleSet, cache: LatentCache, condition: str, seed: int, mode: str, analyzer: Analyzer | None = None
) -> EvalReport:
    analyzer = analyzer or Analyzer()
    train_hashes = cache.train_hash_set()
    rows = []
    for alpha, tgt, seqs in zip(samples.alphas, samples.targets, samples.tokens):
        res = [analyzer(s) for s in seqs]
        stats = vun_from_flags([r.valid for r in res], [r.hash for r in res], train_hashes)
        actual = np.array([r.props for r in res])
        if mode == "v2-multi":
            rho = float(np.mean([spearman(tgt[:, k], actual[:, k]) for k in range(tgt.shape[1])]))
        else:
            rho = spearman(tgt[:, 0], actual[:, 0])
        mae, slope = mae_slope(tgt[:, 0], actual[:, 0])
        valid = [r for r in res if r.valid]
        div = intdiv(np.array([r.fp for r in valid])) if len(valid) >= 2 else math.nan
        sdiv = scaffold_div([], [r.scaffold for r in valid]) if valid else math.nan
        rows.append(EvalRow(alpha, stats.validity, stats.uniqueness, stats.novelty, rho, mae, slope, div, sdiv, len(seqs)))
    return EvalReport(condition, seed, mode, rows)


def sample_and_eval(
    ctx: Stage2Context, gen: Generator, seed: int, samples_per_alpha: int | None = None, analyzer: Analyzer | None = None
) -> EvalReport:
    samples = sample_grid(ctx, gen, seed, samples_per_alpha)
    return evaluate_samples(samples, ctx.cache, ctx.condition.id, seed, ctx.config.condition_mode, analyzer)


# -- full runs and ablations -------------------------------------------------

@dataclass
class SharedData:
    corpus: list
    vae: VAE
    cache: LatentCache
    stage1: Stage1Log


def prepare_data(config: RunConfig, out_dir=None) -> SharedData:
    """Corpus, VAE and latent cache; written to ``out_dir`` when given."""
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    corpus = make_corpus(config)
    vae, stage1 = train_stage1(config, corpus, None if out is None else out / "vae.ckpt")
    cache = build_cache(vae, corpus)
    if out is not None:
        write_corpus(corpus, out / "corpus.txt")
        cache.save(out / "cache.bin")
    return SharedData(corpus, vae, cache, stage1)


@dataclass
class ConditionResult:
    condition: str
    seed: int
    report: EvalReport
    seconds: float


def run_condition(
    config: RunConfig,
    data: SharedData,
    condition: str,
    seed: int,
    out_dir=None,
    analyzer: Analyzer | None = None,
) -> ConditionResult:
    start = time.perf_counter()
    ctx = build_context(replace(config, condition=condition), data.vae, data.cache)
    gen, scales, _ = train_stage2(ctx, seed)
    report = sample_and_eval(ctx, gen, seed, analyzer=analyzer)
    if out_dir is not None:
        out = Path(out_dir)
        save_generator(out / f"generator-{condition}-{seed}.ckpt", gen, scales)
        (out / f"report-{condition}-{seed}.txt").write_text(report.to_text())
    return ConditionResult(condition, seed, report, time.perf_counter() - start)


@dataclass
class AblationSummary:
    results: list[ConditionResult]

    def by_condition(self) -> dict[str, list[ConditionResult]]:
        out: dict[str, list[ConditionResult]] = {}
        for r in self.results:
            out.setdefault(r.condition, []).append(r)
        return out

    def mean(self, condition: str, metric: str = "spearman") -> float:
        return summarize(getattr(r.report.selected_row, metric) for r in self.by_condition()[condition])[0]

    def to_text(self) -> str:
        lines = ["condition family seeds rho_mean rho_std uniqueness validity novelty feasible"]
        for cond, rs in self.by_condition().items():
            rho_m, rho_s = summarize(r.report.selected_row.spearman for r in rs)
            u = summarize(r.report.selected_row.uniqueness for r in rs)[0]
            v = summarize(r.report.selected_row.validity for r in rs)[0]
            nv = summarize(r.report.selected_row.novelty for r in rs)[0]
            feas = sum(r.report.feasible for r in rs)
            lines.append(
                f"{cond} {get_condition(cond).family} {','.join(str(r.seed) for r in rs)} "
                f"{rho_m:.4f} {rho_s:.4f} {u:.2f} {v:.2f} {nv:.2f} {feas}/{len(rs)}"
            )
        families: dict[str, list[float]] = {}
        for cond in self.by_condition():
            families.setdefault(get_condition(cond).family, []).append(self.mean(cond))
        order = sorted(families, key=lambda f: -float(np.mean(families[f])))
        lines.append("")
        lines.append("family ordering by mean rho: " + " > ".join(f"{f} ({np.mean(families[f]):.3f})" for f in order))
        return "\n".join(lines) + "\n"


def run_ablation(
    config: RunConfig,
    conditions: Sequence[str],
    seeds: Sequence[int],
    data: SharedData | None = None,
    out_dir=None,
) -> AblationSummary:
    """Shared corpus, VAE and cache; one Stage-2 run and report per (condition, seed)."""
    for c in conditions:
        get_condition(c)
    data = data or prepare_data(config, out_dir)
    analyzer = Analyzer()
    results = []
    for cond in conditions:
        for seed in seeds:
            res = run_condition(config, data, cond, seed, out_dir, analyzer)
            log.info("%s seed %d rho %.3f (%.1fs)", cond, seed, res.report.selected_row.spearman, res.seconds)
            results.append(res)
    summary = AblationSummary(results)
    if out_dir is not None:
        (Path(out_dir) / "ablation.txt").write_text(summary.to_text())
    return summary
