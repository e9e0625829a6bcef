"""Command-line entry point: ``speecheq <subcommand>``."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Any, Mapping

import click
import numpy as np
import yaml

from . import audio, augment, evalkit, features, seqm, trainer
from .augment import AugmentPolicy
from .model import ModelConfig, load_model
from .trainer import TrainConfig

CONFIG_ENV = "SPEECHEQ_CONFIG"
PRESETS = ("desk", "tiny", "full")
LEXICONS = ("english-cmu", "mandarin-ipft")

logger = logging.getLogger("speecheq")


class ConfigError(ValueError):
    pass


# -- run config ----------------------------------------------------------------

@dataclasses.dataclass
class PathsConfig:
    manifests: list[str] = dataclasses.field(default_factory=list)
    gender_manifest: str | None = None
    phoneme_manifest: str | None = None
    lexicon: str = "english-cmu"
    out_dir: str = "runs/default"


@dataclasses.dataclass
class RunConfig:
    seed: int = 0
    verbosity: int = 0
    jobs: int = 1
    preset: str = "desk"
    paths: PathsConfig = dataclasses.field(default_factory=PathsConfig)
    train: dict[str, Any] = dataclasses.field(default_factory=dict)
    augment: dict[str, Any] = dataclasses.field(default_factory=dict)
    model: dict[str, Any] = dataclasses.field(default_factory=dict)

    TOP_KEYS = ("seed", "verbosity", "jobs", "preset", "paths", "train", "augment", "model")

    @classmethod
    def from_mapping(cls, data: Mapping[str, Any]) -> "RunConfig":
        unknown = set(data) - set(cls.TOP_KEYS)
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        paths = dict(data.get("paths") or {})
        bad = set(paths) - {f.name for f in dataclasses.fields(PathsConfig)}
        if bad:
            raise ConfigError(f"unknown paths keys: {sorted(bad)}")
        cfg = cls(
            seed=int(data.get("seed", 0)),
            verbosity=int(data.get("verbosity", 0)),
            jobs=int(data.get("jobs", 1)),
            preset=str(data.get("preset", "desk")),
            paths=PathsConfig(**paths),
            train=dict(data.get("train") or {}),
            augment=dict(data.get("augment") or {}),
            model=dict(data.get("model") or {}),
        )
        cfg.validate()
        return cfg

    def validate(self) -> None:
        if self.preset not in PRESETS:
            raise ConfigError(f"preset must be one of {PRESETS}")
        if self.paths.lexicon not in LEXICONS:
            raise ConfigError(f"lexicon must be one of {LEXICONS}")
        if self.jobs < 1:
            raise ConfigError("jobs must be >= 1")
        try:
            self.train_config()
            self.augment_policy()
            self.model_config(85)
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from None

    def train_config(self) -> TrainConfig:
        d = dict(self.train)
        if "seed" in d:
            raise ConfigError("train.seed is not configurable; use the global seed")
        d["seed"] = derive_seed(self.seed, "trainer")
        if self.augment:
            d["augment"] = self.augment_policy()
        return TrainConfig.from_dict(d)

    def augment_policy(self) -> AugmentPolicy:
        d = dict(self.augment)
        known = {f.name for f in dataclasses.fields(AugmentPolicy)}
        extra = set(d) - known
        if extra:
            raise ConfigError(f"unknown augment keys: {sorted(extra)}")
        d["seed"] = derive_seed(self.seed, "augment")
        return AugmentPolicy(**d)

    def model_config(self, lexicon_size: int) -> ModelConfig:
        d = dict(self.model)
        d["lexicon_size"] = lexicon_size
        if self.preset == "desk":
            return ModelConfig.desk(**d)
        if self.preset == "tiny":
            return ModelConfig.tiny(**d)
        return ModelConfig.from_dict(d)


def derive_seed(seed: int, component: str) -> int:
    """Stable per-component seed: sha256 of ``"<seed>:<component>"``."""
    return int.from_bytes(hashlib.sha256(f"{seed}:{component}".encode()).digest()[:4], "little")


def config_keys() -> list[str]:
    keys = [k for k in RunConfig.TOP_KEYS if k not in ("paths", "train", "augment", "model")]
    keys += [f"paths.{f.name}" for f in dataclasses.fields(PathsConfig)]
    keys += [f"train.{f.name}" for f in dataclasses.fields(TrainConfig) if f.name not in ("seed", "augment")]
    keys += [f"augment.{f.name}" for f in dataclasses.fields(AugmentPolicy) if f.name != "seed"]
    keys += [f"model.{f.name}" for f in dataclasses.fields(ModelConfig) if f.name != "lexicon_size"]
    return keys


def load_run_config(path: str | None, overrides: Mapping[str, Any]) -> RunConfig:
    """defaults < config file (argument or $SPEECHEQ_CONFIG) < command-line overrides."""
    data: dict[str, Any] = {}
    path = path or os.environ.get(CONFIG_ENV)
    if path:
        with open(path, encoding="utf-8") as fh:
            data = yaml.safe_load(fh) or {}
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
    for dotted, value in overrides.items():
        if value is None:
            continue
        node = data
        *parents, leaf = dotted.split(".")
        for p in parents:
            node = node.setdefault(p, {})
        node[leaf] = value
    return RunConfig.from_mapping(data)


# -- helpers -------------------------------------------------------------------

def _fail(exc: BaseException) -> None:
    record = {"status": "error", "type": type(exc).__name__, "message": str(exc)}
    click.echo(json.dumps(record, sort_keys=True), err=True)
    sys.exit(1)


def _setup_logging(verbosity: int) -> None:
    level = logging.WARNING - 10 * min(verbosity, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)


def _safe_name(uid: str) -> str:
    return uid.replace("/", "__")


def _atomic_write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text, encoding="utf-8")
    tmp.replace(path)


class Ctx:
    def __init__(self, config_path: str | None, overrides: dict[str, Any]):
        self.config_path = config_path
        self.overrides = overrides

    def config(self, **more) -> RunConfig:
        return load_run_config(self.config_path, {**self.overrides, **more})


def _help_epilog() -> str:
    keys = "\n".join(f"  {k}" for k in config_keys())
    return (
        "\b\nConfiguration file (YAML; also read from $SPEECHEQ_CONFIG). "
        "Precedence: defaults < file < flags.\n\b\nKeys:\n" + keys
    )


@click.group(epilog=_help_epilog(), context_settings={"max_content_width": 100})
@click.option("--config", "config_path", type=click.Path(dir_okay=False), default=None,
              help="YAML run configuration.")
@click.option("--seed", type=int, default=None, help="Global seed; all randomness derives from it.")
@click.option("--jobs", type=int, default=None, help="Worker threads for featurize/augment.")
@click.option("-v", "--verbose", count=True, help="Increase log verbosity.")
@click.pass_context
def main(ctx: click.Context, config_path, seed, jobs, verbose) -> None:
    """Multitask speech emotion recognition toolkit."""
    _setup_logging(verbose)
    ctx.obj = Ctx(config_path, {"seed": seed, "jobs": jobs, "verbosity": verbose or None})


# -- subcommands ---------------------------------------------------------------

@main.command()
@click.option("--dataset", "datasets", nargs=2, multiple=True, required=True,
              metavar="MANIFEST SCHEME", help="Source manifest (TSV) and its label scheme (YAML).")
@click.option("-o", "--output", required=True, type=click.Path(dir_okay=False))
@click.option("--folds", type=int, default=None, help="Also assign stratified folds.")
@click.option("--fold-mode", type=click.Choice(["leave-one-fold-out", "random-ratio"]),
              default="leave-one-fold-out")
@click.option("--ratio", type=float, default=4.0, help="train:test ratio for random-ratio folds.")
@click.pass_obj
def unify(obj: Ctx, datasets, output, folds, fold_mode, ratio) -> None:
    """Merge datasets into one unified manifest."""
    try:
        cfg = obj.config()
        sources = [(seqm.read_source_manifest(m), seqm.LabelScheme.load(s)) for m, s in datasets]
        merged = seqm.build_msud(sources)
        out = Path(output)
        seqm.write_manifest(merged, out)
        if folds:
            splits = evalkit.kfold_split(merged, folds, fold_mode, derive_seed(cfg.seed, "folds"), ratio)
            if fold_mode == "leave-one-fold-out":
                where = {uid: f"fold-{f.index}" for f in splits for uid in f.test}
                seqm.write_manifest([dataclasses.replace(r, split=where[r.id]) for r in merged], out)
            else:
                for f in splits:
                    test = set(f.test)
                    recs = [dataclasses.replace(r, split="test" if r.id in test else "train") for r in merged]
                    seqm.write_manifest(recs, out.with_name(f"{out.stem}.fold{f.index}{out.suffix}"))
        click.echo(f"{len(merged)} records -> {out}")
    except Exception as exc:  # noqa: BLE001
        _fail(exc)


@main.command()
@click.argument("out_dir", type=click.Path(file_okay=False))
@click.option("--per-cell", type=int, default=10, help="Utterances per (emotion, level) cell.")
@click.option("--neutral", type=int, default=None, help="Neutral utterances (default 3 x per-cell).")
@click.option("--duration", type=float, default=0.6, help="Seconds per utterance.")
@click.option("--test-fraction", type=float, default=0.0)
@click.pass_obj
def synth(obj: Ctx, out_dir, per_cell, neutral, duration, test_fraction) -> None:
    """Generate the synthetic 9-class x 3-level corpus."""
    try:
        cfg = obj.config()
        spec = audio.SynthSpec.levelled(
            per_cell, neutral, duration=duration, seed=derive_seed(cfg.seed, "synth"),
            test_fraction=test_fraction,
        )
        recs = audio.synth_corpus(spec, out_dir)
        click.echo(f"{len(recs)} utterances -> {Path(out_dir) / 'manifest.tsv'}")
    except Exception as exc:  # noqa: BLE001
        _fail(exc)


@main.command()
@click.argument("manifest", type=click.Path(exists=True, dir_okay=False))
@click.argument("out_dir", type=click.Path(file_okay=False))
@click.option("--normalize/--no-normalize", default=False, help="Per-utterance mean/variance normalization.")
@click.pass_obj
def featurize(obj: Ctx, manifest, out_dir, normalize) -> None:
    """Write one log-mel feature cache file per utterance plus index.tsv."""
    try:
        cfg = obj.config()
        recs = seqm.read_manifest(manifest)
        out = Path(out_dir)

        def work(rec):
            w = audio.canonicalize(audio.load_wav(rec.audio_path))
            fm = features.mel_fbank(w, normalize=normalize)
            name = f"{_safe_name(rec.id)}.fbk"
            features.write_feature_cache(fm, out / name)
            return f"{rec.id}\t{name}\t{fm.num_frames}\n"

        with ThreadPoolExecutor(max_workers=cfg.jobs) as pool:
            lines = list(pool.map(work, recs))
        _atomic_write(out / "index.tsv", "id\tfile\tframes\n" + "".join(lines))
        click.echo(f"{len(recs)} feature files -> {out}")
    except Exception as exc:  # noqa: BLE001
        _fail(exc)


@main.command("augment")
@click.argument("manifest", type=click.Path(exists=True, dir_okay=False))
@click.argument("out_dir", type=click.Path(file_okay=False))
@click.pass_obj
def augment_cmd(obj: Ctx, manifest, out_dir) -> None:
    """Apply the augmentation policy to every utterance of a manifest."""
    try:
        cfg = obj.config()
        policy = cfg.augment_policy()
        recs = seqm.read_manifest(manifest)
        out = Path(out_dir)

        def work(rec):
            rng = np.random.default_rng([policy.seed, derive_seed(0, rec.id)])
            w = augment.apply_policy(audio.canonicalize(audio.load_wav(rec.audio_path)), policy, rng)
            dest = out / "wav" / f"{_safe_name(rec.id)}.wav"
            audio.save_wav(w, dest)
            return dataclasses.replace(rec, audio_path=str(dest.resolve()))

        with ThreadPoolExecutor(max_workers=cfg.jobs) as pool:
            new = list(pool.map(work, recs))
        seqm.write_manifest(new, out / "manifest.tsv")
        click.echo(f"{len(new)} augmented utterances -> {out / 'manifest.tsv'}")
    except Exception as exc:  # noqa: BLE001
        _fail(exc)


@main.command()
@click.option("--manifest", "manifests", multiple=True, type=click.Path(exists=True, dir_okay=False),
              help="Emotion manifest(s); repeatable.")
@click.option("--gender-manifest", type=click.Path(exists=True, dir_okay=False), default=None)
@click.option("--phoneme-manifest", type=click.Path(exists=True, dir_okay=False), default=None)
@click.option("--lexicon", type=click.Choice(LEXICONS), default=None)
@click.option("--preset", type=click.Choice(PRESETS), default=None)
@click.option("--out", "out_dir", type=click.Path(file_okay=False), default=None)
@click.option("--steps", type=int, default=None)
@click.option("--lr", type=float, default=None)
@click.option("--batch-size", type=int, default=None)
@click.option("--finetune-steps", type=int, default=None)
@click.option("--checkpoint-every", type=int, default=None)
@click.option("--resume", type=click.Path(exists=True, dir_okay=False), default=None)
@click.pass_obj
def train(obj: Ctx, manifests, gender_manifest, phoneme_manifest, lexicon, preset, out_dir, steps, lr,
          batch_size, finetune_steps, checkpoint_every, resume) -> None:
    """Train the multitask model; writes metrics.jsonl, checkpoints and model.bin."""
    try:
        cfg = obj.config(**{
            "paths.manifests": list(manifests) or None, "paths.gender_manifest": gender_manifest,
            "paths.phoneme_manifest": phoneme_manifest, "paths.lexicon": lexicon,
            "paths.out_dir": out_dir, "preset": preset, "train.steps": steps, "train.lr": lr,
            "train.batch_size": batch_size, "train.finetune_steps": finetune_steps,
            "train.checkpoint_every": checkpoint_every,
        })
        if not cfg.paths.manifests:
            raise ConfigError("no emotion manifest given (--manifest or paths.manifests)")
        emotion = [r for m in cfg.paths.manifests for r in seqm.read_manifest(m) if r.split == "train"]
        gender = seqm.read_manifest(cfg.paths.gender_manifest) if cfg.paths.gender_manifest else None
        phoneme = seqm.read_manifest(cfg.paths.phoneme_manifest) if cfg.paths.phoneme_manifest else None
        lex = features.build_lexicon(cfg.paths.lexicon)
        tcfg = cfg.train_config()
        streams = trainer.build_streams(emotion, lex, gender, phoneme, keep_audio=tcfg.augment is not None)
        state = trainer.run_training(streams, cfg.model_config(lex.size), tcfg, cfg.paths.out_dir, resume)
        click.echo(f"trained {state.step} steps -> {Path(cfg.paths.out_dir) / 'model.bin'}")
    except Exception as exc:  # noqa: BLE001
        _fail(exc)


def _predict_records(checkpoint: str, recs) -> list[evalkit.Prediction]:
    model, _ = load_model(checkpoint)
    feats = [trainer.featurize_record(r)[0] for r in recs]
    return evalkit.infer_batch(model, feats)


@main.command("eval")
@click.option("--checkpoint", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--manifest", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--split", default="test", help="Split value to evaluate ('all' for every record).")
@click.option("--out", "out_dir", required=True, type=click.Path(file_okay=False))
@click.option("--format", "formats", multiple=True, type=click.Choice(["table", "delimited", "histogram"]),
              default=("table", "delimited", "histogram"))
@click.pass_obj
def eval_cmd(obj: Ctx, checkpoint, manifest, split, out_dir, formats) -> None:
    """Score a checkpoint on a manifest split (WA/UA/UAi/MSE)."""
    try:
        obj.config()
        recs = [r for r in seqm.read_manifest(manifest) if split == "all" or r.split == split]
        if not recs:
            raise evalkit.EvalError(f"no records with split {split!r}")
        preds = _predict_records(checkpoint, recs)
        report = evalkit.compute_metrics([(r.label, p) for r, p in zip(recs, preds)], fold=split)
        out = Path(out_dir)
        names = {"table": "report.txt", "delimited": "report.tsv", "histogram": "eis_hist.png"}
        for fmt in formats:
            evalkit.report_render([report], fmt, out / names[fmt])
        click.echo(evalkit.render_table([report]), nl=False)
    except Exception as exc:  # noqa: BLE001
        _fail(exc)


@main.command()
@click.option("--checkpoint", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--manifest", type=click.Path(exists=True, dir_okay=False), default=None)
@click.argument("wavs", nargs=-1, type=click.Path(exists=True, dir_okay=False))
@click.pass_obj
def infer(obj: Ctx, checkpoint, manifest, wavs) -> None:
    """Print ``id<TAB>category<TAB>eis`` per utterance."""
    try:
        obj.config()
        items = [(Path(w).stem, w) for w in wavs]
        if manifest:
            items += [(r.id, r.audio_path) for r in seqm.read_manifest(manifest)]
        if not items:
            raise ConfigError("nothing to infer: pass WAV files or --manifest")
        model, _ = load_model(checkpoint)
        feats = [features.mel_fbank(audio.canonicalize(audio.load_wav(p))).frames for _, p in items]
        for (uid, _), pred in zip(items, evalkit.infer_batch(model, feats)):
            click.echo(f"{uid}\t{pred.category.label}\t{pred.eis:.4f}")
    except Exception as exc:  # noqa: BLE001
        _fail(exc)


@main.command()
@click.option("--suite", type=click.Choice(["all", "ops", "losses", "model"]), default="all")
@click.pass_obj
def gradcheck(obj: Ctx, suite) -> None:
    """Finite-difference gradient checks; exits non-zero on any failure."""
    from . import gradsuite

    try:
        cfg = obj.config()
        seed = derive_seed(cfg.seed, "gradcheck") % 1000
        runs = {
            "ops": gradsuite.core_op_suite, "losses": gradsuite.loss_suite, "model": gradsuite.model_suite,
        }
        chosen = runs.values() if suite == "all" else [runs[suite]]
        reports = [r for fn in chosen for r in fn(seed)]
        for r in reports:
            click.echo(str(r))
        failed = [r for r in reports if not r.passed]
        click.echo(f"{len(reports) - len(failed)}/{len(reports)} passed")
        if failed:
            sys.exit(1)
    except SystemExit:
        raise
    except Exception as exc:  # noqa: BLE001
        _fail(exc)


if __name__ == "__main__":
    main()
