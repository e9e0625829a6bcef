import json

import numpy as np
import pytest
from click.testing import CliRunner

from speecheq import cli, features, seqm, trainer


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    res = CliRunner().invoke(cli.main, ["--seed", "2", "synth", str(root / "corp"), "--per-cell", "1",
                                        "--neutral", "3", "--duration", "0.4", "--test-fraction", "0.4"])
    assert res.exit_code == 0, res.output
    return root


def run(*args, env=None):
    return CliRunner().invoke(cli.main, [str(a) for a in args], env=env)


def error_record(res):
    assert res.exit_code == 1
    return json.loads(res.output.strip().splitlines()[-1])


def test_help_lists_every_config_key():
    res = run("--help")
    assert res.exit_code == 0
    for key in cli.config_keys():
        assert key in res.output
    for cmd in ("unify", "synth", "featurize", "augment", "train", "eval", "infer", "gradcheck"):
        assert cmd in res.output


def test_config_precedence(tmp_path):
    cfg = tmp_path / "c.yaml"
    cfg.write_text("seed: 5\ntrain:\n  lr: 0.01\n  batch_size: 8\n")
    rc = cli.load_run_config(str(cfg), {"train.lr": 0.5})
    assert rc.seed == 5
    t = rc.train_config()
    assert t.lr == 0.5 and t.batch_size == 8
    assert cli.load_run_config(None, {}).train_config().lr == 1e-4


def test_config_from_env(tmp_path, monkeypatch):
    cfg = tmp_path / "c.yaml"
    cfg.write_text("jobs: 3\n")
    monkeypatch.setenv(cli.CONFIG_ENV, str(cfg))
    assert cli.load_run_config(None, {}).jobs == 3


@pytest.mark.parametrize("text", ["bogus: 1\n", "train:\n  lr_typo: 1\n", "augment:\n  p_noise: 3\n",
                                  "preset: huge\n", "train:\n  seed: 1\n"])
def test_bad_config_rejected(tmp_path, text):
    cfg = tmp_path / "c.yaml"
    cfg.write_text(text)
    with pytest.raises(cli.ConfigError):
        cli.load_run_config(str(cfg), {})


def test_error_is_one_json_line(tmp_path):
    cfg = tmp_path / "c.yaml"
    cfg.write_text("bogus: 1\n")
    rec = error_record(run("--config", cfg, "synth", tmp_path / "x"))
    assert rec["status"] == "error" and rec["type"] == "ConfigError"


def test_seed_derivation_is_stable():
    assert cli.derive_seed(0, "trainer") == cli.derive_seed(0, "trainer")
    assert cli.derive_seed(0, "trainer") != cli.derive_seed(0, "augment")


def test_unify_with_folds(corpus, tmp_path):
    c = corpus / "corp"
    res = run("unify", "--dataset", c / "source.tsv", c / "scheme.yaml", "-o", tmp_path / "u" / "m.tsv",
              "--folds", "3")
    assert res.exit_code == 0, res.output
    recs = seqm.read_manifest(tmp_path / "u" / "m.tsv")
    assert len(recs) == 27 and all(r.id.startswith("synth/") for r in recs)
    assert {r.split for r in recs} == {"fold-0", "fold-1", "fold-2"}
    assert all((tmp_path / "u" / r.audio_path).exists() for r in recs)


def test_unify_collision(corpus, tmp_path):
    c = corpus / "corp"
    res = run("unify", "--dataset", c / "source.tsv", c / "scheme.yaml",
              "--dataset", c / "source.tsv", c / "scheme.yaml", "-o", tmp_path / "m.tsv")
    assert error_record(res)["type"] == "CollisionError"


def test_featurize(corpus, tmp_path):
    res = run("--jobs", "2", "featurize", corpus / "corp" / "manifest.tsv", tmp_path / "fb")
    assert res.exit_code == 0, res.output
    lines = (tmp_path / "fb" / "index.tsv").read_text().splitlines()
    assert len(lines) == 28
    uid, name, frames = lines[1].split("\t")
    assert features.read_feature_cache(tmp_path / "fb" / name).frames.shape == (int(frames), 80)


def test_augment_deterministic(corpus, tmp_path):
    cfg = tmp_path / "c.yaml"
    cfg.write_text("augment:\n  p_noise: 1.0\n  p_reverb: 1.0\n")
    man = corpus / "corp" / "manifest.tsv"
    for d in ("a", "b"):
        assert run("--config", cfg, "augment", man, tmp_path / d).exit_code == 0
    a = sorted((tmp_path / "a" / "wav").iterdir())
    assert len(a) == 27
    assert all(p.read_bytes() == (tmp_path / "b" / "wav" / p.name).read_bytes() for p in a)
    assert len(seqm.read_manifest(tmp_path / "a" / "manifest.tsv")) == 27


def test_train_eval_infer(corpus, tmp_path):
    man = corpus / "corp" / "manifest.tsv"
    out = tmp_path / "run"
    res = run("train", "--manifest", man, "--preset", "tiny", "--steps", "3", "--batch-size", "4",
              "--checkpoint-every", "2", "--out", out)
    assert res.exit_code == 0, res.output
    rows = trainer.read_metrics(out / "metrics.jsonl")
    assert [r["step"] for r in rows] == [0, 1, 2]

    res = run("eval", "--checkpoint", out / "model.bin", "--manifest", man, "--out", tmp_path / "ev")
    assert res.exit_code == 0, res.output
    assert "UAi" in res.output
    assert (tmp_path / "ev" / "eis_hist.png").exists()
    assert (tmp_path / "ev" / "report.tsv").read_text().startswith("fold\tn\tWA")

    res = run("infer", "--checkpoint", out / "model.bin", "--manifest", man)
    assert res.exit_code == 0, res.output
    lines = res.output.strip().splitlines()
    assert len(lines) == 27
    uid, cat, eis = lines[0].split("\t")
    assert cat in [c.label for c in seqm.EmotionCategory] and 0.0 <= float(eis) <= 4.0


def test_train_needs_manifest(tmp_path):
    rec = error_record(run("train", "--out", tmp_path / "r"))
    assert "manifest" in rec["message"]


def test_eval_empty_split(corpus, tmp_path):
    man = corpus / "corp" / "manifest.tsv"
    out = tmp_path / "run"
    assert run("train", "--manifest", man, "--preset", "tiny", "--steps", "1", "--batch-size", "2",
               "--out", out).exit_code == 0
    rec = error_record(run("eval", "--checkpoint", out / "model.bin", "--manifest", man, "--split", "dev",
                           "--out", tmp_path / "ev"))
    assert rec["type"] == "EvalError"


def test_gradcheck_losses():
    res = run("gradcheck", "--suite", "losses")
    assert res.exit_code == 0, res.output
    assert "8/8 passed" in res.output
    assert np.all(["PASS" in line for line in res.output.splitlines()[:-1]])
