import math

import numpy as np
import pytest
import torch

from oracles import naive_metrics
from speecheq import evalkit
from speecheq.evalkit import Prediction
from speecheq.model import ModelConfig, build_model
from speecheq.seqm import EmotionCategory as E, UnifiedLabel, UtteranceRecord


def pairs_from(gold, pred, eis=None):
    out = []
    for i, (g, p) in enumerate(zip(gold, pred)):
        ge, pe = (eis[i] if eis else (0.0, 0.0))
        out.append((UnifiedLabel(E(g), ge, ge < 0), Prediction(E(p), pe)))
    return out


def test_hand_counted_example():
    # 10 Anger items all right, 30 Sadness items half right
    gold = [4] * 10 + [6] * 30
    pred = [4] * 10 + [6] * 15 + [0] * 15
    r = evalkit.compute_metrics(pairs_from(gold, pred))
    assert r.ua == 0.75
    assert r.wa == 0.625
    assert r.recalls == {"Anger": 1.0, "Sadness": 0.5}


def test_against_naive_recount():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        n = int(rng.integers(1, 40))
        k = int(rng.integers(1, 10))
        classes = rng.choice(9, size=k, replace=False)
        gold = rng.choice(classes, size=n).tolist()
        pred = rng.integers(0, 9, size=n).tolist()
        r = evalkit.compute_metrics(pairs_from(gold, pred))
        wa, ua, uai = naive_metrics(gold, pred)
        assert math.isclose(r.wa, wa, abs_tol=1e-12)
        assert math.isclose(r.ua, ua, abs_tol=1e-12)
        assert (math.isnan(r.uai) and math.isnan(uai)) or math.isclose(r.uai, uai, abs_tol=1e-12)


def test_balanced_split_wa_equals_ua():
    gold = [c for c in range(9) for _ in range(4)]
    pred = [g if i % 4 else (g + 1) % 9 for i, g in enumerate(gold)]
    r = evalkit.compute_metrics(pairs_from(gold, pred))
    assert r.wa == r.ua


def test_mse_ignores_masked():
    p = pairs_from([1, 1, 1], [1, 1, 1], eis=[(2.0, 3.0), (-1.0, 0.0), (1.0, 1.0)])
    r = evalkit.compute_metrics(p)
    assert r.mse == 0.5 and r.n_eis == 2


def test_empty_is_error():
    with pytest.raises(evalkit.EvalError):
        evalkit.compute_metrics([])
    with pytest.raises(evalkit.EvalError):
        evalkit.render_table([])


def test_argmax_ties_go_low():
    assert evalkit.argmax_lowest([0.5, 2.0, 2.0, 1.0]) == 1


def test_greedy_decode():
    logits = torch.full((6, 4), -5.0)
    for t, k in enumerate([0, 0, 3, 0, 2, 3]):
        logits[t, k] = 5.0
    assert evalkit.greedy_ctc_decode(logits) == [0, 0, 2]


def test_inference_clips_intensity():
    m = build_model(ModelConfig.tiny(), 0)
    with torch.no_grad():
        m.eis_head.bias.fill_(9.0)
    p = evalkit.infer(m, np.random.default_rng(0).standard_normal((20, 80)).astype(np.float32))
    assert p.eis == 4.0 and isinstance(p.category, E)


def recs(counts):
    out = []
    for c, n in counts.items():
        for i in range(n):
            out.append(UtteranceRecord(f"{c}-{i}", "x.wav", "", "male", "train", UnifiedLabel(E(c), 0.0, False)))
    return out


def test_leave_one_fold_out_partitions():
    rs = recs({0: 10, 4: 7, 6: 5})
    folds = evalkit.kfold_split(rs, 5, seed=1)
    tests = [set(f.test) for f in folds]
    assert sum(len(t) for t in tests) == len(rs)
    assert set().union(*tests) == {r.id for r in rs}
    for f in folds:
        assert not set(f.train) & set(f.test)
        n0 = sum(1 for i in f.test if i.startswith("0-"))
        assert n0 == 2  # 10 neutral items spread evenly
    assert [f.test for f in evalkit.kfold_split(rs, 5, seed=1)] == [f.test for f in folds]


def test_random_ratio_folds():
    rs = recs({0: 20, 4: 10, 6: 15})
    folds = evalkit.kfold_split(rs, 3, mode="random-ratio", seed=2)
    for f in folds:
        assert len(f.test) == 9 and len(f.train) == 36
        assert sum(1 for i in f.test if i.startswith("0-")) == 4
    assert folds[0].test != folds[1].test


def test_fold_errors(caplog):
    with pytest.raises(evalkit.EvalError):
        evalkit.kfold_split(recs({0: 5}), 1)
    with pytest.raises(evalkit.EvalError):
        evalkit.kfold_split(recs({0: 5}), 2, mode="bootstrap")
    evalkit.kfold_split(recs({0: 5, 1: 2}), 3)
    assert "some folds will lack it" in caplog.text


def test_renderers(tmp_path):
    gold = [0, 2, 4, 6, 6]
    eis = [(0.0, 0.2), (1.5, 1.4), (2.5, 2.0), (3.5, 3.9), (-1.0, 1.0)]
    rep = evalkit.compute_metrics(pairs_from(gold, [0, 2, 4, 6, 0], eis), fold="f0")
    table = evalkit.render_table([rep, rep])
    assert table.splitlines()[0].split() == ["fold", "n", "WA", "UA", "UAi", "MSE"]
    assert "mean" in table
    tsv = evalkit.render_delimited([rep])
    assert tsv.splitlines()[1].split("\t")[:3] == ["f0", "5", "0.8000"]
    png = evalkit.report_render([rep], "histogram", tmp_path / "h.png")
    assert png.read_bytes()[:4] == b"\x89PNG"
    again = evalkit.report_render([rep], "histogram", tmp_path / "h2.png")
    assert png.read_bytes() == again.read_bytes()
    assert set(rep.eis_by_level) == {"Neutral", "Low", "Medium", "High"}
    with pytest.raises(evalkit.EvalError):
        evalkit.report_render([rep], "pdf", tmp_path / "x")
