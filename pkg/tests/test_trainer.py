import copy
import json

import numpy as np
import pytest

from hiercap.dataset import build_vocab, generate_dataset
from hiercap.model import Captioner, ConfigMismatchError, default_config
from hiercap.rwa import RegionWordAttention, RwaConfig
from hiercap.tensor import Tape, backward
from hiercap.trainer import (
    CURVE_HEADER,
    TrainConfig,
    benchmark_decoder,
    evaluate,
    measure_ie,
    rwa_accuracy,
    train_caption_phase1,
    train_caption_phase2,
    train_rwa,
    write_curve,
)


@pytest.fixture(scope="module")
def toy():
    samples = generate_dataset(100, 8)
    vocab = build_vocab(s.caption for s in generate_dataset(0, 200))
    return samples, vocab


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(epochs=-1)
    with pytest.raises(ValueError):
        TrainConfig(lr=0.0)
    with pytest.raises(ValueError, match="bogus"):
        TrainConfig.from_dict({"bogus": 1})
    assert TrainConfig.from_dict(TrainConfig(seed=4).to_dict()) == TrainConfig(seed=4)


# ---------------------------------------------------------------- rwa ----

@pytest.fixture(scope="module")
def rwa_run(toy):
    samples, vocab = toy
    cfg = TrainConfig(rwa_epochs=40, batch_size=4, seed=0)
    return train_rwa(samples[:4], vocab, cfg)


def test_rwa_overfits_four_scenes(toy, rwa_run):
    samples, vocab = toy
    rwa, rows = rwa_run
    assert rwa_accuracy(rwa, samples[:4], vocab) >= 0.95
    assert rows[-1]["ce_loss"] < rows[0]["ce_loss"]
    assert len(rows) == 40


def test_rwa_is_deterministic(toy, rwa_run):
    samples, vocab = toy
    _, rows = train_rwa(samples[:4], vocab, TrainConfig(rwa_epochs=40, batch_size=4, seed=0))
    assert rows[-1]["ce_loss"] == rwa_run[1][-1]["ce_loss"]


def test_rwa_empty_dataset(toy):
    with pytest.raises(ValueError):
        train_rwa([], toy[1], TrainConfig())


# ------------------------------------------------------------ phase 1 ----

@pytest.fixture(scope="module")
def phase1(toy):
    samples, vocab = toy
    cfg = TrainConfig(epochs=3, batch_size=4, seed=1)
    return train_caption_phase1(samples, vocab, cfg)


def test_curve_has_one_row_per_epoch(phase1, tmp_path):
    _, rows = phase1
    assert [r["epoch"] for r in rows] == [1, 2, 3]
    write_curve(tmp_path / "c.csv", rows)
    lines = (tmp_path / "c.csv").read_text().splitlines()
    assert lines[0].split(",") == list(CURVE_HEADER)
    assert len(lines) == 4


def test_phase1_is_deterministic(toy, phase1):
    samples, vocab = toy
    _, rows = train_caption_phase1(samples, vocab, TrainConfig(epochs=3, batch_size=4, seed=1))
    assert rows == phase1[1]


def test_phase1_vocab_mismatch(toy, phase1):
    samples, _ = toy
    other = build_vocab(["a green star"])
    with pytest.raises(ConfigMismatchError):
        train_caption_phase1(samples, other, TrainConfig(epochs=1), model=phase1[0])


def test_every_captioner_parameter_gets_gradient(toy):
    samples, vocab = toy
    model = Captioner(default_config(len(vocab)), vocab)
    with Tape():
        fm0 = model.encode(np.stack([s.image for s in samples[:2]]))
        loss = model.ce_loss(fm0, model.token_batch([s.caption for s in samples[:2]]))
        backward(loss)
    # the first gate GRU always starts from a zero state, so its recurrent weight sees no signal
    dead = {n for n, p in model.named_parameters() if p.grad is None or not np.any(p.grad != 0)}
    assert dead == {"decoder.layer0.gru.w_state"}


# ------------------------------------------------------------ phase 2 ----

def test_lambda_zero_equals_phase1_continuation(toy, phase1, rwa_run):
    samples, vocab = toy
    cfg = TrainConfig(epochs=2, batch_size=4, seed=5, lambda_ie=0.0)
    a, rows_a = train_caption_phase1(samples, vocab, cfg, model=copy.deepcopy(phase1[0]))
    b, rows_b = train_caption_phase2(copy.deepcopy(phase1[0]), rwa_run[0], samples, cfg, epochs=2)
    for (n, pa), (_, pb) in zip(a.named_parameters(), b.named_parameters()):
        assert np.array_equal(pa.data, pb.data), n
    assert [r["ce_loss"] for r in rows_a] == [r["ce_loss"] for r in rows_b]


def test_phase2_vocab_checks(toy, phase1):
    samples, vocab = toy
    wrong = RegionWordAttention(RwaConfig(vocab_size=len(vocab) + 1), np.random.default_rng(0))
    with pytest.raises(ConfigMismatchError):
        train_caption_phase2(phase1[0], wrong, samples, TrainConfig())
    ok = RegionWordAttention(RwaConfig(vocab_size=len(vocab)), np.random.default_rng(0))
    with pytest.raises(ConfigMismatchError):
        train_caption_phase2(phase1[0], ok, samples, TrainConfig(), rwa_vocab=build_vocab(["a red circle"]))


def test_measure_ie_is_a_mean_of_unit_terms(toy, phase1, rwa_run):
    samples, _ = toy
    v = measure_ie(phase1[0], rwa_run[0], samples, TrainConfig())
    assert 0.0 <= v <= 1.0


# --------------------------------------------------------- evaluation ----

def test_evaluate_report(toy, phase1):
    samples, _ = toy
    report, caps = evaluate(phase1[0], samples[:3])
    assert len(caps) == 3
    d = report.to_dict() if hasattr(report, "to_dict") else vars(report)
    for key in ("bleu1", "bleu4", "rouge_l", "cider"):
        assert key in d


def test_evaluate_empty_split(phase1):
    with pytest.raises(ValueError):
        evaluate(phase1[0], [])


def test_benchmark_fields(phase1, toy):
    model = phase1[0]
    fm0 = model.encode(toy[0][0].image[None]).data
    out = benchmark_decoder(model.decoder, fm0, T=16, reps=1)
    assert set(out) == {"T", "reps", "t_parallel_ms", "t_sequential_ms", "speedup", "parity_max_abs_diff"}
    assert out["parity_max_abs_diff"] <= 1e-6
    json.dumps(out)
