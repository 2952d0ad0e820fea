import csv
import math
import struct

import numpy as np
import pytest

from mssosn import autodiff as ad
from mssosn.checkpoint import MAGIC, read_records, write_records
from mssosn.config import TrainConfig, load_config, parse_config
from mssosn.data import load_dataset, sample_episode, split_dataset, synth_generate
from mssosn.errors import ContractError, FormatError, NumericError
from mssosn.model import MsSoSN, accuracy, total_loss
from mssosn.rng import SplitMix64
from mssosn.train import (METRICS_HEADER, Streams, confidence, evaluate, load_checkpoint, save_checkpoint,
                          train)

SMALL = dict(scales=[32, 16], way=5, shot=1, query=1, relation_channels=4, dd_channels=4,
             sd_hidden1=16, sd_hidden2=8, eval_query=2, log_interval=0)


@pytest.fixture(scope="module")
def synth32(tmp_path_factory):
    root = synth_generate(tmp_path_factory.mktemp("synth32"), 10, 6, 32, 7)
    return load_dataset(root)


def small_cfg(**kw):
    return TrainConfig(**{**SMALL, **kw})


def read_csv(path):
    with open(path) as fh:
        return list(csv.reader(fh))


# loss algebra --------------------------------------------------------------


def test_total_loss_reductions():
    cfg = TrainConfig()
    zero = TrainConfig(alpha=0.0, beta=0.0, gamma=0.0)
    assert total_loss(3.5, 2.0, 1.0, 4.0, zero) == 3.5
    assert total_loss(0.0, 0.0, 0.0, 0.0, cfg) == 0.0


def test_total_loss_worked_value():
    cfg = TrainConfig()
    expect = 6.25 + 0.001 * 2 + 0.1 * math.log(3) + 0.1 * math.log(5)
    got = total_loss(6.25, 2.0, math.log(3), math.log(5), cfg)
    assert got == pytest.approx(expect, abs=1e-15)
    assert got == pytest.approx(6.5228, abs=1e-4)
    as_tensor = total_loss(*(ad.Tensor(v) for v in (6.25, 2.0, math.log(3), math.log(5))), cfg)
    assert as_tensor.item() == pytest.approx(expect, abs=1e-15)


def test_confidence_examples():
    mean, half = confidence([0.6, 0.8])
    assert mean == pytest.approx(70.0)
    assert half == pytest.approx(100 * 1.96 * 0.1 / math.sqrt(2))
    assert round(half, 2) == 13.86
    assert confidence([1.0, 1.0, 1.0]) == (100.0, 0.0)


def test_accuracy_ties_lowest_index():
    scores = np.array([[0.5, 0.2], [0.5, 0.9]])
    assert accuracy(scores, [0, 1]) == 1.0
    assert accuracy(scores, [1, 1]) == 0.5


# config --------------------------------------------------------------------


def test_config_round_trip():
    cfg = TrainConfig(scales=[32, 16], crossref=True, lr=3e-4, dtype="float32")
    assert parse_config(cfg.to_text()) == cfg


def test_config_comments_and_errors(tmp_path):
    path = tmp_path / "a.cfg"
    path.write_text("# comment\nway = 3  # trailing\nscales = 64, 32\n")
    cfg = load_config(path)
    assert cfg.way == 3 and cfg.scales == [64, 32]
    with pytest.raises(FormatError):
        parse_config("wya = 3")
    with pytest.raises(FormatError):
        parse_config("way = three")
    with pytest.raises(ContractError):
        parse_config("way = 1")
    with pytest.raises(ContractError):
        parse_config("scales = 64, 16")
    with pytest.raises(ContractError):
        TrainConfig(alpha=-1.0)


# checkpoint format -----------------------------------------------------------


def test_checkpoint_layout(tmp_path):
    path = tmp_path / "c.msrn"
    write_records(path, {"ab": np.array([[1.5, 2.0]]), "s": np.array(3.0)})
    raw = path.read_bytes()
    assert raw[:4] == MAGIC and struct.unpack_from("<H", raw, 4) == (1,)
    # first record: name length, name, rank 2, dims (1, 2), two f64 values
    assert struct.unpack_from("<H2sBII2d", raw, 6) == (2, b"ab", 2, 1, 2, 1.5, 2.0)
    back = read_records(path)
    assert back["s"].shape == () and back["s"] == 3.0


def test_checkpoint_rejects_garbage(tmp_path):
    path = tmp_path / "c.msrn"
    path.write_bytes(b"NOPE")
    with pytest.raises(FormatError):
        read_records(path)
    write_records(path, {"w": np.zeros(4)})
    path.write_bytes(path.read_bytes()[:-3])
    with pytest.raises(FormatError):
        read_records(path)


def test_checkpoint_round_trip_bit_exact(tmp_path):
    cfg = small_cfg()
    model = MsSoSN(cfg, 3, SplitMix64(4))
    from mssosn.optim import AdamState
    state = AdamState(t=7, m={"selector.gain": np.array([0.25])}, v={"selector.gain": np.array([1e-9])})
    save_checkpoint(tmp_path / "c.msrn", model, state, 42)
    loaded, st, ep = load_checkpoint(tmp_path / "c.msrn")
    assert ep == 42 and st.t == 7 and loaded.cfg == cfg
    for name, p in model.params().items():
        assert np.array_equal(loaded.params()[name].data, p.data)
    assert np.array_equal(st.m["selector.gain"], [0.25])


def test_checkpoint_config_mismatch(tmp_path):
    from mssosn.checkpoint import CONFIG_RECORD, encode_text
    model = MsSoSN(small_cfg(), 3, SplitMix64(4))
    records = {CONFIG_RECORD: encode_text(small_cfg(relation_channels=6).to_text())}
    records.update({n: p.data for n, p in model.params().items()})
    write_records(tmp_path / "c.msrn", records)
    with pytest.raises(ContractError):
        load_checkpoint(tmp_path / "c.msrn")


# model and training ----------------------------------------------------------


def test_episode_components_recompose(synth32):
    cfg = small_cfg()
    model = MsSoSN(cfg, 3, SplitMix64(1))
    ep = sample_episode(split_dataset(synth32)["train"], SplitMix64(2), 5, 1, 1, cfg.scales)
    out = model.episode(ep)
    c = out.components()
    assert c["L_total"] == pytest.approx(total_loss(c["L_rel"], c["Omega"], c["L_sd"], c["L_dd"], cfg),
                                         abs=1e-10)
    assert out.gates_support.shape == (5, 2)


def test_shared_relation_parameters(synth32):
    cfg = small_cfg(crossref=True)
    model = MsSoSN(cfg, 3, SplitMix64(1))
    ep = sample_episode(split_dataset(synth32)["train"], SplitMix64(2), 5, 1, 1, cfg.scales)
    before = {n: p.data.copy() for n, p in model.relation.params().items()}
    out = model.episode(ep)
    assert set(out.scores) == {(1, 1), (1, 2), (2, 1), (2, 2)}
    assert all(np.array_equal(before[n], p.data) for n, p in model.relation.params().items())


def test_untrained_noise_chance_level(synth32):
    cfg = small_cfg(way=5, eval_query=2)
    model = MsSoSN(cfg, 3, SplitMix64(0))
    # a zeroed final layer scores every pair identically; tiny noise breaks the ties
    model.relation.fc2.weight.data[:] = SplitMix64(2).uniform(model.relation.fc2.weight.shape, -1e-9, 1e-9)
    test = split_dataset(synth32)["test"]
    mean, _ = evaluate(model, test, 40, SplitMix64(3))
    assert 5.0 <= mean <= 45.0


def test_train_smoke_ten_rows(synth32, tmp_path):
    cfg = small_cfg(episodes=10)
    res = train(cfg, synth32, tmp_path)
    rows = read_csv(res.metrics_path)
    assert rows[0] == METRICS_HEADER and len(rows) == 11
    for r in rows[1:]:
        total, rel, sd, dd, om = (float(x) for x in r[1:6])
        assert total == pytest.approx(om * cfg.alpha + rel + cfg.beta * sd + cfg.gamma * dd, abs=1e-10)
    assert res.checkpoint_path.exists()
    assert f"seed{cfg.seed}" in res.metrics_path.name


def test_train_deterministic(synth32, tmp_path):
    cfg = small_cfg(episodes=4)
    a = read_csv(train(cfg, synth32, tmp_path / "a").metrics_path)
    b = read_csv(train(cfg, synth32, tmp_path / "b").metrics_path)
    assert a == b


def test_disabled_head_equals_zero_weight(synth32, tmp_path):
    off = read_csv(train(small_cfg(episodes=3, use_dd=False), synth32, tmp_path / "off").metrics_path)
    zero = read_csv(train(small_cfg(episodes=3, gamma=0.0), synth32, tmp_path / "zero").metrics_path)
    assert [r[1] for r in off[1:]] == [r[1] for r in zero[1:]]


def test_single_scale_without_heads_is_relation_only(synth32, tmp_path):
    cfg = small_cfg(scales=[32], alpha=0.0, beta=0.0, gamma=0.0, episodes=2)
    rows = read_csv(train(cfg, synth32, tmp_path).metrics_path)
    assert all(r[1] == r[2] for r in rows[1:])


def test_checkpoint_eval_bit_exact(synth32, tmp_path):
    cfg = small_cfg(episodes=3)
    res = train(cfg, synth32, tmp_path)
    test = split_dataset(synth32)["test"]
    before = evaluate(res.model, test, 5, Streams.from_seed(0).eval, return_all=True)
    model, _, _ = load_checkpoint(res.checkpoint_path)
    after = evaluate(model, test, 5, Streams.from_seed(0).eval, return_all=True)
    assert before == after


def test_threaded_eval_same_result(synth32, monkeypatch):
    model = MsSoSN(small_cfg(), 3, SplitMix64(5))
    test = split_dataset(synth32)["test"]
    seq = evaluate(model, test, 4, SplitMix64(6), return_all=True)
    monkeypatch.setenv("MSRN_THREADS", "2")
    par = evaluate(model, test, 4, SplitMix64(6), return_all=True)
    assert seq == par


def test_non_finite_loss_reports_episode(synth32, tmp_path, monkeypatch):
    import mssosn.model as model_mod

    real = model_mod.MsSoSN.episode
    calls = {"n": 0}

    def bad(self, ep, with_heads=True):
        calls["n"] += 1
        if calls["n"] == 2:
            raise NumericError("exp produced non-finite values")
        return real(self, ep, with_heads)

    monkeypatch.setattr(model_mod.MsSoSN, "episode", bad)
    with pytest.raises(NumericError, match="episode 2"):
        train(small_cfg(episodes=3), synth32, tmp_path)
