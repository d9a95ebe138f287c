import csv

import numpy as np
import pytest
import torch

from hgd import losses as L
from hgd import trainer as T
from hgd.config import ConfigError, RunConfig


def _step_once(cfg, corpus, steps=1):
    state = T.init_state(cfg)
    sampler = T.PairSampler(corpus, cfg.net.content_size)
    rows = [T.train_step(state, sampler.sample(state.rng, state.step)) for _ in range(steps)]
    return state, rows


def test_full_step_finite_and_complete(tiny_config, tiny_phantoms):
    _, corpus, _ = tiny_phantoms
    state, [row] = _step_once(tiny_config, corpus)
    assert set(T.LOG_COLUMNS) <= set(row)
    assert all(np.isfinite(row[k]) for k in T.LOG_COLUMNS)
    for name in ("pgd", "sgd", "ggd"):
        assert row[name] != 0.0
    assert all(torch.isfinite(p).all() for p in state.models.parameters())
    assert state.step == 1


def test_baseline_total_is_auxiliary_terms_only(tiny_config, tiny_phantoms):
    _, corpus, _ = tiny_phantoms
    a = tiny_config.train.ablation
    a.use_pgd = a.use_sgd = a.use_ggd = a.structural_slots = False
    state, [row] = _step_once(tiny_config, corpus)
    assert row["pgd"] == row["sgd"] == row["ggd"] == 0.0
    aux = row["adv_content"] + row["adv_domain"] + row["cycle"] + row["self_recon"]
    assert row["total"] == pytest.approx(aux, rel=1e-6)


def test_same_seed_same_first_loss(tiny_config, tiny_phantoms):
    _, corpus, _ = tiny_phantoms
    _, [a] = _step_once(tiny_config, corpus)
    _, [b] = _step_once(tiny_config, corpus)
    assert a == b


def _params_after_one_step(cfg, corpus):
    state, _ = _step_once(cfg, corpus)
    return torch.cat([p.detach().flatten() for p in state.models.parameters()])


@pytest.mark.parametrize("flag,weight", [("use_pgd", "lambda5"), ("use_sgd", "lambda6"), ("use_ggd", "lambda7")])
def test_disabled_flag_removes_gradient(tiny_config, tiny_phantoms, flag, weight):
    _, corpus, _ = tiny_phantoms
    off = RunConfig.from_dict(tiny_config.to_dict())
    setattr(off.train.ablation, flag, False)
    zero = RunConfig.from_dict(tiny_config.to_dict())
    setattr(zero.loss, weight, 0.0)
    if flag != "use_sgd":
        # keep the bank in play in both runs so only the loss term differs
        other = "use_ggd" if flag == "use_pgd" else "use_pgd"
        assert getattr(off.train.ablation, other)
    on = _params_after_one_step(tiny_config, corpus)
    p_off = _params_after_one_step(off, corpus)
    p_zero = _params_after_one_step(zero, corpus)
    assert torch.equal(p_off, p_zero)
    assert not torch.equal(p_off, on)


def test_hook_order(tiny_config, tiny_phantoms):
    _, corpus, _ = tiny_phantoms
    events = []

    def hook(event, state):
        events.append((event, state.step))
        if event == "bank_update":
            # the optimizer has already stepped when the bank moves
            assert events[-2] == ("optimizer_step", state.step)

    tiny_config.train.steps = 3
    T.fit(tiny_config, corpus, hooks=[hook])
    assert events == [(e, s) for s in range(3) for e in ("optimizer_step", "bank_update")]


def test_bank_changes_only_via_update(tiny_config, tiny_phantoms):
    _, corpus, _ = tiny_phantoms
    state = T.init_state(tiny_config)
    keys0 = state.bank.keys.clone()
    sampler = T.PairSampler(corpus, tiny_config.net.content_size)
    T.train_step(state, sampler.sample(state.rng, 0))
    assert not torch.equal(keys0, state.bank.keys)
    assert not state.bank.keys.requires_grad
    assert torch.allclose(state.bank.keys.norm(dim=-1), torch.ones(state.bank.num_slots), atol=1e-6)


def test_fit_logs_and_budget(tiny_config, tiny_phantoms, tmp_path):
    _, corpus, test = tiny_phantoms
    tiny_config.train.steps = 5
    tiny_config.train.checkpoint_every = 2
    tiny_config.train.eval_every = 5
    state, rows = T.fit(tiny_config, corpus, out_dir=tmp_path, test_corpus=test)
    assert state.step == 5 and len(rows) == 5
    with open(tmp_path / "train_log.csv") as fh:
        log = list(csv.reader(fh))
    assert log[0] == T.LOG_COLUMNS and len(log) == 6
    assert len([c for c in log[0] if c in L.TERM_WEIGHTS]) == 7
    assert (tmp_path / "ckpt_000002.npz").exists() and (tmp_path / "ckpt_000004.npz").exists()
    assert (tmp_path / "final.npz").exists() and (tmp_path / "config.json").exists()
    assert list((tmp_path / "eval_000005").glob("*.png"))


def test_resume_reproduces_trajectory(tiny_config, tiny_phantoms, tmp_path):
    _, corpus, _ = tiny_phantoms
    tiny_config.train.steps = 6
    _, straight = T.fit(tiny_config, corpus, out_dir=tmp_path / "a")
    tiny_config.train.steps = 3
    T.fit(tiny_config, corpus, out_dir=tmp_path / "b")
    resumed_cfg = RunConfig.from_dict(tiny_config.to_dict())
    resumed_cfg.train.steps = 6
    state = T.load_state(tmp_path / "b" / "final.npz")
    state.config.train.steps = 6
    T.save_state(state, tmp_path / "b" / "resume.npz")
    _, tail = T.fit(resumed_cfg, corpus, out_dir=tmp_path / "b", resume_from=tmp_path / "b" / "resume.npz")
    assert tail == straight[3:]
    assert (tmp_path / "a" / "train_log.csv").read_text() == (tmp_path / "b" / "train_log.csv").read_text()


def test_checkpoint_forward_bit_exact(tiny_config, tiny_phantoms, tmp_path):
    _, corpus, test = tiny_phantoms
    tiny_config.train.steps = 2
    state, _ = T.fit(tiny_config, corpus)
    T.save_state(state, tmp_path / "s.npz")
    again = T.load_state(tmp_path / "s.npz")
    img = test[0][0]
    assert np.array_equal(T.translate(state, img, 0, 1).pixels, T.translate(again, img, 0, 1).pixels)
    assert torch.equal(state.bank.values, again.bank.values)
    assert state.segmenters == again.segmenters
    T.save_state(again, tmp_path / "t.npz")
    assert (tmp_path / "s.npz").read_bytes() == (tmp_path / "t.npz").read_bytes()


def test_load_missing_checkpoint(tmp_path):
    with pytest.raises(FileNotFoundError):
        T.load_state(tmp_path / "none.npz")


def test_translate_contract(tiny_config, tiny_phantoms):
    _, corpus, test = tiny_phantoms
    state = T.init_state(tiny_config)
    img = test[0][0]
    out = T.translate(state, img, img.modality_id, 1 - img.modality_id)
    assert out.pixels.shape == img.pixels.shape
    assert out.pixels.min() >= -1 and out.pixels.max() <= 1
    assert np.array_equal(out.pixels, T.translate(state, img, img.modality_id, 1 - img.modality_id).pixels)
    with pytest.raises(ValueError):
        T.translate(state, img, 0, 5)
    tiny_config.train.test_attribute = "sample"
    sampled = T.translate(T.init_state(tiny_config), img, 0, 1)
    assert np.isfinite(sampled.pixels).all()


def test_non_finite_loss_aborts(tiny_config, tiny_phantoms, monkeypatch):
    _, corpus, _ = tiny_phantoms
    monkeypatch.setattr(L, "cycle_loss", lambda a, b: torch.tensor(float("nan"), requires_grad=True))
    state = T.init_state(tiny_config)
    sampler = T.PairSampler(corpus, tiny_config.net.content_size)
    with pytest.raises(T.NonFiniteLossError) as info:
        T.train_step(state, sampler.sample(state.rng, 0))
    assert "cycle" in info.value.breakdown


def test_pair_sampler_uses_two_subjects(tiny_phantoms):
    _, corpus, _ = tiny_phantoms
    sampler = T.PairSampler(corpus, 8)
    rng = np.random.default_rng(0)
    for step in range(20):
        b = sampler.sample(rng, step)
        assert b.modalities == (0, 1)
        assert b.labels_i.shape == (8, 8)
        assert not torch.equal(b.labels_i, b.labels_j) or not torch.equal(b.m_i, b.m_j)


def test_contrast_pool_is_reencoded_self_reconstruction(tiny_config, tiny_phantoms, monkeypatch):
    # the other subject enters every pool through the same encoder and the same
    # (generated) image type as the positive
    _, corpus, _ = tiny_phantoms
    state = T.init_state(tiny_config)
    batch = T.PairSampler(corpus, tiny_config.net.content_size).sample(state.rng, 0)
    fw = T.forward_pass(state, batch)
    seen = []
    monkeypatch.setattr(L, "ggd_loss", lambda a, p, pool, tau: seen.append((a, p, pool)) or a.sum() * 0)
    T.granularity_terms(state, batch, fw)
    mdl = state.models
    with torch.no_grad():
        ir = mdl.encode_content(fw["x_ii"], 0)[0]
        jr = mdl.encode_content(fw["x_jj"], 1)[0]
    (a1, p1, pool1), (a2, p2, pool2) = seen
    assert torch.equal(a1, fw["zc_i"][0]) and torch.equal(p1, fw["zc_ij"][0])
    assert len(pool1) == 1 and torch.allclose(pool1[0], jr, atol=1e-5)
    assert len(pool2) == 1 and torch.allclose(pool2[0], ir, atol=1e-5)


def test_config_validation():
    cfg = RunConfig()
    cfg.train.batch_size = 4
    with pytest.raises(ConfigError):
        T.init_state(cfg)
    with pytest.raises(ConfigError):
        RunConfig.from_dict({"train": {"bogus": 1}})
    with pytest.raises(ConfigError):
        RunConfig().with_overrides({"loss.nope": 1})
    assert RunConfig().with_overrides({"train.steps": 7}).train.steps == 7


def test_self_reconstruction_improves_after_200_steps(tmp_path):
    from hgd.data import load_corpus, make_phantom_corpus
    train, test = make_phantom_corpus(7, 8, 64, tmp_path)
    corpus, held_out = load_corpus(train), load_corpus(test)
    ratios = []
    for seed in range(3):
        cfg = RunConfig()
        cfg.train.seed = seed
        cfg.train.steps = 200
        before = T.self_reconstruction_l1(T.init_state(cfg), held_out)
        state, _ = T.fit(cfg, corpus)
        ratios.append(T.self_reconstruction_l1(state, held_out) / before)
    assert np.median(ratios) < 1.0
