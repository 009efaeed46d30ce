import copy
import json
import math

import numpy as np
import pytest
import torch

from conftest import finite_difference_error, toy_cohort
from dacrl.checkpoint import load_arrays
from dacrl.data import ValidationError
from dacrl.encoder import EmbeddingConfig, cohort_tensors
from dacrl.nn_utils import param_hash
from dacrl.pipeline import VARIANTS, embedding_for, prepare_synthetic
from dacrl.synthetic import SyntheticConfig
from dacrl.trainer import (
    ABLATIONS,
    DACModel,
    NumericalAbort,
    PretrainConfig,
    TrainConfig,
    actor_loss,
    critic_td_loss,
    mortality_loss,
    pretrain,
    reward_bundle,
    select,
    td_targets,
    train_dac,
    train_step,
)

EMB = EmbeddingConfig(k=4, V=4, n_variables=5)


@pytest.fixture(scope="module")
def tiny():
    ds = prepare_synthetic(SyntheticConfig(n_survivor=60, n_nonsurvivor=140, T=4, treatment_sd=1.0), V=5)
    emb = embedding_for(ds, 8)
    pre = pretrain(ds.train, emb, ds.n_actions, PretrainConfig(risk_epochs=1, clone_epochs=1, numerator_epochs=1, batch_size=64))
    return ds, emb, pre


def _model(n_actions=3, seed=0):
    torch.manual_seed(seed)
    return DACModel(EMB, n_actions)


# --- heads -------------------------------------------------------------------


def test_long_term_values_example():
    m = DACModel(EmbeddingConfig(k=2, V=4, n_variables=5), 2)
    with torch.no_grad():
        m.long_term.weight.copy_(torch.eye(2))
        m.long_term.bias.copy_(torch.tensor([0.5, -0.5]))
    v = m.long_term_values(torch.tensor([1.0, 2.0]))
    assert v.tolist() == [1.5, 1.5]
    with torch.no_grad():
        m.long_term.weight.zero_()
    assert m.long_term_values(torch.randn(3, 2)).tolist() == [[0.5, -0.5]] * 3


def test_select_uses_flat_action_coordinate():
    values = torch.arange(12.0).reshape(2, 2, 3)
    actions = torch.tensor([[0, 2], [1, 1]])
    assert select(values, actions).tolist() == [[0.0, 5.0], [7.0, 10.0]]


def test_actor_distribution_valid():
    m = _model(343)
    p = m.policy(torch.randn(50, 4) * 10)
    assert torch.allclose(p.sum(-1), torch.ones(50), atol=1e-6)
    assert (p > 0).all()
    pm = m.mortality_probs(torch.randn(5, 4))
    assert ((pm > 0) & (pm < 1)).all()


# --- critic ------------------------------------------------------------------


def _td_fixture(gamma):
    m = _model(2)
    with torch.no_grad():
        m.target_long_term.weight.zero_()
        m.target_long_term.bias.copy_(torch.tensor([1.0, 3.0]))
    states = torch.randn(1, 2, 4)
    rewards = torch.tensor([[0.0, 15.0]])
    mask = torch.ones(1, 2, dtype=torch.bool)
    return m, states, rewards, mask


def test_td_two_step_example():
    m, s, r, mask = _td_fixture(0.9)
    z = td_targets(m, s, r, mask, 0.9)
    assert z[0, 0].item() == pytest.approx(2.7)
    assert z[0, 1].item() == 15.0


def test_td_myopic_and_terminal_only():
    m, s, r, mask = _td_fixture(0.0)
    assert td_targets(m, s, r, mask, 0.0).tolist() == r.tolist()
    single = td_targets(m, s[:, :1], torch.tensor([[15.0]]), mask[:, :1], 0.99)
    assert single.tolist() == [[15.0]]
    a = torch.tensor([[1]])
    pred = select(m.long_term_values(s[:, :1]), a)
    loss = critic_td_loss(m, s[:, :1], a, torch.tensor([[15.0]]), mask[:, :1], 0.99)
    assert loss.item() == pytest.approx((pred.item() - 15.0) ** 2, rel=1e-6)


def test_td_padding_does_not_bootstrap():
    m, s, _, _ = _td_fixture(0.9)
    mask = torch.tensor([[True, False]])
    z = td_targets(m, s, torch.tensor([[-15.0, 0.0]]), mask, 0.9)
    assert z[0, 0].item() == -15.0


def test_targets_ignore_online_updates_between_syncs():
    m, s, r, mask = _td_fixture(0.9)
    before = td_targets(m, s, r, mask, 0.9)
    with torch.no_grad():
        m.long_term.weight.add_(1.0)
    assert torch.equal(td_targets(m, s, r, mask, 0.9), before)
    m.sync_target()
    assert not torch.equal(td_targets(m, s, r, mask, 0.9), before)


def test_critic_gradient_only_through_online_head(float64):
    m = _model(3)
    c = toy_cohort(N=2, T=3)
    batch = cohort_tensors(c)
    rewards = torch.as_tensor(np.where(c.step_mask, 1.0, 0.0))

    def loss():
        return critic_td_loss(m, m.states(batch), batch["actions"], rewards, batch["step_mask"], 0.9)

    assert finite_difference_error(loss, [m.long_term.weight, m.long_term.bias]) <= 1e-4
    loss().backward()
    assert m.target_long_term.weight.grad is None


# --- mortality head ----------------------------------------------------------


def test_mortality_loss_closed_forms():
    m = _model(2)
    s = torch.randn(2, 1, 4)
    a = torch.tensor([[0], [1]])
    mask = torch.ones(2, 1, dtype=torch.bool)
    with torch.no_grad():
        m.mortality.weight.zero_()
        m.mortality.bias.zero_()
    assert mortality_loss(m, s, a, torch.tensor([0.0, 1.0]), mask).item() == pytest.approx(math.log(2))
    with torch.no_grad():
        m.mortality.bias.copy_(torch.tensor([-1e3, 1e3]))
    assert mortality_loss(m, s, a, torch.tensor([0.0, 1.0]), mask).item() == 0.0


def test_mortality_gradient(float64):
    m = _model(3)
    batch = cohort_tensors(toy_cohort(N=3, T=3))
    loss = lambda: mortality_loss(m, m.states(batch), batch["actions"], batch["outcome"], batch["step_mask"])
    assert finite_difference_error(loss, m.parameters()) <= 1e-4


# --- actor -------------------------------------------------------------------


def test_actor_gradient_two_states_three_actions(float64):
    m = _model(3)
    s = torch.randn(2, 1, 4)
    a = torch.tensor([[2], [0]])
    q = torch.tensor([[1.5], [-0.7]])
    mask = torch.ones(2, 1, dtype=torch.bool)
    err = finite_difference_error(lambda: actor_loss(m, s, a, q, mask), [m.actor.weight, m.actor.bias])
    assert err <= 1e-4


def test_zero_q_leaves_actor_unchanged():
    m = _model(3)
    s = torch.randn(4, 2, 4)
    a = torch.randint(0, 3, (4, 2))
    loss = actor_loss(m, s, a, torch.zeros(4, 2), torch.ones(4, 2, dtype=torch.bool))
    g = torch.autograd.grad(loss, [m.actor.weight, m.actor.bias])
    assert all(torch.count_nonzero(x) == 0 for x in g)


def test_q_is_not_differentiated():
    m = _model(3)
    s = torch.randn(2, 1, 4)
    q = torch.ones(2, 1, requires_grad=True)
    actor_loss(m, s, torch.tensor([[0], [1]]), q, torch.ones(2, 1, dtype=torch.bool)).backward()
    assert q.grad is None


def test_two_action_bandit_converges():
    m = _model(2)
    s = torch.zeros(2, 1, 4)
    a = torch.tensor([[0], [1]])
    q = torch.tensor([[1.0], [-1.0]])
    mask = torch.ones(2, 1, dtype=torch.bool)
    opt = torch.optim.SGD([m.actor.weight, m.actor.bias], lr=0.05)
    for _ in range(500):
        opt.zero_grad()
        actor_loss(m, s, a, q, mask).backward()
        opt.step()
    assert m.policy(torch.zeros(4))[0].item() >= 0.9


# --- configuration and variants ----------------------------------------------


def test_train_config_validation_and_ablations():
    for bad in ({"alpha": 1.5}, {"gamma": 0.0}, {"batch_size": 3}, {"no_short": True, "no_long": True}):
        with pytest.raises(ValidationError):
            TrainConfig(**bad)
    base = TrainConfig()
    assert (base.alpha, base.gamma, base.lr, base.batch_size, base.n_sync) == (0.1, 0.99, 1e-4, 256, 100)
    assert base.ablate("short").effective_alpha == 1.0
    assert base.ablate("long").effective_alpha == 0.0
    assert base.ablate("rsp").no_resample and base.ablate("dcf").no_iptw
    assert base.ablate("rsp", "dcf").effective_alpha == 0.1
    assert set(ABLATIONS) == {"rsp", "dcf", "short", "long"}
    assert list(VARIANTS) == ["DAC", "DAC-rsp", "DAC-dcf", "DAC-short", "DAC-long"]
    assert [len(v) for v in VARIANTS.values()] == [0, 1, 1, 1, 1]


def test_reward_bundle_weights_and_alpha():
    m = _model(3)
    s = torch.randn(2, 2, 4)
    a = torch.randint(0, 3, (2, 2))
    w = torch.rand(2, 2) + 0.5
    b = reward_bundle(m, s, a, w, 0.3)
    assert torch.allclose(b["q"], w * (0.3 * b["r_long"] + 0.7 * b["r_short"]))
    assert torch.equal(reward_bundle(m, s, a, w, 1.0)["q"], w * b["r_long"])


def test_plain_actor_critic_reduction():
    """no_iptw + no_resample + alpha 1: one step equals a hand-written actor-critic step."""
    cfg = TrainConfig(alpha=1.0, no_iptw=True, no_resample=True, lr=1e-2, gamma=0.9)
    c = toy_cohort(N=4, T=3)
    batch = cohort_tensors(c)
    rewards = torch.as_tensor(np.where(c.step_mask, 0.0, 0.0))
    rewards[0, 2] = 15.0
    ours, ref = _model(3), _model(3)
    train_step(ours, torch.optim.Adam([p for p in ours.parameters() if p.requires_grad], lr=cfg.lr), batch,
               torch.ones(4, 3), rewards, cfg)

    opt = torch.optim.Adam([p for p in ref.parameters() if p.requires_grad], lr=cfg.lr)
    s = ref.states(batch)
    mask = batch["step_mask"]
    a = batch["actions"]
    n = mask.sum().item()
    q = ref.long_term(s).gather(-1, a[..., None]).squeeze(-1).detach()
    logp = torch.log_softmax(ref.actor(s), -1).gather(-1, a[..., None]).squeeze(-1)
    actor = -(logp * q * mask).sum() / n
    z = torch.zeros_like(rewards)
    with torch.no_grad():
        boot = ref.target_long_term(s).max(-1).values
    for i in range(4):
        L = int(mask[i].sum())
        for t in range(L):
            z[i, t] = rewards[i, t] + (0.9 * boot[i, t + 1] if t + 1 < L else 0.0)
    pred = ref.long_term(s).gather(-1, a[..., None]).squeeze(-1)
    critic = (((pred - z) ** 2) * mask).sum() / n
    pm = torch.sigmoid(ref.mortality(s)).gather(-1, a[..., None]).squeeze(-1)
    y = batch["outcome"][:, None]
    mort = ((-(y * torch.log(pm) + (1 - y) * torch.log(1 - pm))) * mask).sum() / n
    opt.zero_grad()
    (actor + critic + mort).backward()
    opt.step()
    for (name, p), (_, r) in zip(ours.named_parameters(), ref.named_parameters()):
        assert torch.allclose(p, r, atol=1e-6), name


def test_non_finite_loss_aborts():
    m = _model(3)
    with torch.no_grad():
        m.actor.weight.fill_(float("nan"))
    c = toy_cohort()
    batch = cohort_tensors(c)
    with pytest.raises(NumericalAbort):
        train_step(m, torch.optim.Adam(m.parameters()), batch, torch.ones(6, 3), torch.zeros(6, 3), TrainConfig())


# --- the loop ----------------------------------------------------------------


def _cfg(**kw):
    return TrainConfig(epochs=2, batches_per_epoch=3, batch_size=32, lr=1e-3, **kw)


def test_train_dac_is_deterministic(tiny, tmp_path):
    ds, emb, pre = tiny
    val_pi0 = ds.true_behavior("validation")
    a = train_dac(ds.train, pre, _cfg(), emb, ds.n_actions, ds.validation, val_pi0, checkpoint_dir=tmp_path / "a")
    b = train_dac(ds.train, pre, _cfg(), emb, ds.n_actions, ds.validation, val_pi0, checkpoint_dir=tmp_path / "b")
    assert a.best.param_hash() == b.best.param_hash()
    for f in sorted((tmp_path / "a").iterdir()):
        assert f.read_bytes() == (tmp_path / "b" / f.name).read_bytes()
    assert [h["epoch"] for h in a.history] == [1, 2]
    assert all(np.isfinite(h["val_wis"]) for h in a.history)
    assert a.best.val_wis == max(h["val_wis"] for h in a.history)


def test_pretrained_components_stay_frozen(tiny):
    ds, emb, pre = tiny
    hashes = [param_hash(m) for m in (pre.risk.model, pre.numerator, pre.clone)]
    weights = pre.weights.copy()
    for name, abl in VARIANTS.items():
        train_dac(ds.train, pre, _cfg().ablate(*abl), emb, ds.n_actions)
    assert hashes == [param_hash(m) for m in (pre.risk.model, pre.numerator, pre.clone)]
    np.testing.assert_array_equal(weights, pre.weights)
    assert ((pre.weights >= 0.1) & (pre.weights <= 10)).all()


def test_resume_continues_epoch_counter(tiny, tmp_path):
    ds, emb, pre = tiny
    log = tmp_path / "log.jsonl"
    train_dac(ds.train, pre, _cfg(), emb, ds.n_actions, checkpoint_dir=tmp_path, log_path=log)
    arrays, meta = load_arrays(tmp_path / "dac_epoch001.npz")
    assert meta["epoch"] == 1 and meta["train_config"]["epochs"] == 2
    state = {k: torch.as_tensor(v) for k, v in arrays.items()}
    res = train_dac(ds.train, pre, _cfg().replace(epochs=3), emb, ds.n_actions, init_state=state, start_epoch=1)
    assert [h["epoch"] for h in res.history] == [2, 3]
    with pytest.raises(ValidationError):
        train_dac(ds.train, pre, _cfg(), emb, ds.n_actions, init_state=state, start_epoch=2)
    assert [json.loads(l)["epoch"] for l in log.read_text().splitlines()] == [1, 2]


def test_alpha_endpoints_equal_reward_ablations(tiny):
    ds, emb, pre = tiny
    base = TrainConfig(epochs=1, batches_per_epoch=2, batch_size=32)
    pairs = [(base.replace(alpha=0.0), base.ablate("long")), (base.replace(alpha=1.0), base.ablate("short"))]
    for a, b in pairs:
        ha = param_hash(train_dac(ds.train, pre, a, emb, ds.n_actions).best.model)
        hb = param_hash(train_dac(ds.train, pre, b, emb, ds.n_actions).best.model)
        assert ha == hb
