import math

import numpy as np
import pytest

from mpt import tensor as T
from mpt.checkpoint import Checkpoint, average_checkpoints
from mpt.checks import tiny_batch, tiny_config
from mpt.errors import CheckpointError, ConfigurationError, ContractError, DivergedError
from mpt.model import MultiPassTransformer
from mpt.tasks import ToyTask, collate
from mpt.tensor import Tensor
from mpt.training import (
    Adam,
    TrainConfig,
    label_smoothed_ce,
    lr_schedule,
    pass_losses,
    smoothed_targets,
    train,
    train_step,
)


# -- schedule -------------------------------------------------------------------

def test_schedule_fixed_points():
    cfg = TrainConfig(base_lr=0.0008, warmup_steps=200)
    assert lr_schedule(200, cfg) == pytest.approx(0.0008)
    assert lr_schedule(800, cfg) == pytest.approx(0.0004)
    assert lr_schedule(100, cfg) == pytest.approx(0.0004)
    with pytest.raises(ContractError):
        lr_schedule(0, cfg)


def test_schedule_shape():
    cfg = TrainConfig(warmup_steps=50)
    lrs = [lr_schedule(s, cfg) for s in range(1, 300)]
    peak = int(np.argmax(lrs)) + 1
    assert peak == 50
    assert all(a < b for a, b in zip(lrs[:49], lrs[1:50]))
    assert all(a > b for a, b in zip(lrs[49:], lrs[50:]))


def test_train_config_validation():
    with pytest.raises(ConfigurationError):
        TrainConfig(label_smoothing=1.0)
    with pytest.raises(ConfigurationError):
        TrainConfig(warmup_steps=0)


# -- loss -----------------------------------------------------------------------

def test_smoothed_targets_two_classes():
    np.testing.assert_allclose(smoothed_targets(np.array([1]), 2, 0.1, pad_id=-1), [[0.1, 0.9]])
    np.testing.assert_allclose(smoothed_targets(np.array([0]), 2, 0.1, pad_id=-1), [[0.9, 0.1]])


def test_zero_smoothing_is_plain_cross_entropy():
    rng = np.random.default_rng(0)
    logits = rng.normal(size=(4, 6))
    targets = np.array([3, 5, 4, 0])
    got = label_smoothed_ce(Tensor(logits), targets, eps=0.0).item()
    logp = logits - np.log(np.exp(logits).sum(axis=1, keepdims=True))
    expect = -np.mean([logp[i, targets[i]] for i in range(3)])
    assert got == pytest.approx(expect, abs=1e-12)


@pytest.mark.parametrize("eps", [0.0, 0.1, 0.5])
def test_uniform_logits_give_log_v(eps):
    loss = label_smoothed_ce(Tensor(np.zeros((3, 7))), np.array([3, 4, 5]), eps).item()
    assert loss == pytest.approx(math.log(7), abs=1e-12)


def test_all_pad_targets_rejected():
    with pytest.raises(ContractError):
        label_smoothed_ce(Tensor(np.zeros((2, 5))), np.array([0, 0]))


def test_loss_gradcheck():
    logits = Tensor(np.random.default_rng(1).normal(size=(2, 3, 6)), requires_grad=True)
    targets = np.array([[3, 4, 0], [5, 1, 2]])
    rep = T.gradcheck(lambda: label_smoothed_ce(logits, targets, 0.1), [logits], tol=1e-6)
    assert rep.passed, rep.lines()


def test_sum_mode_at_least_final_mode():
    cfg = tiny_config("hard", "a")
    m = MultiPassTransformer(cfg, seed=3)
    batch = tiny_batch(cfg)
    final, pf = pass_losses(m, batch, "final", 0.1, training=False)
    total, ps = pass_losses(m, batch, "sum", 0.1, training=False)
    assert set(pf) == {1} and set(ps) == {0, 1}
    assert total.item() >= final.item()
    assert total.item() == pytest.approx(ps[0] + ps[1])


def test_random_mode_draws_from_stream():
    cfg = tiny_config("hard", "a")
    m = MultiPassTransformer(cfg, seed=3)
    batch = tiny_batch(cfg)
    picks = [list(pass_losses(m, batch, "random", 0.1, rng=np.random.default_rng(s), training=False)[1])[0]
             for s in range(12)]
    assert set(picks) == {0, 1}
    again = [list(pass_losses(m, batch, "random", 0.1, rng=np.random.default_rng(s), training=False)[1])[0]
             for s in range(12)]
    assert picks == again


def test_single_pass_has_no_phantom_gradients():
    cfg = tiny_config("none", "a")
    m = MultiPassTransformer(cfg)
    total, _ = pass_losses(m, tiny_batch(cfg), "final", 0.1, training=False)
    total.backward()
    assert m.params.connection_logits is None
    assert all(t.grad is not None for t in m.named_parameters().values())


# -- optimizer and steps ----------------------------------------------------------

def test_adam_zero_gradient_leaves_params():
    p = Tensor(np.array([1.0, -2.0]), requires_grad=True)
    opt = Adam({"p": p})
    for _ in range(5):
        p.grad = np.zeros(2)
        opt.step(0.1)
    np.testing.assert_array_equal(p.data, [1.0, -2.0])


def test_adam_first_step_moves_by_lr():
    p = Tensor(np.array([1.0, -2.0]), requires_grad=True)
    opt = Adam({"p": p})
    p.grad = np.array([3.0, -0.5])
    opt.step(0.01)
    np.testing.assert_allclose(p.data, [0.99, -1.99], atol=1e-9)


def test_train_step_is_deterministic():
    losses = []
    for _ in range(2):
        cfg = tiny_config("soft", "b", dropout=0.1)
        m = MultiPassTransformer(cfg, seed=1)
        opt = Adam(m.named_parameters())
        r = train_step(m, tiny_batch(cfg), opt, TrainConfig(), 1, "sum", np.random.default_rng(5))
        losses.append((r.loss, m.params.encoder[0].attn.wq.data.tobytes()))
    assert losses[0] == losses[1]


def test_diverged_step_raises_with_step():
    cfg = tiny_config("hard", "a")
    m = MultiPassTransformer(cfg)
    m.params.embedding.tokens.data[...] = np.nan
    with pytest.raises(DivergedError) as err:
        train_step(m, tiny_batch(cfg), Adam(m.named_parameters()), TrainConfig(), 7)
    assert err.value.step == 7


def test_accumulation_matches_concatenated_batch_gradient():
    cfg = tiny_config("hard", "a")
    task = ToyTask("copy", vocab_size=11, min_len=4, max_len=4)
    rng = np.random.default_rng(0)
    pairs = [(s, s) for s in (task.sample(rng, 4) for _ in range(4))]
    grads = []
    for batches in ([collate(pairs)], [collate(pairs[:2]), collate(pairs[2:])]):
        m = MultiPassTransformer(cfg, seed=2)
        opt = Adam(m.named_parameters())
        train_step(m, batches, opt, TrainConfig(), 1)
        grads.append(m.params.encoder[1].ffn.w1.grad.copy())
    # equal token counts per micro-batch make the averaged losses coincide
    np.testing.assert_allclose(grads[0], grads[1], rtol=1e-10, atol=1e-12)


def test_memorisation_loss_trends_down():
    cfg = tiny_config("hard", "a", d_model=16, d_ff=32)
    task = ToyTask("copy", vocab_size=11, min_len=3, max_len=5)
    rng = np.random.default_rng(0)
    batch = collate([(s, s) for s in (task.sample(rng, int(rng.integers(3, 6))) for _ in range(16))])
    m = MultiPassTransformer(cfg, seed=0)
    opt = Adam(m.named_parameters())
    tc = TrainConfig(warmup_steps=10, base_lr=0.003)
    losses = [train_step(m, batch, opt, tc, s).loss for s in range(1, 51)]
    avg = np.convolve(losses, np.ones(10) / 10, mode="valid")
    assert avg[-1] < avg[0]
    assert np.all(np.diff(avg[::10]) < 0)


# -- training loop and checkpoints --------------------------------------------------

def _small_run(tmp, seed=0):
    cfg = tiny_config("hard", "c", dropout=0.1)
    task = ToyTask("reverse", vocab_size=11, min_len=2, max_len=5, test_size=20)
    tc = TrainConfig(max_steps=6, checkpoint_every=2, tokens_per_batch=40, seed=seed, warmup_steps=4)
    m = MultiPassTransformer(cfg, seed=seed)
    return m, train(m, task, tc, out_dir=tmp)


def test_train_writes_identical_loss_csv(tmp_path):
    _small_run(tmp_path / "a")
    _small_run(tmp_path / "b")
    a = (tmp_path / "a" / "loss.csv").read_bytes()
    assert a == (tmp_path / "b" / "loss.csv").read_bytes()
    assert a.splitlines()[0] == b"step,lr,loss,loss_pass0,loss_pass1"
    assert sorted(p.name for p in (tmp_path / "a").glob("ckpt_*.bin")) == [
        "ckpt_000002.bin", "ckpt_000004.bin", "ckpt_000006.bin"]


def test_checkpoint_roundtrip(tmp_path):
    m, _ = _small_run(tmp_path)
    ck = Checkpoint.load(tmp_path / "ckpt_000006.bin")
    assert ck.step == 6
    for name, t in m.named_parameters().items():
        np.testing.assert_array_equal(ck.params[name], t.data)
    fresh = MultiPassTransformer(m.config, seed=99)
    fresh.load_state_dict(ck.params)
    np.testing.assert_array_equal(fresh.params.encoder[2].ffn.w2.data, m.params.encoder[2].ffn.w2.data)


def test_checkpoint_errors(tmp_path):
    with pytest.raises(CheckpointError):
        Checkpoint.load(tmp_path / "missing.bin")
    (tmp_path / "junk.bin").write_bytes(b"not a checkpoint")
    with pytest.raises(CheckpointError, match="magic"):
        Checkpoint.load(tmp_path / "junk.bin")


def test_average_examples():
    rng = np.random.default_rng(0)
    a = Checkpoint(3, {"w": rng.normal(size=(2, 3))})
    assert np.array_equal(average_checkpoints([a]).params["w"], a.params["w"])
    neg = Checkpoint(5, {"w": -a.params["w"]})
    avg = average_checkpoints([a, neg])
    assert avg.step == 5 and np.all(avg.params["w"] == 0)


def test_average_schema_mismatch_names_parameter():
    a = Checkpoint(1, {"w": np.zeros(2), "b": np.zeros(1)})
    with pytest.raises(CheckpointError, match="b"):
        average_checkpoints([a, Checkpoint(2, {"w": np.zeros(2)})])
    with pytest.raises(CheckpointError, match="w"):
        average_checkpoints([a, Checkpoint(2, {"w": np.zeros(3), "b": np.zeros(1)})])
