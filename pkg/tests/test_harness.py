import numpy as np
import pytest

from hybridlab.config import preset
from hybridlab.harness import (
    AdamW,
    NeedleTask,
    TrainConfig,
    TrainingDiverged,
    clip_global_norm,
    copy_batch_fn,
    extract_needle_value,
    gen_copy_batch,
    gen_needle_batch,
    gen_needle_train_batch,
    load_token_file,
    positionwise_nll,
    train_model,
    trapezoid_lr,
)
from hybridlab.model import HybridModel
from hybridlab.tensor import ContractError, Tensor, named_rng


# ---------------------------------------------------------------------------
# schedule
# ---------------------------------------------------------------------------


def test_trapezoid_shape():
    cfg = TrainConfig(steps=100, lr=1.0)
    lrs = [trapezoid_lr(s, cfg) for s in range(100)]
    assert lrs[0] == pytest.approx(0.04)          # first warmup step is lr/warmup
    assert lrs[24] == pytest.approx(1.0)          # warmup tops out at lr
    assert lrs[25] == 1.0 and lrs[79] == 1.0      # plateau is exactly flat
    assert lrs[80] == pytest.approx(1.0)          # cooldown starts from the top
    assert lrs[99] == pytest.approx(0.05)         # last step is lr/cooldown
    assert min(lrs) > 0.0 and max(lrs) == 1.0


def test_trapezoid_slack_extends_plateau():
    cfg = TrainConfig(steps=100, lr=1.0, warmup_frac=0.1, stable_frac=0.2, cooldown_frac=0.1)
    lrs = [trapezoid_lr(s, cfg) for s in range(100)]
    # fractions sum to 0.4; everything between warmup and cooldown is flat
    assert all(v == 1.0 for v in lrs[10:90])


@pytest.mark.parametrize(
    "kwargs",
    [
        dict(warmup_frac=-0.1),
        dict(warmup_frac=0.5, stable_frac=0.4, cooldown_frac=0.2),
        dict(steps=0),
        dict(batch=0),
        dict(lr=-1e-3),
    ],
)
def test_train_config_validation(kwargs):
    with pytest.raises(ContractError):
        TrainConfig(**kwargs)


# ---------------------------------------------------------------------------
# copy task
# ---------------------------------------------------------------------------


def test_copy_batch_layout():
    rng = named_rng(0, "copy-test")
    tokens, mask = gen_copy_batch(rng, 4, vocab=16, seq_len=12)
    assert tokens.shape == (4, 12) and mask.shape == (4, 12)
    assert (tokens[:, 0] == 0).all()              # BOS
    assert (tokens[:, 6] == 1).all()              # SEP after the 5-token payload
    np.testing.assert_array_equal(tokens[:, 1:6], tokens[:, 7:])
    assert tokens[:, 1:6].min() >= 2 and tokens.max() < 16
    np.testing.assert_array_equal(mask[:, :7], 0.0)
    np.testing.assert_array_equal(mask[:, 7:], 1.0)


def test_copy_batch_determinism():
    a = gen_copy_batch(named_rng(3, "copy-test"), 8)
    b = gen_copy_batch(named_rng(3, "copy-test"), 8)
    np.testing.assert_array_equal(a[0], b[0])


def test_copy_batch_rejects_odd_length():
    with pytest.raises(ContractError):
        gen_copy_batch(named_rng(0, "x"), 2, seq_len=9)


# ---------------------------------------------------------------------------
# needle task
# ---------------------------------------------------------------------------


def test_needle_alphabets_are_disjoint():
    task = NeedleTask()
    assert task.filler_lo < task.key_lo < task.value_lo < task.vocab
    # ~11:1:1 split of the non-reserved range at the default vocab
    assert task.key_lo == 54 and task.value_lo == 59


def test_needle_extractor_oracle():
    task = NeedleTask(context_len=48)
    rng = named_rng(1, "needle-oracle")
    tokens, mask = gen_needle_train_batch(task, rng, 100)
    assert tokens.shape == (100, 48 + task.value_len)
    for row in range(100):
        prompt = tokens[row, : task.context_len]
        planted = tokens[row, task.context_len :]
        np.testing.assert_array_equal(extract_needle_value(task, prompt), planted)
    np.testing.assert_array_equal(mask[:, : task.context_len], 0.0)
    np.testing.assert_array_equal(mask[:, task.context_len :], 1.0)


def test_needle_eval_batch_is_deterministic():
    task = NeedleTask(context_len=32, depth_fraction=0.25)
    p1, v1, d1 = gen_needle_batch(task, 6)
    p2, v2, d2 = gen_needle_batch(task, 6)
    np.testing.assert_array_equal(p1, p2)
    np.testing.assert_array_equal(v1, v2)
    assert (d1 == 0.25).all()


@pytest.mark.parametrize("depth", [0.0, 0.5, 1.0])
def test_needle_depth_places_the_mark(depth):
    task = NeedleTask(context_len=40, depth_fraction=depth)
    prompts, values, _ = gen_needle_batch(task, 3)
    for row in range(3):
        np.testing.assert_array_equal(extract_needle_value(task, prompts[row]), values[row])
        assert prompts[row, task.needle_start()] == task.MARK


def test_needle_rejects_short_context():
    with pytest.raises(ContractError):
        NeedleTask(context_len=4)


# ---------------------------------------------------------------------------
# trainer
# ---------------------------------------------------------------------------


def _tiny_model():
    cfg, layout = preset("toy-inter")
    return HybridModel(cfg, layout, seed=0)


def test_train_lr_zero_leaves_params_unchanged():
    model = _tiny_model()
    before = {k: t.data.copy() for k, t in model.parameters().items()}
    result = train_model(model, copy_batch_fn(vocab=model.cfg.vocab, seq_len=16),
                         TrainConfig(steps=3, batch=2, lr=0.0))
    assert len(result.history) == 3
    for k, t in model.parameters().items():
        np.testing.assert_array_equal(t.data, before[k])


def test_train_records_schedule_and_finite_losses():
    model = _tiny_model()
    cfg = TrainConfig(steps=4, batch=2, lr=1e-3, seed=7)
    result = train_model(model, copy_batch_fn(vocab=model.cfg.vocab, seq_len=16), cfg)
    assert [s.step for s in result.history] == [0, 1, 2, 3]
    assert np.isfinite(result.losses).all()
    assert result.final_loss == result.history[-1].loss
    for s in result.history:
        assert s.lr == trapezoid_lr(s.step, cfg)
        assert s.grad_norm >= 0.0


def test_train_raises_on_planted_non_finite():
    model = _tiny_model()
    name = next(iter(model.parameters()))
    model.parameters()[name].data[0] = np.nan
    with pytest.raises(TrainingDiverged, match="step 0"):
        train_model(model, copy_batch_fn(vocab=model.cfg.vocab, seq_len=16),
                    TrainConfig(steps=2, batch=2, lr=1e-3))


# ---------------------------------------------------------------------------
# optimizer / clipping
# ---------------------------------------------------------------------------


def test_adamw_decays_matrices_only():
    mat = Tensor(np.ones((3, 3)), requires_grad=True)
    vec = Tensor(np.ones(3), requires_grad=True)
    mat.grad = np.zeros((3, 3))
    vec.grad = np.zeros(3)
    opt = AdamW({"w": mat, "b": vec}, weight_decay=0.1)
    opt.step(lr=0.5)
    np.testing.assert_array_equal(vec.data, np.ones(3))
    np.testing.assert_allclose(mat.data, np.full((3, 3), 1.0 - 0.5 * 0.1))


def test_clip_global_norm_scales_jointly():
    a = Tensor(np.zeros(2), requires_grad=True)
    b = Tensor(np.zeros(2), requires_grad=True)
    a.grad = np.array([3.0, 0.0])
    b.grad = np.array([0.0, 4.0])
    norm = clip_global_norm({"a": a, "b": b}, max_norm=1.0)
    assert norm == pytest.approx(5.0)
    joint = np.sqrt((a.grad ** 2).sum() + (b.grad ** 2).sum())
    assert joint == pytest.approx(1.0)
    np.testing.assert_allclose(a.grad, [0.6, 0.0])


def test_clip_global_norm_below_threshold_is_identity():
    a = Tensor(np.zeros(2), requires_grad=True)
    a.grad = np.array([0.3, 0.4])
    norm = clip_global_norm({"a": a}, max_norm=1.0)
    assert norm == pytest.approx(0.5)
    np.testing.assert_array_equal(a.grad, [0.3, 0.4])


# ---------------------------------------------------------------------------
# position-wise NLL / token files
# ---------------------------------------------------------------------------


def test_positionwise_nll_buckets_and_flags():
    model = _tiny_model()
    stream = named_rng(0, "nll-stream").integers(0, model.cfg.vocab, size=33)
    rows = positionwise_nll(model, stream, bucket=8, train_len=16)
    assert [r[0] for r in rows] == [0, 8, 16, 24]
    assert [r[2] for r in rows] == [False, False, True, True]
    # an untrained model sits near the uniform baseline ln(vocab)
    for _, nll, _ in rows:
        assert nll == pytest.approx(np.log(model.cfg.vocab), rel=0.35)


def test_positionwise_nll_rejects_bad_bucket():
    model = _tiny_model()
    with pytest.raises(ContractError):
        positionwise_nll(model, np.arange(10), bucket=0)


def test_load_token_file_ids_and_bytes(tmp_path):
    ids = tmp_path / "ids.txt"
    ids.write_text("5\n7\n\n11\n")
    np.testing.assert_array_equal(load_token_file(str(ids), "ids"), [5, 7, 11])
    raw = tmp_path / "raw.bin"
    raw.write_bytes(bytes([0, 255, 42]))
    np.testing.assert_array_equal(load_token_file(str(raw), "bytes"), [0, 255, 42])


def test_load_token_file_rejects_junk(tmp_path):
    bad = tmp_path / "bad.txt"
    bad.write_text("5\nnot-a-token\n")
    with pytest.raises(ValueError):
        load_token_file(str(bad), "ids")
    with pytest.raises(ContractError):
        load_token_file(str(bad), "words")
