"""Loss terms, schedules, pair sampling, and the training loop."""

import math

import numpy as np
import pytest

from streamfuse import training as tr
from streamfuse.autodiff import Tape, Tensor, backward, finite_difference
from streamfuse.data import synth_generate, split
from streamfuse.network import build, default_config
from streamfuse.training import (
    PairBatch,
    TRACE_COLUMNS,
    TrainConfig,
    TrainingError,
    desk_config,
    identity_loss,
    lr_at_epoch,
    sample_pair,
    siamese_loss,
    total_objective,
    trace_to_csv,
    train,
)


def test_siamese_same_identical_embeddings_is_zero():
    v = Tensor([0.3, -0.7, 1.1])
    w = Tensor([0.3, -0.7, 1.1])
    assert siamese_loss(v, w, same=True, m=4.0).item() == 0.0


def test_siamese_negative_beyond_margin_is_zero():
    # squared distance 9 >= margin 4 -> hinge saturates at zero
    v = Tensor([3.0, 0.0])
    w = Tensor([0.0, 0.0])
    assert siamese_loss(v, w, same=False, m=4.0).item() == 0.0


def test_siamese_negative_inside_margin():
    # squared distance 1, margin 4 -> loss 3, exact
    v = Tensor([1.0, 0.0])
    w = Tensor([0.0, 0.0])
    assert siamese_loss(v, w, same=False, m=4.0).item() == 3.0


def test_siamese_positive_is_squared_distance():
    v = Tensor([1.0, 2.0])
    w = Tensor([0.0, 0.0])
    assert siamese_loss(v, w, same=True, m=4.0).item() == 5.0


def test_identity_uniform_four_classes_is_ln4():
    loss = identity_loss(Tensor([0.0, 0.0, 0.0, 0.0]), label=2)
    assert abs(loss.item() - math.log(4.0)) < 1e-12


def test_identity_hand_derived_case():
    # logits [1,2,3], true label 2 -> 0.40760596
    loss = identity_loss(Tensor([1.0, 2.0, 3.0]), label=2)
    assert abs(loss.item() - 0.40760596) < 1e-6


def test_total_objective_is_plain_sum():
    rng = np.random.default_rng(0)
    v_i = Tensor(rng.normal(size=4))
    v_j = Tensor(rng.normal(size=4))
    li = Tensor(rng.normal(size=3))
    lj = Tensor(rng.normal(size=3))
    total = total_objective(v_i, v_j, False, (0, 2), li, lj, m=4.0).item()
    parts = (siamese_loss(v_i, v_j, False, 4.0).item()
             + identity_loss(li, 0).item() + identity_loss(lj, 2).item())
    assert abs(total - parts) < 1e-12


def test_saturated_hinge_gives_zero_gradient():
    v = Tensor([3.0, 0.0], requires_grad=True)
    w = Tensor([0.0, 0.0], requires_grad=True)
    with Tape() as tape:
        loss = siamese_loss(v, w, same=False, m=4.0)
    grads = backward(tape, loss)
    np.testing.assert_allclose(grads[v].data, [0.0, 0.0], atol=0)
    np.testing.assert_allclose(grads[w].data, [0.0, 0.0], atol=0)


def test_loss_gradients_match_finite_differences():
    rng = np.random.default_rng(1)
    base_i = rng.normal(size=4)
    base_j = rng.normal(size=4) + 0.5

    for same in (True, False):
        v_i = Tensor(base_i.copy(), requires_grad=True)
        v_j = Tensor(base_j.copy(), requires_grad=True)
        with Tape() as tape:
            loss = siamese_loss(v_i, v_j, same, m=4.0)
        grads = backward(tape, loss)

        def scalar(t):
            return siamese_loss(Tensor(t.data), Tensor(base_j), same, m=4.0).item()

        est = finite_difference(scalar, Tensor(base_i.copy()), eps=1e-5).data
        np.testing.assert_allclose(grads[v_i].data, est, atol=1e-7)

    logits = Tensor(rng.normal(size=5), requires_grad=True)
    with Tape() as tape:
        loss = identity_loss(logits, 3)
    grads = backward(tape, loss)
    est = finite_difference(lambda t: identity_loss(Tensor(t.data), 3).item(),
                            Tensor(logits.data.copy()), eps=1e-5).data
    np.testing.assert_allclose(grads[logits].data, est, atol=1e-7)


def test_train_config_defaults_follow_schedule():
    cfg = TrainConfig()
    assert cfg.epochs == 1200 and cfg.lr_decay_epoch == 800
    assert cfg.margin == 4.0 and cfg.lr == 2e-3
    desk = desk_config()
    assert desk.epochs == 300 and desk.lr_decay_epoch == 200


def test_lr_schedule_has_single_halving():
    cfg = desk_config()
    lrs = [lr_at_epoch(cfg, e) for e in range(1, cfg.epochs + 1)]
    assert lrs[0] == cfg.lr
    assert lrs[-1] == cfg.lr * cfg.lr_decay
    changes = sum(1 for a, b in zip(lrs, lrs[1:]) if a != b)
    assert changes == 1
    assert lr_at_epoch(cfg, cfg.lr_decay_epoch) == cfg.lr
    assert lr_at_epoch(cfg, cfg.lr_decay_epoch + 1) == cfg.lr * cfg.lr_decay


@pytest.mark.parametrize("bad", [
    dict(margin=0.0),
    dict(lr=0.0),
    dict(epochs=0),
    dict(train_seq_len=0),
    dict(lr_decay=0.0),
    dict(steps_per_epoch=0),
])
def test_train_config_validation(bad):
    with pytest.raises((TrainingError, ValueError)):
        TrainConfig(**bad)


def test_pair_batch_label_consistency_enforced():
    rng = np.random.default_rng(2)
    frames = rng.random(size=(2, 8, 8, 5))
    with pytest.raises((TrainingError, ValueError)):
        PairBatch(seq_a=frames, seq_b=frames, same_identity=True,
                  label_a=0, label_b=1)


def _sampling_tables(samples):
    train_ids = sorted({s.person_id for s in samples})
    label_of = {pid: i for i, pid in enumerate(train_ids)}
    by_id = {}
    for s in samples:
        by_id.setdefault(s.person_id, []).append(s)
    return train_ids, label_of, by_id


def test_sample_pair_camera_discipline():
    samples = synth_generate(6, cams=2, frames_per_seq=4, extent=12, seed=0)
    ids, label_of, by_id = _sampling_tables(samples)
    rng = np.random.default_rng(3)
    for _ in range(20):
        pos = sample_pair(rng, ids, label_of, by_id, positive=True)
        assert pos.same_identity and pos.label_a == pos.label_b
        neg = sample_pair(rng, ids, label_of, by_id, positive=False)
        assert not neg.same_identity and neg.label_a != neg.label_b


def test_sample_pair_deterministic():
    samples = synth_generate(5, cams=2, frames_per_seq=4, extent=12, seed=1)
    ids, label_of, by_id = _sampling_tables(samples)
    a = [sample_pair(np.random.default_rng(7), ids, label_of, by_id, p).label_a
         for p in (True, False, True)]
    b = [sample_pair(np.random.default_rng(7), ids, label_of, by_id, p).label_a
         for p in (True, False, True)]
    assert a == b


def _micro_setup(seed=0, ids=4):
    samples = synth_generate(ids, cams=2, frames_per_seq=5, extent=12, seed=seed)
    data = split(samples, seed=seed)
    cfg = default_config("baseline", conv_channels=(4, 6), kernel_size=3,
                         embedding_dim=6, rnn_hidden=5, fusion_layer=1)
    net = build(cfg, seed=seed)
    return net, data, samples


def test_train_runs_and_traces(capsys):
    net, data, _ = _micro_setup()
    cfg = desk_config(epochs=2, steps_per_epoch=3, train_seq_len=3, seed=0)
    trace = train(net, data, cfg)
    assert len(trace) == 2 * 3
    for row in trace:
        assert math.isfinite(row.total)
        assert row.total >= 0.0 or row.siamese >= 0.0
    assert [row.epoch for row in trace] == [1, 1, 1, 2, 2, 2]


def test_train_deterministic_across_runs():
    net_a, data, _ = _micro_setup(seed=2)
    net_b, _, _ = _micro_setup(seed=2)
    cfg = desk_config(epochs=2, steps_per_epoch=2, train_seq_len=3, seed=5)
    trace_a = train(net_a, data, cfg)
    trace_b = train(net_b, data, cfg)
    assert trace_to_csv(trace_a) == trace_to_csv(trace_b)
    for (na, ta), (nb, tb) in zip(net_a.parameters(), net_b.parameters()):
        assert na == nb
        assert np.array_equal(ta.data, tb.data)


def test_train_seed_changes_trajectory():
    net_a, data, _ = _micro_setup(seed=3)
    net_b, _, _ = _micro_setup(seed=3)
    trace_a = train(net_a, data, desk_config(epochs=1, steps_per_epoch=3,
                                             train_seq_len=3, seed=0))
    trace_b = train(net_b, data, desk_config(epochs=1, steps_per_epoch=3,
                                             train_seq_len=3, seed=1))
    assert trace_to_csv(trace_a) != trace_to_csv(trace_b)


def test_train_default_steps_equal_train_identities():
    net, data, _ = _micro_setup(seed=4, ids=4)
    cfg = desk_config(epochs=1, train_seq_len=3, seed=0)
    trace = train(net, data, cfg)
    assert len(trace) == len({s.person_id for s in data.train})


def test_train_rejects_underpopulated_dataset():
    net, data, samples = _micro_setup(seed=5)
    lone = [s for s in samples if s.person_id == samples[0].person_id]
    cfg = desk_config(epochs=1, seed=0)

    class Shim:
        train = lone
        test = lone

    with pytest.raises(TrainingError):
        train(net, Shim(), cfg)


def test_on_epoch_callback_stops_early():
    net, data, _ = _micro_setup(seed=6)
    cfg = desk_config(epochs=10, steps_per_epoch=1, train_seq_len=3, seed=0)
    seen = []

    def stop_after_two(epoch, net_, trace):
        seen.append(epoch)
        return epoch >= 2

    trace = train(net, data, cfg, on_epoch=stop_after_two)
    assert seen == [1, 2]
    assert len(trace) == 2


def test_trace_csv_layout():
    net, data, _ = _micro_setup(seed=7)
    cfg = desk_config(epochs=1, steps_per_epoch=2, train_seq_len=3, seed=0)
    text = trace_to_csv(train(net, data, cfg))
    lines = text.strip().split("\n")
    assert lines[0] == ",".join(TRACE_COLUMNS)
    assert len(lines) == 3
    assert lines[1].split(",")[0] == "1"
