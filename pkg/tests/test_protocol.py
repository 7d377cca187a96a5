import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from config.experiment_config import MlpArch, SyntheticDataset, TrainingConfig
from core.architectures import build_active_model, centralized_model
from core.errors import AlignmentError, ConfigError, ProtocolError
from core.losses import cross_entropy_loss
from core.network import backward, forward
from core.optimizer import sgd_step
from core.parties import ActiveParty, BatchScheduler, build_parties
from core.protocol import (
    active_step,
    align_parties,
    align_records,
    evaluate,
    passive_forward,
    passive_update,
    predict,
    total_rounds,
    train,
)
from core.transport import BackwardGradient, FaultInjector, ForwardEmbedding, Transport
from data.data_loader import load_dataset, vertical_split
from security.boundary_validator import BoundaryValidator
from security.defenses import FedPassDefense, NoDefense


def _blobs(n=200, n_test=100, dims=8, seed=0, classes=2):
    return load_dataset(SyntheticDataset(n=n, n_test=n_test, dims=dims, classes=classes, blob_sep=10.0), seed)


def _system(K=2, defense=None, seed=0, arch=None):
    data = _blobs()
    passives, active = build_parties(vertical_split(data.train_x, K), data.train_y, data.classes,
                                     arch or MlpArch(layer_dims=[8, 4]), defense or NoDefense(), seed=seed)
    align_parties(passives, active)
    return data, passives, active


def _params(passives, active):
    out = []
    for net in [p.model for p in passives] + [active.model]:
        out.extend(value.copy() for _, _, value in net.parameters())
    return out


def test_align_records_examples():
    assert align_records([[1, 2, 3], [2, 3, 4]]) == [2, 3]
    assert align_records([[5, 1, 3], [3, 5], [1, 3, 5]]) == [3, 5]
    with pytest.raises(AlignmentError):
        align_records([[1, 2], [3, 4]])
    with pytest.raises(AlignmentError):
        align_records([[1, 1, 2], [1, 2]])


def test_align_parties_reorders_shards_consistently():
    data, passives, active = _system()
    passives[0].record_ids = [4, 2, 0] + list(range(5, len(data.train_y))) + [1, 3]
    passives[0].features = passives[0].features.copy()
    before = {rid: passives[0].features[i].copy() for i, rid in enumerate(passives[0].record_ids)}
    ordering = align_parties(passives, active)
    assert ordering == sorted(ordering)
    for i, rid in enumerate(ordering):
        assert_array_equal(passives[0].features[i], before[rid])


def test_transport_delivers_in_party_order():
    t = Transport(["passive_0", "passive_1"])
    t.send(ForwardEmbedding("passive_1", 0, (0,), np.ones((1, 2))))
    t.send(ForwardEmbedding("passive_0", 0, (0,), np.zeros((1, 2))))
    assert [m.party for m in t.collect_embeddings(0, timeout=0.0)] == ["passive_0", "passive_1"]
    t.send(BackwardGradient("passive_0", 0, np.ones((1, 2))))
    t.send(BackwardGradient("passive_1", 0, np.ones((1, 2))))
    assert t.receive_gradient("passive_1", 0, timeout=0.0).party == "passive_1"
    assert t.verify_log()


def test_transport_rejects_protocol_violations():
    t = Transport(["passive_0", "passive_1"])
    t.send(ForwardEmbedding("passive_0", 0, (0,), np.zeros((1, 2))))
    with pytest.raises(ProtocolError):
        t.send(ForwardEmbedding("passive_0", 0, (0,), np.zeros((1, 2))))
    with pytest.raises(ProtocolError):
        t.send(ForwardEmbedding("intruder", 0, (0,), np.zeros((1, 2))))
    with pytest.raises(ProtocolError):
        t.send(BackwardGradient("passive_0", 0, np.zeros((1, 2))))
    with pytest.raises(ProtocolError) as info:
        t.collect_embeddings(0, timeout=0.0)
    assert info.value.party == "passive_1" and info.value.round == 0


def test_fault_injection_reorders_inbox_without_changing_delivery():
    t = Transport(["passive_0", "passive_1", "passive_2"], FaultInjector(np.random.default_rng(1), reorder_prob=1.0))
    for pid in ["passive_0", "passive_1", "passive_2"]:
        t.send(ForwardEmbedding(pid, 3, (0,), np.zeros((1, 1))))
    assert [m.party for m in t.collect_embeddings(3, timeout=0.0)] == ["passive_0", "passive_1", "passive_2"]


def test_active_step_names_missing_party():
    _, passives, active = _system()
    msg = passive_forward(passives[0], [0, 1], round=0)
    with pytest.raises(ProtocolError) as info:
        active_step(active, [msg], lr=0.1)
    assert info.value.party == "passive_1"


def test_round_replay_is_rejected():
    _, passives, _ = _system()
    passive_forward(passives[0], [0, 1], round=0)
    with pytest.raises(ProtocolError):
        passive_forward(passives[0], [0, 1], round=0)
    with pytest.raises(ProtocolError):
        passive_update(passives[0], BackwardGradient("passive_0", 7, np.zeros((2, 4))), lr=0.1)


def test_zero_embedding_party_matches_single_party_step(rng):
    arch = MlpArch(layer_dims=[6, 4], active_hidden=[5])
    labels = np.array([0, 2, 1, 1, 0])
    one = ActiveParty(labels, build_active_model(arch, 3, np.random.default_rng(9)), ["passive_0"])
    two = ActiveParty(labels, build_active_model(arch, 3, np.random.default_rng(9)), ["passive_0", "passive_1"])
    H = rng.standard_normal((3, 4))
    batch = (0, 2, 4)
    loss_1, replies_1 = active_step(one, [ForwardEmbedding("passive_0", 0, batch, H)], lr=0.1)
    loss_2, replies_2 = active_step(two, [ForwardEmbedding("passive_0", 0, batch, H),
                                          ForwardEmbedding("passive_1", 0, batch, np.zeros_like(H))], lr=0.1)
    assert loss_1 == pytest.approx(loss_2, abs=1e-12)
    assert_array_equal(replies_2[0].grad, replies_2[1].grad)
    assert_allclose(replies_1[0].grad, replies_2[0].grad, atol=1e-12)


def test_single_party_run_matches_centralized_training():
    arch = MlpArch(layer_dims=[6, 4], active_hidden=[5])
    data = load_dataset(SyntheticDataset(n=96, n_test=10, dims=6, classes=3, blob_sep=3.0), seed=4)
    passives, active = build_parties([data.train_x], data.train_y, 3, arch, NoDefense(), seed=2)
    align_parties(passives, active)
    net, split = centralized_model(passives[0].model, active.model)

    config = TrainingConfig(epochs=5, batch_size=16, lr=0.1, weight_decay=1e-4, seed=5)
    train(config, passives, active)

    scheduler = BatchScheduler(len(data.train_y), config.batch_size, config.seed)
    for _, batch in scheduler.rounds(total_rounds(config, len(data.train_y))):
        trace = forward(net, data.train_x[batch])
        _, logit_grad = cross_entropy_loss(trace.output, data.train_y[batch])
        sgd_step(net, backward(net, trace, logit_grad), config.lr, config.weight_decay)

    bottom = list(passives[0].model.parameters())
    top = list(active.model.parameters())
    central = list(net.parameters())
    assert len(central) == len(bottom) + len(top)
    for (_, _, a), (i, _, b) in zip(bottom + top, central):
        assert np.max(np.abs(a - b)) < 1e-10
    assert split == len(passives[0].model.layers)


def test_zero_rounds_leave_parameters_unchanged():
    _, passives, active = _system()
    before = _params(passives, active)
    history = train(TrainingConfig(rounds=0, batch_size=16), passives, active)
    assert history.rounds == 0 and history.losses == []
    for a, b in zip(before, _params(passives, active)):
        assert_array_equal(a, b)


def test_training_is_deterministic_per_seed():
    config = TrainingConfig(epochs=2, batch_size=32, lr=0.05, seed=3)
    runs = []
    for _ in range(2):
        _, passives, active = _system(defense=FedPassDefense(N=2.0, sigma2=1.0), seed=11)
        history = train(config, passives, active)
        runs.append((history.losses, _params(passives, active)))
    assert runs[0][0] == runs[1][0]
    for a, b in zip(runs[0][1], runs[1][1]):
        assert_array_equal(a, b)


@pytest.mark.parametrize("flag", ["threaded_parties", "fault_injection"])
def test_concurrency_and_reordering_do_not_change_results(flag):
    base = TrainingConfig(epochs=2, batch_size=32, lr=0.05, seed=1)
    _, p_seq, a_seq = _system(K=3, seed=6)
    train(base, p_seq, a_seq)
    _, p_alt, a_alt = _system(K=3, seed=6)
    train(base.model_copy(update={flag: True}), p_alt, a_alt)
    for a, b in zip(_params(p_seq, a_seq), _params(p_alt, a_alt)):
        assert_array_equal(a, b)


def test_undefended_training_learns_separable_blobs():
    data, passives, active = _system()
    test_shards = vertical_split(data.test_x, 2)
    history = train(TrainingConfig(epochs=5, batch_size=32, lr=0.05, weight_decay=0.0), passives, active,
                    test=(test_shards, data.test_y))
    assert history.final_accuracy >= 0.95
    assert evaluate(passives, active, test_shards, data.test_y) >= 0.95


def test_fedpass_training_keeps_accuracy_on_separable_blobs():
    data, passives, active = _system(defense=FedPassDefense(N=2.0, sigma2=1.0))
    test_shards = vertical_split(data.test_x, 2)
    train(TrainingConfig(epochs=8, batch_size=32, lr=0.05, weight_decay=0.0), passives, active)
    assert evaluate(passives, active, test_shards, data.test_y) >= 0.9


def test_training_requires_aligned_parties_and_valid_batches():
    _, passives, active = _system()
    passives[1].features = passives[1].features[:-1]
    with pytest.raises(AlignmentError):
        train(TrainingConfig(epochs=1), passives, active)
    with pytest.raises(ConfigError):
        BatchScheduler(10, 11, seed=0)


def test_boundary_validator_flags_leaks():
    data, passives, active = _system(defense=FedPassDefense(N=2.0, sigma2=1.0))
    train(TrainingConfig(epochs=1, batch_size=32, lr=0.05), passives, active)
    assert BoundaryValidator.validate(passives, active)
    active.stash = {"shard": passives[0].features}
    passives[1].stash = [active.labels]
    found = BoundaryValidator.violations(passives, active)
    assert "active party holds raw features of passive_0" in found
    assert "passive_1 holds the labels" in found


def test_transport_drops_closed_rounds():
    t = Transport(["passive_0", "passive_1"])
    for rnd in range(5):
        for pid in t.party_ids:
            t.send(ForwardEmbedding(pid, rnd, (0,), np.zeros((1, 2))))
        t.collect_embeddings(rnd, timeout=0.0)
        assert t.open_rounds == [rnd]
        for pid in t.party_ids:
            t.send(BackwardGradient(pid, rnd, np.zeros((1, 2))))
            t.receive_gradient(pid, rnd, timeout=0.0)
        assert t.open_rounds == []
    assert (t.rounds_closed, t.messages) == (5, 20)
    assert t.verify_log()
    with pytest.raises(ProtocolError):
        t.send(ForwardEmbedding("passive_0", 2, (0,), np.zeros((1, 2))))
    t.send(ForwardEmbedding("passive_0", 5, (0,), np.zeros((1, 2))))
    assert not t.verify_log()


def test_training_leaves_no_open_rounds_behind():
    _, passives, active = _system()
    transport = Transport([p.id for p in passives])
    history = train(TrainingConfig(epochs=2, batch_size=32, lr=0.05), passives, active, transport=transport)
    assert transport.open_rounds == []
    assert transport.rounds_closed == history.rounds
    assert all(not box for box in transport.inboxes.values())


def test_evaluate_scores_perfect_constant_and_permuted_predictions(rng):
    data, passives, active = _system()
    shards = vertical_split(data.test_x, 2)
    assert evaluate(passives, active, shards, predict(passives, active, shards)) == 1.0

    perm = rng.permutation(len(data.test_y))
    assert evaluate(passives, active, [s[perm] for s in shards], data.test_y[perm]) == \
        evaluate(passives, active, shards, data.test_y)

    head = ActiveParty(np.zeros(1000, dtype=np.int64), build_active_model(MlpArch(layer_dims=[8, 4]), 10, rng),
                       [p.id for p in passives])
    last = head.model.layers[-1]
    last.params["weight"][...] = 0.0
    last.params["bias"][...] = np.eye(10)[3]
    wide = [rng.standard_normal((1000, s.shape[1])) for s in shards]
    labels = rng.integers(0, 10, size=1000)
    assert evaluate(passives, head, wide, labels) == pytest.approx(0.1, abs=0.03)


def test_full_batch_loss_decreases_over_the_first_rounds():
    decreasing = 0
    for seed in range(10):
        _, passives, active = _system(seed=seed)
        history = train(TrainingConfig(rounds=10, batch_size=200, lr=0.01, weight_decay=0.0, seed=seed),
                        passives, active)
        decreasing += all(b < a for a, b in zip(history.losses, history.losses[1:]))
    assert decreasing >= 9


def test_passive_forward_redraws_passports_between_rounds():
    _, passives, _ = _system(defense=FedPassDefense(N=2.0, sigma2=1.0))
    first = passive_forward(passives[0], [0, 1, 2], round=0)
    second = passive_forward(passives[0], [0, 1, 2], round=1)
    assert not np.array_equal(first.H, second.H)


def test_zero_gradient_update_leaves_parameters_unchanged():
    _, passives, active = _system(defense=FedPassDefense(N=2.0, sigma2=1.0))
    party = passives[0]
    before = [p.copy() for _, _, p in party.model.parameters()]
    msg = passive_forward(party, [0, 1, 2], round=0)
    passive_update(party, BackwardGradient(party.id, 0, np.zeros_like(msg.H)), lr=0.1, weight_decay=0.0)
    for a, (_, _, b) in zip(before, party.model.parameters()):
        assert_array_equal(a, b)


def test_default_training_with_a_wide_passport_range_keeps_accuracy():
    data = load_dataset(SyntheticDataset(n=600, n_test=300, dims=8, classes=3, blob_sep=10.0), seed=0)
    shards, test_shards = vertical_split(data.train_x, 2), vertical_split(data.test_x, 2)
    accuracy = {}
    for name, defense in (("none", NoDefense()), ("fedpass", FedPassDefense(N=50.0, sigma2=1.0))):
        passives, active = build_parties(shards, data.train_y, data.classes, MlpArch(layer_dims=[16, 8]), defense, seed=0)
        align_parties(passives, active)
        history = train(TrainingConfig(), passives, active)
        assert np.all(np.isfinite(history.losses))
        accuracy[name] = evaluate(passives, active, test_shards, data.test_y)
    assert accuracy["fedpass"] >= accuracy["none"] - 0.03
