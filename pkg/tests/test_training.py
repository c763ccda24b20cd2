import numpy as np
import pytest
from scipy import stats

import adapterkit.autodiff as ad
import adapterkit.training as tr
from adapterkit.errors import GradientError, UnknownAdapterError
from adapterkit.manager import AdapterModel
from adapterkit.training import (Adam, ToyTask, TrainConfig, accuracy, evaluate,
                                 f1_score, generate_toy_task, run_training,
                                 spearman, toggle_parity_token)


def test_train_config_validation():
    assert TrainConfig(mode="adapter_only").resolved_learning_rate() == 1e-3
    assert TrainConfig(mode="full_finetune").resolved_learning_rate() == 1e-4
    assert TrainConfig(learning_rate=0.5).resolved_learning_rate() == 0.5
    with pytest.raises(ValueError):
        TrainConfig(mode="lora")
    with pytest.raises(ValueError):
        TrainConfig(learning_rate=-1e-3)
    with pytest.raises(ValueError):
        TrainConfig(batch_size=0)
    with pytest.raises(ValueError):
        TrainConfig(max_steps=0)


def test_adam_matches_reference_implementation():
    """Updates agree with an independently coded Adam over random gradients."""
    rng = np.random.default_rng(0)
    p = ad.tensor(rng.standard_normal((3, 4)), requires_grad=True)
    ref = p.data.copy()
    opt = Adam([p], lr=0.01, beta1=0.9, beta2=0.999, epsilon=1e-8)
    m = np.zeros_like(ref)
    v = np.zeros_like(ref)
    for t in range(1, 21):
        g = rng.standard_normal(ref.shape)
        opt.step({p: g})
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        ref = ref - 0.01 * (m / (1 - 0.9 ** t)) / (np.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
        assert np.allclose(p.data, ref, rtol=1e-12, atol=1e-15)


def test_adam_first_step_is_lr_sized():
    # bias correction makes the first update ~lr regardless of gradient scale
    for scale in (1e-4, 1.0, 1e6):
        p = ad.tensor(np.zeros(4), requires_grad=True)
        Adam([p], lr=0.01).step({p: np.full(4, scale)})
        assert np.allclose(p.data, -0.01, rtol=1e-3)


def test_adam_skips_missing_and_rejects_bad_shape():
    p = ad.tensor(np.ones(3), requires_grad=True)
    q = ad.tensor(np.ones(3), requires_grad=True)
    opt = Adam([p, q], lr=0.1)
    opt.step({p: np.ones(3)})
    assert not np.array_equal(p.data, np.ones(3))
    assert np.array_equal(q.data, np.ones(3))  # no gradient, no update
    with pytest.raises(GradientError):
        opt.step({p: np.ones(4)})


# -- synthetic tasks ---------------------------------------------------------


def test_unknown_task_rejected():
    with pytest.raises(ValueError):
        generate_toy_task("mystery", seed=0)
    with pytest.raises(ValueError):
        ToyTask("majority-token", seed=0, seq_len=7)
    with pytest.raises(ValueError):
        ToyTask("majority-token", seed=0, vocab_size=16)


def test_datasets_deterministic_balanced_disjoint():
    for name in tr.TASKS:
        task = generate_toy_task(name, seed=5)
        a = task.datasets(64, 32)
        b = task.datasets(64, 32)
        assert a == b
        train_s, train_l, dev_s, dev_l = a
        assert sum(train_l) == 32 and sum(dev_l) == 16  # exactly balanced
        assert not set(map(tuple, train_s)) & set(map(tuple, dev_s))
        for seq, label in zip(train_s + dev_s, list(train_l) + list(dev_l)):
            assert task.label_of(seq) == label
            assert all(0 <= t < task.vocab_size for t in seq)
            assert len(seq) == task.seq_len


def test_majority_task_construction():
    task = generate_toy_task("majority-token", seed=3)
    train_s, train_l, _, _ = task.datasets(64, 2)
    body = task.seq_len - 1
    for seq, label in zip(train_s, train_l):
        assert seq[0] == 0  # constant marker keeps position 0 uninformative
        counts = (seq.count(1), seq.count(2))
        winner = max(counts)
        assert winner >= int(np.ceil(0.7 * body))
        assert counts[0] + counts[1] == body
        assert label == int(counts[0] > counts[1])


def test_parity_flip_property():
    task = generate_toy_task("parity-of-token", seed=9)
    train_s, train_l, _, _ = task.datasets(64, 2)
    for seq, label in zip(train_s, train_l):
        assert 10 <= seq[0] < 26
        assert label == seq[0] % 2
        flipped = toggle_parity_token(seq)
        assert task.label_of(flipped) == 1 - label
        assert 10 <= flipped[0] < 26


def test_copy_task_first_token_carries_label():
    task = generate_toy_task("copy-first-label", seed=11)
    train_s, train_l, _, _ = task.datasets(32, 2)
    for seq, label in zip(train_s, train_l):
        assert seq[0] in (3, 4)
        assert label == (3, 4).index(seq[0])


# -- metrics -----------------------------------------------------------------


def test_accuracy_oracle():
    assert accuracy([1, 0, 1], [1, 0, 1]) == 1.0
    assert accuracy([1, 0, 1, 0], [1, 1, 0, 0]) == 0.5
    with pytest.raises(ValueError):
        accuracy([], [])
    with pytest.raises(ValueError):
        accuracy([1], [1, 0])


def test_f1_oracle():
    # tp=2 fp=1 fn=1 -> precision=recall=2/3 -> f1=2/3
    assert f1_score([1, 0, 1, 1], [1, 1, 0, 1]) == pytest.approx(2 / 3)
    assert f1_score([0, 0, 0], [1, 1, 0]) == 0.0  # no predicted positives
    assert f1_score([1, 1, 0], [0, 0, 0]) == 0.0  # no gold positives
    assert f1_score([0, 0], [0, 0]) == 0.0        # both empty: convention 0
    assert f1_score([1, 1], [1, 1]) == 1.0


def test_spearman_against_scipy():
    rng = np.random.default_rng(2)
    for trial in range(20):
        n = int(rng.integers(3, 30))
        a = rng.integers(0, 5, size=n).astype(float)  # repeated values force ties
        b = rng.integers(0, 5, size=n).astype(float)
        if len(set(a)) < 2 or len(set(b)) < 2:
            continue
        want = stats.spearmanr(a, b).statistic
        assert spearman(a, b) == pytest.approx(want, abs=1e-12)


def test_spearman_conventions():
    assert spearman([1, 2, 3], [10, 20, 30]) == 1.0  # monotone transform
    assert spearman([1, 2, 3], [3, 2, 1]) == -1.0
    assert spearman([1, 1, 1], [1, 2, 3]) == 0.0     # degenerate -> 0
    assert spearman([5], [7]) == 0.0
    with pytest.raises(ValueError):
        spearman([], [])


def test_evaluate_reports_all_metrics(tiny_model):
    tiny_model.add_head("cls", 2)
    head = tiny_model.get_head("cls")
    head.b.data = np.array([0.0, 1.0])  # always predict 1
    seqs = [[1], [2], [3], [4]]
    labels = [1, 1, 0, 0]
    metrics = evaluate(tiny_model, seqs, labels)
    assert metrics["accuracy"] == 0.5
    assert metrics["f1"] == pytest.approx(2 / 3)
    assert metrics["spearman"] == 0.0
    logits = tiny_model.batch_logits(seqs)
    assert metrics["loss"] == pytest.approx(float(ad.cross_entropy(logits, labels).data))
    with pytest.raises(ValueError):
        evaluate(tiny_model, [], [])


# -- training loop -----------------------------------------------------------


def _toy_model(config, seed=0, with_adapter=True):
    model = AdapterModel(config, seed=seed)
    model.add_head("cls", 2)
    if with_adapter:
        model.add_adapter("task", reduction_factor=2)
    return model


def _toy_data(n=32, seq_len=6, vocab=16, seed=0):
    rng = np.random.default_rng(seed)
    seqs = [[int(t) for t in rng.integers(0, vocab, size=seq_len)] for _ in range(n)]
    labels = [int(x) for x in rng.integers(0, 2, size=n)]
    return seqs, labels


def test_same_seed_gives_bitwise_identical_runs(tiny_config):
    seqs, labels = _toy_data()
    results = []
    digests = []
    for _ in range(2):
        model = _toy_model(tiny_config)
        cfg = TrainConfig(mode="adapter_only", seed=13, max_steps=25, batch_size=8)
        res = run_training(model, seqs, labels, cfg, adapter_name="task",
                           dev_sequences=seqs[:8], dev_labels=labels[:8])
        results.append(res)
        digests.append((model.digest_base(), model.digest_adapter("task")))
    assert results[0].losses == results[1].losses  # bitwise equal logs
    assert results[0].dev_metrics == results[1].dev_metrics
    assert digests[0] == digests[1]


def test_zero_learning_rate_changes_nothing(tiny_config):
    seqs, labels = _toy_data()
    model = _toy_model(tiny_config)
    before = (model.digest_base(), model.digest_adapter("task"))
    head_before = model.get_head("cls").w.data.copy()
    cfg = TrainConfig(mode="adapter_only", seed=1, learning_rate=0.0,
                      max_steps=10, batch_size=len(seqs))
    res = run_training(model, seqs, labels, cfg, adapter_name="task")
    assert (model.digest_base(), model.digest_adapter("task")) == before
    assert np.array_equal(model.get_head("cls").w.data, head_before)
    assert np.allclose(res.losses, res.losses[0], rtol=0, atol=1e-12)


def test_first_loss_is_untrained_loss(tiny_config):
    """The recorded loss at step 1 predates any update."""
    seqs, labels = _toy_data()
    frozen = run_training(_toy_model(tiny_config), seqs, labels,
                          TrainConfig(seed=4, learning_rate=0.0, max_steps=1,
                                      batch_size=8), adapter_name="task")
    live = run_training(_toy_model(tiny_config), seqs, labels,
                        TrainConfig(seed=4, max_steps=5, batch_size=8),
                        adapter_name="task")
    assert live.losses[0] == frozen.losses[0]


def test_adapter_only_requires_a_stack(tiny_config):
    seqs, labels = _toy_data()
    model = _toy_model(tiny_config, with_adapter=False)
    with pytest.raises(ValueError):
        run_training(model, seqs, labels, TrainConfig(max_steps=1))
    with pytest.raises(UnknownAdapterError):
        run_training(model, seqs, labels, TrainConfig(max_steps=1), adapter_name="ghost")
    with pytest.raises(ValueError):
        run_training(model, seqs[:3], labels[:2], TrainConfig(max_steps=1))


def test_adapter_only_leaves_base_untouched(tiny_config):
    seqs, labels = _toy_data()
    model = _toy_model(tiny_config)
    base_before = model.digest_base()
    adapter_before = model.digest_adapter("task")
    cfg = TrainConfig(mode="adapter_only", seed=2, max_steps=20, batch_size=8)
    run_training(model, seqs, labels, cfg, adapter_name="task")
    assert model.digest_base() == base_before
    assert model.digest_adapter("task") != adapter_before
    assert model.get_adapter("task").trained


def test_full_finetune_moves_base(tiny_config):
    seqs, labels = _toy_data()
    model = _toy_model(tiny_config)
    base_before = model.digest_base()
    adapter_before = model.digest_adapter("task")
    cfg = TrainConfig(mode="full_finetune", seed=2, max_steps=10, batch_size=8)
    run_training(model, seqs, labels, cfg)
    assert model.digest_base() != base_before
    assert model.digest_adapter("task") == adapter_before  # adapters stay frozen


def test_optimizer_tracks_only_adapter_and_head(tiny_config, monkeypatch):
    seqs, labels = _toy_data()
    model = _toy_model(tiny_config)
    captured = []

    class SpyAdam(Adam):
        def __init__(self, params, **kw):
            super().__init__(params, **kw)
            captured.extend(self.params)

    monkeypatch.setattr(tr, "Adam", SpyAdam)
    run_training(model, seqs, labels,
                 TrainConfig(mode="adapter_only", max_steps=1, batch_size=4),
                 adapter_name="task")
    owner_of = {id(t): owner for _, t, owner in model.named_parameters()}
    owners = {owner_of[id(t)] for t in captured}
    assert captured
    assert owners <= {"adapter", "head"}


def test_training_fits_copy_task(tiny_config):
    task = generate_toy_task("copy-first-label", seed=0, seq_len=6,
                             vocab_size=tiny_config.vocab_size)
    train_s, train_l, dev_s, dev_l = task.datasets(64, 16)
    model = _toy_model(tiny_config)
    cfg = TrainConfig(mode="adapter_only", seed=0, max_steps=120, batch_size=16)
    res = run_training(model, train_s, train_l, cfg, adapter_name="task",
                       dev_sequences=dev_s, dev_labels=dev_l)
    assert res.dev_metrics["accuracy"] > 0.9
    assert res.final_loss < res.losses[0]
    d = res.to_dict()
    assert d["mode"] == "adapter_only" and d["steps"] == 120
    assert d["dev"]["accuracy"] == res.dev_metrics["accuracy"]
