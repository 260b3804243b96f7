import math
from pathlib import Path

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

import oracles
from mtb import io, pairgen
from mtb.evaluation import LabeledStatement
from mtb.objectives import ClassifierHead, mtb_loss
from mtb.tokens import build_vocab
from mtb.training import (
    TrainConfig,
    TrainingError,
    adam_step,
    batch_gradients,
    load_checkpoint,
    save_checkpoint,
    sgd_step,
    train,
)

# -------------------------------------------------------------- optimizers


def test_sgd_example():
    p = torch.tensor([1.0], dtype=torch.float64)
    sgd_step([p], [torch.tensor([2.0], dtype=torch.float64)], {}, 0.1)
    assert p.item() == pytest.approx(0.8, abs=1e-15)


@pytest.mark.parametrize("g", [0.003, 1.0, -250.0])
def test_adam_first_step_is_lr(g):
    p = torch.zeros(3, dtype=torch.float64)
    adam_step([p], [torch.full((3,), g, dtype=torch.float64)], {}, 0.01)
    assert torch.allclose(p.abs(), torch.full((3,), 0.01, dtype=torch.float64), rtol=1e-5)
    assert torch.all(torch.sign(p) == -math.copysign(1, g))


@settings(max_examples=30)
@given(seed=st.integers(0, 10**6), lr=st.floats(1e-4, 0.5), b1=st.floats(0.0, 0.99), b2=st.floats(0.5, 0.9999))
def test_adam_matches_scalar_oracle(seed, lr, b1, b2):
    rng = np.random.default_rng(seed)
    grads = rng.normal(size=100) * rng.uniform(0.01, 10)
    p = torch.tensor([0.3], dtype=torch.float64)
    state: dict = {}
    traj = []
    for g in grads:
        adam_step([p], [torch.tensor([g], dtype=torch.float64)], state, lr, b1, b2)
        traj.append(p.item())
    ref = oracles.adam_scalar(0.3, grads.tolist(), lr, b1, b2)
    assert np.max(np.abs(np.array(traj) - np.array(ref))) < 1e-12
    assert state["t"] == 100


def test_adam_skips_missing_grads():
    p, q = torch.ones(2), torch.ones(2)
    adam_step([p, q], [torch.ones(2), None], {}, 0.1)
    assert torch.equal(q, torch.ones(2)) and not torch.equal(p, torch.ones(2))


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(mode="pretrain")
    with pytest.raises(ValueError):
        TrainConfig(batch_size=0)
    with pytest.raises(ValueError):
        TrainConfig(lr=-1.0)
    with pytest.raises(ValueError):
        TrainConfig(optimizer="rmsprop")


def test_config_from_yaml(tmp_path):
    p = tmp_path / "c.yaml"
    p.write_text("lr: 0.01\nsteps: 7\nencoder:\n  hidden: 8\n")
    cfg = TrainConfig.from_file(p, steps=9)
    assert (cfg.lr, cfg.steps) == (0.01, 9)
    p.write_text("learning_rate: 0.01\n")
    with pytest.raises(ValueError, match="learning_rate"):
        TrainConfig.from_file(p)


# ------------------------------------------------------------------- loop


def _cfg(**kw):
    base = {"steps": 3, "batch_size": 8, "lr": 1e-3, "log_every": 1, "seed": 0}
    return TrainConfig(**{**base, **kw})


def test_lr_zero_leaves_parameters(synth_data):
    m = synth_data.encoder()
    before = {n: p.detach().clone() for n, p in m.named_parameters()}
    train(m, synth_data.pairs, _cfg(steps=1, lr=0.0))
    for n, p in m.named_parameters():
        assert torch.equal(p, before[n]), n


def test_lr_zero_sgd_and_supervised(synth_data):
    m = synth_data.encoder()
    labels = {r: i for i, r in enumerate(synth_data.relations)}
    head = ClassifierHead(len(labels), m.config.rep_dim)
    before = [p.detach().clone() for p in [*m.parameters(), *head.parameters()]]
    train(m, synth_data.labeled, _cfg(steps=1, lr=0.0, optimizer="sgd", mode="supervised_finetune"), head=head, label_ids=labels)
    assert all(torch.equal(a, b) for a, b in zip(before, [*m.parameters(), *head.parameters()]))


def test_same_seed_same_metrics(synth_data, tmp_path):
    runs = []
    for k in range(2):
        m = synth_data.encoder()
        train(m, synth_data.pairs, _cfg(steps=4), metrics_path=tmp_path / f"m{k}.jsonl")
        runs.append((tmp_path / f"m{k}.jsonl").read_bytes())
    assert runs[0] == runs[1]
    m = synth_data.encoder()
    train(m, synth_data.pairs, _cfg(steps=4, seed=1), metrics_path=tmp_path / "m2.jsonl")
    assert (tmp_path / "m2.jsonl").read_bytes() != runs[0]


def test_metrics_log_format(synth_data, tmp_path):
    train(synth_data.encoder(), synth_data.pairs, _cfg(steps=4, log_every=2), metrics_path=tmp_path / "m.jsonl")
    recs = [r for _, r in io.read_jsonl(tmp_path / "m.jsonl", "mtb.metrics")]
    assert [r["step"] for r in recs] == [1, 2, 4]
    assert {"loss", "lr", "mtb_loss", "mlm_loss"} <= set(recs[0])


def test_eval_callback_and_checkpoints(synth_data):
    seen = []
    res = train(
        synth_data.encoder(),
        synth_data.pairs,
        _cfg(steps=4, checkpoint_every=2, lambda_mlm=0.0),
        eval_fn=lambda m, h: {"probe": 1.0},
        eval_every=2,
        on_checkpoint=lambda step, m, h: seen.append(step),
    )
    assert seen == [2, 4]
    assert [r.get("probe") for r in res.metrics] == [None, 1.0, None, 1.0]
    assert "mlm_loss" not in res.metrics[0]


def test_alternating_schedule(synth_data):
    res = train(synth_data.encoder(), synth_data.pairs, _cfg(steps=2, mlm_schedule="alternating"))
    assert "mtb_loss" in res.metrics[0] and "mlm_loss" not in res.metrics[0]
    assert "mlm_loss" in res.metrics[1] and "mtb_loss" not in res.metrics[1]


def test_mode_data_mismatch(synth_data):
    m = synth_data.encoder()
    with pytest.raises(TrainingError, match="expects"):
        train(m, synth_data.labeled, _cfg())
    with pytest.raises(TrainingError, match="expects"):
        train(m, synth_data.pairs, _cfg(mode="supervised_finetune"))
    with pytest.raises(TrainingError, match="empty"):
        train(m, [], _cfg())
    with pytest.raises(TrainingError, match="head"):
        train(m, synth_data.labeled, _cfg(mode="supervised_finetune"))


def test_unknown_label_rejected(synth_data):
    m = synth_data.encoder()
    head = ClassifierHead(2, m.config.rep_dim)
    with pytest.raises(TrainingError, match="missing"):
        train(m, synth_data.labeled, _cfg(mode="supervised_finetune"), head=head, label_ids={"rel00": 0, "x": 1})


def test_nan_aborts_with_step(synth_data):
    m = synth_data.encoder()
    with torch.no_grad():
        m.post.weight.fill_(float("nan"))
    with pytest.raises(TrainingError, match="step 0"):
        train(m, synth_data.pairs, _cfg(lambda_mlm=0.0))
    m = synth_data.encoder()
    with torch.no_grad():
        m.tok.weight.fill_(float("inf"))
    with pytest.raises(TrainingError, match="at step 0"):
        train(m, synth_data.pairs, _cfg())


def test_diverging_sgd_reports_later_step(synth_data):
    m = synth_data.encoder(post_layer="linear_dense")
    with pytest.raises(TrainingError, match=r"at step [1-9]\d*"):
        train(m, synth_data.pairs, _cfg(steps=200, optimizer="sgd", lr=1e30, lambda_mlm=0.0))


def test_fewshot_finetune_runs(synth_data):
    res = train(synth_data.encoder(), synth_data.labeled, _cfg(mode="fewshot_finetune", batch_size=4, n_way=3))
    assert all(math.isfinite(r["loss"]) for r in res.metrics)
    assert "fewshot_loss" in res.metrics[0]


def test_epochs_set_step_count(synth_data):
    res = train(synth_data.encoder(), synth_data.pairs[:20], _cfg(epochs=2, batch_size=8))
    assert res.steps == 6


# ------------------------------------------------------------ accumulation


@pytest.mark.parametrize("mode", ["mtb_pretrain", "supervised_finetune"])
def test_micro_batch_accumulation(synth_data, mode):
    labels = {r: i for i, r in enumerate(synth_data.relations)}
    data = synth_data.pairs if mode == "mtb_pretrain" else synth_data.labeled
    batch = list(data[:12])
    grads = []
    for micro in (1, 3, 12):
        m = synth_data.encoder(dtype="float64")
        head = ClassifierHead(len(labels), m.config.rep_dim, dtype=torch.float64)
        cfg = TrainConfig(mode=mode, micro_batches=micro, seed=0)
        loss, g = batch_gradients(m, head, batch, data, cfg, np.random.default_rng(5), label_ids=labels)
        grads.append((loss, g))
    (l0, g0) = grads[0]
    for loss, g in grads[1:]:
        assert abs(loss - l0) < 1e-10
        for a, b in zip(g0, g):
            if a is None:
                assert b is None
            else:
                assert torch.max(torch.abs(a - b)).item() < 1e-10


# ------------------------------------------------------------- checkpoints


def test_checkpoint_roundtrip_bytes(synth_data, tmp_path):
    m = synth_data.encoder()
    head = ClassifierHead(3, m.config.rep_dim, nil_index=0, labels=["no_relation", "a", "b"], seed=4)
    save_checkpoint(tmp_path / "a", m, synth_data.vocab, head, extra={"step": 5})
    m2, v2, h2, manifest = load_checkpoint(tmp_path / "a", synth_data.vocab)
    save_checkpoint(tmp_path / "b", m2, v2, h2, extra=manifest["extra"])
    for name in ("manifest.json", "tensors.bin", "vocab.txt"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    assert h2.labels == head.labels and h2.nil_index == 0
    stmts = synth_data.statements[:5]
    assert torch.equal(m.represent_statements(stmts), m2.represent_statements(stmts))


def test_checkpoint_without_head(synth_data, tmp_path):
    save_checkpoint(tmp_path / "c", synth_data.encoder(dtype="float64"), synth_data.vocab)
    m, _, head, _ = load_checkpoint(tmp_path / "c")
    assert head is None and m.dtype == torch.float64


def test_checkpoint_version_mismatch(synth_data, tmp_path):
    save_checkpoint(tmp_path / "c", synth_data.encoder(), synth_data.vocab)
    man = tmp_path / "c" / "manifest.json"
    man.write_text(man.read_text().replace('"version": 1', '"version": 2'))
    with pytest.raises(io.FormatError, match="version"):
        load_checkpoint(tmp_path / "c")


def test_checkpoint_vocab_mismatch(synth_data, tmp_path):
    save_checkpoint(tmp_path / "c", synth_data.encoder(), synth_data.vocab)
    with pytest.raises(io.FormatError, match="vocabulary"):
        load_checkpoint(tmp_path / "c", build_vocab(["zzz"], 1))


def test_checkpoint_corrupt_tensors(synth_data, tmp_path):
    save_checkpoint(tmp_path / "c", synth_data.encoder(), synth_data.vocab)
    blob = bytearray((tmp_path / "c" / "tensors.bin").read_bytes())
    blob[10] ^= 0xFF
    (tmp_path / "c" / "tensors.bin").write_bytes(bytes(blob))
    with pytest.raises(io.FormatError, match="corrupt"):
        load_checkpoint(tmp_path / "c")


def test_not_a_checkpoint(tmp_path):
    with pytest.raises(io.FormatError):
        load_checkpoint(tmp_path)


# ------------------------------------------------------------ convergence


def _full_loss(model, pairs):
    with torch.no_grad():
        a = model.represent_statements([p.a for p in pairs])
        b = model.represent_statements([p.b for p in pairs])
        return mtb_loss(a, b, torch.tensor([p.label for p in pairs])).item()


@pytest.mark.slow
def test_loss_halves_on_separable_data(synth_data):
    # alpha = 1 keeps every entity name, so same-pair labels are a function of the input
    pairs = list(pairgen.generate_pairs(synth_data.statements, pairgen.PairGenConfig(alpha=1.0, seed=0, max_pairs=1000)))
    ratios = []
    for seed in range(5):
        m = synth_data.encoder(seed=seed, hidden=32)
        initial = _full_loss(m, pairs)
        train(m, pairs, TrainConfig(steps=600, batch_size=32, lr=3e-3, lambda_mlm=0.0, seed=seed))
        ratios.append(_full_loss(m, pairs) / initial)
    assert np.median(ratios) < 0.5, ratios


@pytest.mark.slow
def test_mtb_pretraining_beats_chance_loss(synth_data):
    m = synth_data.encoder()
    train(m, synth_data.pairs, TrainConfig(steps=2000, batch_size=64, lr=1e-3, lambda_mlm=0.0, seed=0))
    assert _full_loss(m, synth_data.pairs) < math.log(2)


@pytest.mark.parametrize("name", ["mtb_pretrain", "supervised"])
def test_shipped_configs_load(name):
    path = Path(__file__).resolve().parents[1] / "configs" / f"{name}.yaml"
    cfg = TrainConfig.from_file(path)
    assert cfg.mode.startswith(name.split("_")[0])
