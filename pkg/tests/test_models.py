"""Model assembly and the binary checkpoint format."""

import math

import numpy as np
import pytest

from mtsn.errors import (CheckpointParseError, CheckpointVersionError,
                         ContractError, DimensionError)
from mtsn.losses import LossConfig, cross_entropy, distillation_kl, total_loss
from mtsn.models import (Baseline2Model, MtsnModel, baseline2_forward,
                         baseline2_train_step, forward_logits, load_checkpoint,
                         model_from_checkpoint, mtsn_forward, mtsn_train_step,
                         predict, save_checkpoint)
from mtsn.optim import init_adam


def _zero_params(model):
    for p in model.parameters().values():
        p.data[...] = 0.0


def _sigmoid(v):
    return 1.0 / (1.0 + np.exp(-v))


def _reference_mtsn(params, xs):
    """Independent numpy re-statement of the whole forward pass."""
    e_te = xs @ params["transfer.w"].T + params["transfer.b"]
    pooled_te = e_te.mean(axis=0)
    h = np.zeros(params["classifier.w"].shape[1])
    states = []
    for x in e_te:
        r = _sigmoid(params["intent_gru.w_r"] @ x + params["intent_gru.b_r"]
                     + params["intent_gru.u_r"] @ h)
        z = _sigmoid(params["intent_gru.w_z"] @ x + params["intent_gru.b_z"]
                     + params["intent_gru.u_z"] @ h)
        n = np.tanh(params["intent_gru.w_n"] @ x + params["intent_gru.b_n"]
                    + r * (params["intent_gru.u_n"] @ h + params["intent_gru.c_n"]))
        h = (1.0 - z) * n + z * h
        states.append(h)
    pooled = np.max(np.stack(states), axis=0)
    logits = params["classifier.w"] @ pooled + params["classifier.b"]
    return logits, pooled_te


def test_zero_model_is_uniform():
    for num_intents in (2, 5, 31):
        model = MtsnModel(4, 3, 6, num_intents, seed=0)
        _zero_params(model)
        xs = np.random.default_rng(1).standard_normal((5, 4))
        logits, pooled = mtsn_forward(model, xs)
        assert np.array_equal(logits.data, np.zeros(num_intents))
        assert np.array_equal(pooled.data, np.zeros(3))
        loss = cross_entropy(logits, 0)
        assert abs(loss.item() - math.log(num_intents)) < 1e-12


def test_mtsn_forward_matches_reference_composition():
    model = MtsnModel(5, 4, 6, 7, seed=3)
    xs = np.random.default_rng(4).standard_normal((8, 5))
    logits, pooled_te = mtsn_forward(model, xs)
    arrays = {name: p.data for name, p in model.parameters().items()}
    ref_logits, ref_pooled = _reference_mtsn(arrays, xs)
    assert np.allclose(logits.data, ref_logits, atol=1e-12)
    assert np.allclose(pooled_te.data, ref_pooled, atol=1e-12)


def test_baseline2_equals_mtsn_with_identity_transfer():
    d, hidden, k = 6, 5, 4
    b2 = Baseline2Model(d, hidden, k, seed=9)
    mtsn = MtsnModel(d, d, hidden, k, seed=9)
    mtsn.transfer.w.data[...] = np.eye(d)
    mtsn.transfer.b.data[...] = 0.0
    b2_params = b2.parameters()
    for name, p in mtsn.parameters().items():
        if name in b2_params:
            p.data[...] = b2_params[name].data
    xs = np.random.default_rng(11).standard_normal((7, d))
    assert np.allclose(mtsn_forward(mtsn, xs)[0].data,
                       baseline2_forward(b2, xs).data, atol=1e-13)


def test_forward_logits_dispatch():
    xs = np.random.default_rng(0).standard_normal((4, 3))
    mtsn = MtsnModel(3, 2, 4, 5, seed=1)
    b2 = Baseline2Model(3, 4, 5, seed=1)
    assert np.array_equal(forward_logits(mtsn, xs).data, mtsn_forward(mtsn, xs)[0].data)
    assert np.array_equal(forward_logits(b2, xs).data, baseline2_forward(b2, xs).data)


def test_predict_tie_resolves_to_smallest_index():
    model = Baseline2Model(3, 4, 6, seed=0)
    _zero_params(model)
    xs = np.random.default_rng(2).standard_normal((5, 3))
    assert predict(model, xs) == 0


def test_predict_shift_invariance():
    model = Baseline2Model(3, 4, 6, seed=5)
    xs = np.random.default_rng(6).standard_normal((5, 3))
    before = predict(model, xs)
    model.classifier.b.data += 42.0
    assert predict(model, xs) == before


def test_input_validation():
    model = MtsnModel(4, 3, 5, 4, seed=0)
    with pytest.raises(DimensionError, match="frame width"):
        mtsn_forward(model, np.zeros((3, 5)))
    with pytest.raises(DimensionError, match="sequence"):
        mtsn_forward(model, np.zeros(4))
    b2 = Baseline2Model(4, 5, 4, seed=0)
    with pytest.raises(DimensionError):
        baseline2_forward(b2, np.zeros((2, 3)))


def test_constructor_validation():
    with pytest.raises(ContractError, match="num_intents"):
        MtsnModel(4, 3, 5, 1)
    with pytest.raises(ContractError, match="positive"):
        MtsnModel(0, 3, 5, 4)
    with pytest.raises(ContractError, match="positive"):
        Baseline2Model(4, 0, 4)


def test_parameter_namespaces():
    mtsn = MtsnModel(4, 3, 5, 4)
    names = list(mtsn.parameters())
    assert names[0] == "transfer.w"
    assert names[-1] == "classifier.b"
    assert all(n.split(".")[0] in ("transfer", "intent_gru", "classifier")
               for n in names)
    b2 = Baseline2Model(4, 5, 4)
    assert set(b2.parameters()) == {n for n in names if not n.startswith("transfer")}


def test_train_step_batch_validation():
    model = MtsnModel(3, 2, 4, 3, seed=0)
    adam = init_adam(model.parameters())
    xs = np.zeros((4, 3))
    with pytest.raises(ContractError, match="empty"):
        mtsn_train_step(model, [], [], [], adam)
    with pytest.raises(ContractError, match="lengths"):
        mtsn_train_step(model, [xs], [np.zeros(2)], [0, 1], adam)
    with pytest.raises(DimensionError, match="teacher"):
        mtsn_train_step(model, [xs], [np.zeros(5)], [0], adam)
    b2 = Baseline2Model(3, 4, 3, seed=0)
    with pytest.raises(ContractError, match="empty"):
        baseline2_train_step(b2, [], [], init_adam(b2.parameters()))


def test_alpha_one_leaves_classifier_untouched():
    # with all weight on distillation, nothing downstream of the pooled
    # transfer embedding can receive a gradient
    model = MtsnModel(4, 3, 5, 4, loss_cfg=LossConfig(alpha=1.0), seed=2)
    xs = np.random.default_rng(7).standard_normal((5, 4))
    teacher = np.random.default_rng(8).standard_normal(3)
    logits, pooled = mtsn_forward(model, xs)
    loss = total_loss(distillation_kl(pooled, teacher), cross_entropy(logits, 1),
                      model.loss_cfg)
    loss.backward()
    assert model.classifier.w.grad is None
    assert model.intent_gru.w_r.grad is None
    assert model.transfer.w.grad is not None
    assert np.any(model.transfer.w.grad != 0.0)


def test_alpha_zero_still_reaches_transfer_through_intent_path():
    model = MtsnModel(4, 3, 5, 4, loss_cfg=LossConfig(alpha=0.0), seed=2)
    xs = np.random.default_rng(7).standard_normal((5, 4))
    teacher = np.random.default_rng(8).standard_normal(3)
    logits, pooled = mtsn_forward(model, xs)
    loss = total_loss(distillation_kl(pooled, teacher), cross_entropy(logits, 1),
                      model.loss_cfg)
    loss.backward()
    assert model.classifier.w.grad is not None
    assert model.transfer.w.grad is not None


def test_train_step_reports_batch_means():
    model = MtsnModel(3, 2, 4, 3, seed=1)
    adam = init_adam(model.parameters())
    rng = np.random.default_rng(3)
    xs = [rng.standard_normal((4, 3)) for _ in range(3)]
    teachers = [rng.standard_normal(2) for _ in range(3)]
    labels = [0, 1, 2]
    # losses computed on the pre-update parameters, independently
    expected_tl, expected_intent, expected_total = [], [], []
    for x, te, lab in zip(xs, teachers, labels):
        logits, pooled = mtsn_forward(model, x)
        expected_tl.append(distillation_kl(pooled, te).item())
        expected_intent.append(cross_entropy(logits, lab).item())
        expected_total.append(0.5 * expected_tl[-1] + 0.5 * expected_intent[-1])
    total, tl, intent = mtsn_train_step(model, xs, teachers, labels, adam)
    assert abs(total - np.mean(expected_total)) < 1e-12
    assert abs(tl - np.mean(expected_tl)) < 1e-12
    assert abs(intent - np.mean(expected_intent)) < 1e-12
    assert adam.t == 1


def test_baseline2_step_reports_zero_distillation():
    model = Baseline2Model(3, 4, 3, seed=1)
    adam = init_adam(model.parameters())
    rng = np.random.default_rng(3)
    xs = [rng.standard_normal((4, 3)) for _ in range(2)]
    total, tl, intent = baseline2_train_step(model, xs, [0, 1], adam)
    assert tl == 0.0
    assert total == intent


# ---------------------------------------------------------------------------
# checkpoints


def _fixed_batches(model, n=6, count=1):
    rng = np.random.default_rng(42)
    return [([rng.standard_normal((5, model.acoustic_dim)) for _ in range(n)],
             [rng.standard_normal(model.teacher_dim) for _ in range(n)],
             list(rng.integers(model.num_intents, size=n)))
            for _ in range(count)]


def test_checkpoint_round_trip_is_bit_exact(tmp_path):
    model = MtsnModel(4, 3, 5, 4, loss_cfg=LossConfig(alpha=0.3, temperature=2.0),
                      seed=12)
    adam = init_adam(model.parameters(), lr=0.002)
    (xs, teachers, labels), = _fixed_batches(model)
    mtsn_train_step(model, xs, teachers, labels, adam)
    path = tmp_path / "model.mtsn"
    save_checkpoint(path, model, adam, metadata={"seed": 12, "note": "round trip"})

    ckpt = load_checkpoint(path)
    assert ckpt.model_kind == "mtsn"
    assert ckpt.dims == model.dims()
    assert ckpt.loss_cfg == {"alpha": 0.3, "temperature": 2.0}
    assert ckpt.metadata == {"seed": 12, "note": "round trip"}
    for name, p in model.parameters().items():
        assert np.array_equal(ckpt.params[name], p.data)
    assert ckpt.optimizer["t"] == 1
    assert ckpt.optimizer["lr"] == 0.002
    for name in model.parameters():
        assert np.array_equal(ckpt.optimizer["m"][name], adam.m[name])
        assert np.array_equal(ckpt.optimizer["v"][name], adam.v[name])

    rebuilt, adam2 = model_from_checkpoint(ckpt)
    assert isinstance(rebuilt, MtsnModel)
    assert rebuilt.loss_cfg.alpha == 0.3
    for name, p in rebuilt.parameters().items():
        assert np.array_equal(p.data, model.parameters()[name].data)
    assert adam2.t == 1


def test_checkpoint_without_optimizer(tmp_path):
    model = Baseline2Model(3, 4, 5, seed=7)
    path = tmp_path / "b2.mtsn"
    save_checkpoint(path, model)
    ckpt = load_checkpoint(path)
    assert ckpt.model_kind == "baseline2"
    assert ckpt.optimizer is None
    assert ckpt.loss_cfg is None
    rebuilt, adam = model_from_checkpoint(ckpt)
    assert adam is None
    xs = np.random.default_rng(1).standard_normal((4, 3))
    assert np.array_equal(baseline2_forward(rebuilt, xs).data,
                          baseline2_forward(model, xs).data)


def test_resume_matches_uninterrupted_training(tmp_path):
    def fresh():
        m = MtsnModel(4, 3, 5, 4, seed=21)
        return m, init_adam(m.parameters())

    batches = _fixed_batches(MtsnModel(4, 3, 5, 4, seed=21), n=4, count=8)

    straight, adam = fresh()
    for xs, teachers, labels in batches:
        mtsn_train_step(straight, xs, teachers, labels, adam)

    resumed, adam1 = fresh()
    for xs, teachers, labels in batches[:4]:
        mtsn_train_step(resumed, xs, teachers, labels, adam1)
    path = tmp_path / "mid.mtsn"
    save_checkpoint(path, resumed, adam1)
    resumed2, adam2 = model_from_checkpoint(load_checkpoint(path))
    for xs, teachers, labels in batches[4:]:
        mtsn_train_step(resumed2, xs, teachers, labels, adam2)

    for name, p in straight.parameters().items():
        assert np.array_equal(p.data, resumed2.parameters()[name].data), name


def test_truncation_reports_what_was_being_read(tmp_path):
    model = MtsnModel(3, 2, 4, 3, seed=5)
    adam = init_adam(model.parameters())
    path = tmp_path / "full.mtsn"
    save_checkpoint(path, model, adam)
    blob = path.read_bytes()

    cases = [
        (2, "magic"),
        (6, "header length"),
        (30, "header"),
    ]
    for cut, what in cases:
        clipped = tmp_path / f"cut{cut}.mtsn"
        clipped.write_bytes(blob[:cut])
        with pytest.raises(CheckpointParseError, match=what):
            load_checkpoint(clipped)

    # cut inside the first parameter blob and inside the moment blobs
    header_len = int(np.frombuffer(blob[4:8], dtype="<u4")[0])
    first_param_cut = 8 + header_len + 5
    clipped = tmp_path / "cut_param.mtsn"
    clipped.write_bytes(blob[:first_param_cut])
    with pytest.raises(CheckpointParseError, match="parameter 'transfer.w'"):
        load_checkpoint(clipped)

    clipped = tmp_path / "cut_moment.mtsn"
    clipped.write_bytes(blob[:-3])
    with pytest.raises(CheckpointParseError, match="moment"):
        load_checkpoint(clipped)


def test_bad_magic_and_trailing_data(tmp_path):
    model = Baseline2Model(3, 4, 3, seed=0)
    path = tmp_path / "m.mtsn"
    save_checkpoint(path, model)
    blob = path.read_bytes()

    wrong = tmp_path / "wrong_magic.mtsn"
    wrong.write_bytes(b"XXXX" + blob[4:])
    with pytest.raises(CheckpointParseError, match="magic"):
        load_checkpoint(wrong)

    padded = tmp_path / "padded.mtsn"
    padded.write_bytes(blob + b"\x00" * 8)
    with pytest.raises(CheckpointParseError, match="trailing"):
        load_checkpoint(padded)


def test_unreadable_header_json(tmp_path):
    garbage = b"{not json"
    path = tmp_path / "bad.mtsn"
    path.write_bytes(b"MTSN" + np.uint32(len(garbage)).tobytes() + garbage)
    with pytest.raises(CheckpointParseError, match="unreadable header"):
        load_checkpoint(path)


def test_version_mismatch_is_its_own_error(tmp_path):
    import json
    model = Baseline2Model(3, 4, 3, seed=0)
    path = tmp_path / "m.mtsn"
    save_checkpoint(path, model)
    blob = path.read_bytes()
    header_len = int(np.frombuffer(blob[4:8], dtype="<u4")[0])
    header = json.loads(blob[8:8 + header_len])
    header["format_version"] = 99
    encoded = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    bumped = tmp_path / "v99.mtsn"
    bumped.write_bytes(b"MTSN" + np.uint32(len(encoded)).tobytes()
                       + encoded + blob[8 + header_len:])
    with pytest.raises(CheckpointVersionError, match="99"):
        load_checkpoint(bumped)


def test_unknown_model_kind_rejected(tmp_path):
    import json
    model = Baseline2Model(3, 4, 3, seed=0)
    path = tmp_path / "m.mtsn"
    save_checkpoint(path, model)
    ckpt = load_checkpoint(path)
    ckpt.model_kind = "transformer"
    with pytest.raises(CheckpointParseError, match="model kind"):
        model_from_checkpoint(ckpt)


def test_dims_reflect_construction():
    model = MtsnModel(7, 5, 9, 11, dtype=np.float32)
    assert model.dims() == {"acoustic_dim": 7, "teacher_dim": 5,
                            "hidden_size": 9, "num_intents": 11,
                            "dtype": "float32"}
    assert MtsnModel.kind == "mtsn"
    assert Baseline2Model.kind == "baseline2"
