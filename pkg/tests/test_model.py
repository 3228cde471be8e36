import numpy as np
import pytest

import latentstain.autodiff as ad
from latentstain.autodiff import InvalidShapeError, Tensor, no_grad
from latentstain.lgdt import load_checkpoint, save_checkpoint
from latentstain.model import (VARIANT_FLAGS, CheckpointError, ModelGraph,
                               NotPretrainedError, VariantFlags, detect_variant)

from oracles import fd_gradient, max_rel_error


def _batch(rng, n=2, channels=3, size=32):
    return Tensor(rng.random((n, channels, size, size)).astype(np.float32))


def test_variant_flag_table_partitions_ablations():
    assert VARIANT_FLAGS["A"] == VariantFlags()
    assert VARIANT_FLAGS["B"] == VariantFlags(hallucination=True)
    assert VARIANT_FLAGS["C"] == VariantFlags(hallucination=True, attention=True)
    assert VARIANT_FLAGS["D"] == VariantFlags(hallucination=True, attention=True,
                                              nuclei_aux=True)
    assert VARIANT_FLAGS["E"] == VariantFlags(hallucination=True, attention=True,
                                              membrane_aux=True)
    assert VARIANT_FLAGS["F"] == VariantFlags(hallucination=True, attention=True,
                                              nuclei_aux=True, membrane_aux=True)


def test_shape_chain_for_32x32_input(rng):
    g = ModelGraph("F", seed=0)
    g.teacher_loaded = True
    x = _batch(rng, n=3)
    z = g.encode_student(x)
    assert z.shape == (3, 64, 8, 8)
    z_hat = g.hallucinate(z)
    assert z_hat.shape == (3, 64, 8, 8)
    fused, att = g.fuse(z, z_hat)
    assert fused.shape == (3, 128, 8, 8)
    assert att.shape == (3, 128, 8, 8)
    logits = g.classify(fused)
    assert logits.shape == (3, 4)


def test_encoder_rejects_bad_inputs(rng):
    g = ModelGraph("A", seed=0)
    with pytest.raises(InvalidShapeError):
        g.encode_student(Tensor(rng.random((1, 4, 32, 32)).astype(np.float32)))
    with pytest.raises(InvalidShapeError):
        g.encode_student(Tensor(rng.random((1, 3, 30, 30)).astype(np.float32)))


def test_encoder_zero_input_finite_and_deterministic():
    g = ModelGraph("A", seed=1)
    x = Tensor(np.zeros((2, 3, 32, 32), dtype=np.float32))
    z = g.encode_student(x)
    assert np.all(np.isfinite(z.data))
    np.testing.assert_array_equal(z.data[0], z.data[1])


def test_identical_patches_identical_features(rng):
    g = ModelGraph("A", seed=2)
    one = rng.random((1, 3, 32, 32)).astype(np.float32)
    two = Tensor(np.concatenate([one, one]))
    z = g.encode_student(two)
    np.testing.assert_array_equal(z.data[0], z.data[1])


def test_hallucinator_is_identity_at_init(rng):
    g = ModelGraph("B", seed=3)
    z = Tensor(rng.standard_normal((2, 64, 8, 8)).astype(np.float32))
    out = g.hallucinate(z)
    np.testing.assert_array_equal(out.data, z.data)  # final conv zero-init


def test_decoder_output_ranges(rng):
    g = ModelGraph("F", seed=4)
    z = Tensor(rng.standard_normal((2, 64, 8, 8)).astype(np.float32))
    k = g.decode_nuclei(z)
    m = g.decode_membrane(z)
    assert k.shape == (2, 1, 8, 8) and m.shape == (2, 1, 8, 8)
    assert np.all(k.data >= 0)
    assert np.all((m.data > 0) & (m.data < 1))


def test_decoder_zero_input_constant_maps():
    g = ModelGraph("F", seed=5)
    z = Tensor(np.zeros((1, 64, 8, 8), dtype=np.float32))
    assert np.ptp(g.decode_nuclei(z).data) == 0
    assert np.ptp(g.decode_membrane(z).data) == 0


def test_attention_in_unit_interval_and_zero_input_zero_fused(rng):
    g = ModelGraph("C", seed=6)
    za = Tensor(rng.standard_normal((2, 64, 8, 8)).astype(np.float32) * 5)
    zb = Tensor(rng.standard_normal((2, 64, 8, 8)).astype(np.float32) * 5)
    fused, att = g.fuse(za, zb)
    assert np.all((att.data >= 0) & (att.data <= 1))
    np.testing.assert_array_equal(
        fused.data, np.concatenate([za.data, zb.data], axis=1) * att.data)
    zeros = Tensor(np.zeros((2, 64, 8, 8), dtype=np.float32))
    fused0, _ = g.fuse(zeros, zeros)
    np.testing.assert_array_equal(fused0.data, 0.0)


def test_fuse_gradient_reaches_both_inputs(rng):
    g = ModelGraph("C", seed=7)
    for p in g.params.values():
        p.tensor.data = p.tensor.data.astype(np.float64)
    za = Tensor(rng.standard_normal((1, 64, 2, 2)), requires_grad=True,
                dtype=np.float64)
    zb = Tensor(rng.standard_normal((1, 64, 2, 2)), requires_grad=True,
                dtype=np.float64)
    probe = Tensor(rng.standard_normal((1, 128, 2, 2)), dtype=np.float64)

    def build():
        fused, _ = g.fuse(za, zb)
        return (fused * probe).sum()

    build().backward()
    for t in (za, zb):
        numeric = fd_gradient(lambda: build().item(), t)
        assert max_rel_error(t.grad, numeric) < 1e-3
        t.grad = None


def test_fuse_shape_mismatch(rng):
    g = ModelGraph("C", seed=8)
    with pytest.raises(InvalidShapeError):
        g.fuse(Tensor(rng.random((1, 64, 8, 8)).astype(np.float32)),
               Tensor(rng.random((1, 64, 4, 4)).astype(np.float32)))


def test_forward_train_variant_keys(rng, tiny_teacher_state):
    x_he = _batch(rng)
    x_ihc = _batch(rng)
    a = ModelGraph("A", seed=9)
    out = a.forward_train(x_he)
    assert set(out) == {"logits"}

    f = ModelGraph("F", seed=9)
    f_state = tiny_teacher_state
    for name, p in f.params.items():
        if name.startswith("teacher."):
            p.tensor.data = f_state[name].copy()
            p.tensor.requires_grad = False
    f.teacher_loaded = True
    out = f.forward_train(x_he, x_ihc=x_ihc)
    assert set(out) == {"logits", "halluc_features", "teacher_features",
                        "nuclei_pred", "membrane_pred"}


def test_forward_train_without_teacher_raises(rng):
    g = ModelGraph("B", seed=10)
    with pytest.raises(NotPretrainedError):
        g.forward_train(_batch(rng), x_ihc=_batch(rng))


def test_teacher_gets_no_gradient(rng, tiny_teacher_state):
    g = ModelGraph("F", seed=11)
    for name, p in g.params.items():
        if name.startswith("teacher."):
            p.tensor.data = tiny_teacher_state[name].copy()
            p.tensor.requires_grad = False
    g.teacher_loaded = True
    out = g.forward_train(_batch(rng), x_ihc=_batch(rng))
    (out["logits"].sum() + out["halluc_features"].sum()
     + out["teacher_features"].sum()).backward()
    for name, p in g.params.items():
        if name.startswith("teacher."):
            assert p.tensor.grad is None, name
        elif name.startswith("student."):
            assert p.tensor.grad is not None, name


def test_forward_infer_equals_forward_train_logits(rng, tiny_teacher_state):
    g = ModelGraph("F", seed=12)
    for name, p in g.params.items():
        if name.startswith("teacher."):
            p.tensor.data = tiny_teacher_state[name].copy()
            p.tensor.requires_grad = False
    g.teacher_loaded = True
    x = _batch(rng)
    train_logits = g.forward_train(x, x_ihc=_batch(rng))["logits"].data
    with no_grad():
        infer_logits = g.forward_infer(x).data
    np.testing.assert_array_equal(train_logits, infer_logits)


def test_stripped_checkpoint_loads_and_matches(tmp_path, rng, tiny_teacher_state):
    g = ModelGraph("F", seed=13)
    for name, p in g.params.items():
        if name.startswith("teacher."):
            p.tensor.data = tiny_teacher_state[name].copy()
    g.teacher_loaded = True
    x = _batch(rng)
    with no_grad():
        reference = g.forward_infer(x).data
    full = tmp_path / "full.ckpt"
    save_checkpoint(full, g.state())
    stripped = {k: v for k, v in g.state().items()
                if not k.startswith(("teacher.", "decoder."))}
    lean = tmp_path / "infer.ckpt"
    save_checkpoint(lean, stripped)
    for path in (full, lean):
        state = load_checkpoint(path)
        variant = detect_variant(state)
        g2 = ModelGraph(variant, seed=99, inference_only=True)
        g2.load_state(state)
        with no_grad():
            out = g2.forward_infer(x).data
        np.testing.assert_array_equal(out, reference)


def test_detect_variant_each_family(rng):
    assert detect_variant(ModelGraph("A", 0).state()) == "A"
    assert detect_variant(ModelGraph("B", 0).state()) == "B"
    assert detect_variant(ModelGraph("F", 0).state()) == "C"  # inference arch
    assert detect_variant(ModelGraph("ihc_unimodal", 0).state()) == "ihc_unimodal"
    assert detect_variant(ModelGraph("feature_concat", 0).state()) == "feature_concat"
    assert detect_variant(ModelGraph("image_concat", 0).state()) == "image_concat"
    with pytest.raises(CheckpointError):
        detect_variant({"bogus": np.zeros(1, dtype=np.float32)})


def test_load_state_validates(tmp_path):
    g = ModelGraph("A", seed=14)
    state = g.state()
    state.pop("classifier.bias")
    with pytest.raises(CheckpointError):
        ModelGraph("A", seed=0).load_state(state)
    state = g.state()
    state["classifier.bias"] = np.zeros(7, dtype=np.float32)
    with pytest.raises(CheckpointError):
        ModelGraph("A", seed=0).load_state(state)


def test_parameter_names_unique_and_prefixed():
    g = ModelGraph("F", seed=15)
    names = [p.name for p in g.parameters()]
    assert len(names) == len(set(names))
    for name in names:
        assert name.split(".")[0] in ("student", "teacher", "hallucinator",
                                      "decoder", "fusion", "classifier")


def test_classifier_width_is_64_without_hallucination():
    a = ModelGraph("A", seed=16)
    assert a.params["classifier.weight"].tensor.shape == (64, 4)
    f = ModelGraph("F", seed=16)
    assert f.params["classifier.weight"].tensor.shape == (128, 4)


def test_baseline_forwards(rng):
    ihc = ModelGraph("ihc_unimodal", seed=17)
    out = ihc.forward_train(None, x_ihc=_batch(rng))
    assert out["logits"].shape == (2, 4)

    fc = ModelGraph("feature_concat", seed=17)
    out = fc.forward_train(_batch(rng), x_ihc=_batch(rng))
    assert out["logits"].shape == (2, 4)

    imgc = ModelGraph("image_concat", seed=17)
    out = imgc.forward_train(_batch(rng), x_ihc=_batch(rng))
    assert out["logits"].shape == (2, 4)
