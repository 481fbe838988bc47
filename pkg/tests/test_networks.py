"""Network builders, pipeline forward/backward, embeddings, checkpoints."""

import io

import numpy as np
import pytest

from stn_align import checkpoint as ck
from stn_align import networks as nw
from stn_align import transforms as tf
from stn_align.exceptions import ShapeError
from stn_align.gradcheck import check_pipeline


def tiny_spec(kind, dtype="float64"):
    loc = None
    if kind != "identity":
        loc = nw.LocNetSpec(conv_blocks=1, fc_layers=1, head_width=tf.head_width(kind),
                            input_size=12, channels=(4,), kernels=(5,), hidden_width=8)
    rec = nw.RecNetSpec(class_count=3, residual_blocks=1, feature_width=6,
                        input_size=10, stem_channels=3)
    return nw.PipelineSpec(transform_kind=kind, image_size=16, loc_input_size=12,
                           warp_size=10, class_count=3, dtype=dtype, loc=loc, rec=rec)


def closed_form_locnet_count(spec):
    """Independent analytic parameter count for a localization network."""
    total = 0
    size = spec.input_size
    ch = spec.in_channels
    for i in range(spec.conv_blocks):
        k = spec.kernels[i]
        out = spec.channels[i]
        total += out * ch * k * k + out      # conv weights + bias
        total += out                         # prelu slopes
        size = (size - k + 1 + 1) // 2       # valid conv then 2x2 pool (odd padded)
        ch = out
    width = ch * size * size
    for _ in range(spec.fc_layers):
        total += spec.hidden_width * width + spec.hidden_width
        total += spec.hidden_width           # prelu slopes
        width = spec.hidden_width
    total += spec.head_width * width + spec.head_width
    return total


class TestLocNet:
    def test_step_zero_output_is_exact_identity(self):
        for kind in ("similarity", "affine", "projective"):
            spec = nw.LocNetSpec(head_width=tf.head_width(kind), input_size=20)
            net = nw.build_locnet(spec, seed=3)
            x = np.random.default_rng(0).random((4, 1, 20, 20))
            theta = net.forward(x)
            expected = tf.as_vector(tf.identity_params(kind))
            for row in theta:
                np.testing.assert_array_equal(row, expected)

    def test_head_width_for_each_kind(self):
        assert tf.head_width("projective") == 8
        assert tf.head_width("affine") == 6
        assert tf.head_width("similarity") == 4
        assert tf.head_width("identity") == 0

    def test_head_width_mismatch_rejected(self):
        spec = nw.LocNetSpec(head_width=4, input_size=20)
        with pytest.raises(ValueError):
            nw.LocNet(spec, np.random.default_rng(0), "projective")

    @pytest.mark.parametrize("blocks,fcs", [(1, 1), (2, 1), (3, 1), (4, 1), (2, 2), (3, 2)])
    def test_param_count_matches_closed_form(self, blocks, fcs):
        spec = nw.LocNetSpec(conv_blocks=blocks, fc_layers=fcs, head_width=6,
                             input_size=40)
        net = nw.build_locnet(spec, seed=0)
        assert net.num_params() == closed_form_locnet_count(spec)

    def test_invalid_spec_rejected(self):
        with pytest.raises(ValueError):
            nw.LocNetSpec(conv_blocks=5, head_width=4)
        with pytest.raises(ValueError):
            nw.LocNetSpec(conv_blocks=1, fc_layers=3, head_width=4)
        with pytest.raises(ValueError):
            nw.LocNetSpec(head_width=5)
        with pytest.raises(ValueError):
            # 4 conv blocks cannot fit a 12 px input
            nw.LocNetSpec(conv_blocks=4, head_width=4, input_size=12)


class TestResidual:
    def test_zero_weights_identity_map(self):
        rng = np.random.default_rng(1)
        block = nw.ResBlock(rng, channels=3)
        block.c1.w[...] = 0.0
        block.c2.w[...] = 0.0
        x = rng.normal(size=(2, 3, 5, 5))
        np.testing.assert_array_equal(block.forward(x), x)

    def test_backward_includes_shortcut(self):
        rng = np.random.default_rng(2)
        block = nw.ResBlock(rng, channels=2)
        block.c1.w[...] = 0.0
        block.c2.w[...] = 0.0
        x = rng.normal(size=(1, 2, 4, 4))
        block.forward(x)
        up = rng.normal(size=x.shape)
        np.testing.assert_array_equal(block.backward(up), up)


class TestPipelineStep0:
    def test_all_kinds_start_at_center_resample(self):
        rng = np.random.default_rng(3)
        images = rng.random((3, 1, 16, 16))
        reference = nw.center_resample(images, 10, 10)
        for kind in tf.KINDS:
            state = nw.build_pipeline(tiny_spec(kind), seed=5)
            fwd = nw.forward_pipeline(state, images)
            assert np.abs(fwd.warped - reference).max() < 1e-12

    def test_identity_kind_has_no_predicted_params(self):
        state = nw.build_pipeline(tiny_spec("identity"), seed=0)
        fwd = nw.forward_pipeline(state, np.random.default_rng(0).random((2, 1, 16, 16)))
        assert fwd.theta is None
        assert fwd.predicted_params is None

    def test_learned_kind_reports_per_sample_params(self):
        state = nw.build_pipeline(tiny_spec("similarity"), seed=0)
        fwd = nw.forward_pipeline(state, np.random.default_rng(0).random((2, 1, 16, 16)))
        params = fwd.predicted_params
        assert len(params) == 2
        assert all(p.kind == "similarity" for p in params)

    def test_wrong_image_size_rejected(self):
        state = nw.build_pipeline(tiny_spec("identity"), seed=0)
        with pytest.raises(ShapeError):
            nw.forward_pipeline(state, np.zeros((1, 1, 9, 9)))


class TestPipelineGradients:
    @pytest.mark.parametrize("kind", tf.KINDS)
    def test_end_to_end_finite_differences(self, kind):
        result = check_pipeline(kind, trials=1, seed=11)
        assert result.passed, result.line()

    def test_zero_upstream_zero_grads(self):
        state = nw.build_pipeline(tiny_spec("projective"), seed=1)
        images = np.random.default_rng(4).random((2, 1, 16, 16))
        fwd = nw.forward_pipeline(state, images)
        grads = nw.backward_pipeline(state, fwd, np.zeros_like(fwd.logits))
        assert all(not g.any() for g in grads.loc.values())
        assert all(not g.any() for g in grads.rec.values())

    def test_promoted_similarity_params_reproduce_warp(self):
        state = nw.build_pipeline(tiny_spec("similarity"), seed=2)
        head = dict(state.loc.net.layers)["head"]
        head.b[...] = np.array([0.2, 1.1, 0.05, -0.1])
        images = np.random.default_rng(5).random((2, 1, 16, 16))
        fwd = nw.forward_pipeline(state, images)
        from stn_align.sampler import bilinear_sample
        for i, params in enumerate(fwd.predicted_params):
            promoted = tf.promote(params, "projective")
            grid = tf.generate_grid(promoted, 10, 10)
            redone = bilinear_sample(images[i:i + 1], grid)
            assert np.abs(redone - fwd.warped[i:i + 1]).max() < 1e-12


class TestDegenerateHandling:
    def test_degenerate_projective_sample_penalized(self):
        state = nw.build_pipeline(tiny_spec("projective"), seed=3)
        head = dict(state.loc.net.layers)["head"]
        head.b[...] = np.array([1.0, 0, 0, 0, 1.0, 0, 1.0, 0.0])  # divisor hits 0
        images = np.random.default_rng(6).random((2, 1, 16, 16))
        fwd = nw.forward_pipeline(state, images)
        assert fwd.degenerate.all()
        assert fwd.penalty > 0
        reference = nw.center_resample(images, 10, 10)
        assert np.abs(fwd.warped - reference).max() < 1e-12  # identity fallback
        grads = nw.backward_pipeline(state, fwd, np.zeros_like(fwd.logits))
        head_grad = grads.loc["head.b"]
        assert head_grad[6] != 0.0 or head_grad[7] != 0.0

    def test_healthy_samples_not_flagged(self):
        state = nw.build_pipeline(tiny_spec("projective"), seed=3)
        images = np.random.default_rng(7).random((2, 1, 16, 16))
        fwd = nw.forward_pipeline(state, images)
        assert not fwd.degenerate.any()
        assert fwd.penalty == 0.0


class TestEmbeddings:
    def test_mirror_average_on_symmetric_input_noop(self):
        state = nw.build_pipeline(tiny_spec("identity"), seed=4)
        rng = np.random.default_rng(8)
        half = rng.random((1, 1, 16, 8))
        image = np.concatenate([half, half[:, :, :, ::-1]], axis=3)
        single = nw.extract_embedding(state, image, mirror_average=False)
        averaged = nw.extract_embedding(state, image, mirror_average=True)
        np.testing.assert_allclose(single, averaged, atol=1e-12)

    def test_mirror_average_is_mean_of_two_passes(self):
        state = nw.build_pipeline(tiny_spec("identity"), seed=4)
        rng = np.random.default_rng(9)
        image = rng.random((2, 1, 16, 16))
        plain = nw.extract_embedding(state, image)
        flipped = nw.extract_embedding(state, image[:, :, :, ::-1].copy())
        averaged = nw.extract_embedding(state, image, mirror_average=True)
        assert np.abs(averaged - 0.5 * (plain + flipped)).max() < 1e-12

    def test_accepts_single_unbatched_image(self):
        state = nw.build_pipeline(tiny_spec("identity"), seed=4)
        feats = nw.extract_embedding(state, np.zeros((1, 16, 16)))
        assert feats.shape == (1, 6)


class TestCheckpoint:
    def test_roundtrip_restores_every_tensor(self, tmp_path):
        state = nw.build_pipeline(tiny_spec("projective"), seed=6)
        path = tmp_path / "model.ckpt"
        ck.save_checkpoint(path, state)
        loaded = ck.load_checkpoint(path)
        for name, arr in state.params().items():
            np.testing.assert_array_equal(loaded.params()[name], arr)
        assert loaded.spec == state.spec

    def test_checkpoint_bytes_deterministic(self):
        a = ck.checkpoint_bytes(nw.build_pipeline(tiny_spec("similarity"), seed=7))
        b = ck.checkpoint_bytes(nw.build_pipeline(tiny_spec("similarity"), seed=7))
        assert a == b

    def test_byte_layout_starts_with_magic_and_counts(self):
        state = nw.build_pipeline(tiny_spec("identity"), seed=8)
        blob = ck.checkpoint_bytes(state)
        assert blob.startswith(b"STNCKPT1")
        n_tensors = int.from_bytes(blob[8:12], "little")
        assert n_tensors == len(state.params())

    def test_float32_state_roundtrip(self, tmp_path):
        state = nw.build_pipeline(tiny_spec("similarity", dtype="float32"), seed=9)
        path = tmp_path / "f32.ckpt"
        ck.save_checkpoint(path, state)
        loaded = ck.load_checkpoint(path)
        assert loaded.spec.dtype == "float32"
        for name, arr in state.params().items():
            assert loaded.params()[name].dtype == arr.dtype
            np.testing.assert_array_equal(loaded.params()[name], arr)

    def test_truncated_file_rejected(self, tmp_path):
        path = tmp_path / "bad.ckpt"
        path.write_bytes(b"NOTACKPT")
        with pytest.raises(ValueError):
            ck.load_checkpoint(path)

    def test_read_write_stream_roundtrip(self):
        tensors = {"a": np.arange(6, dtype=np.float64).reshape(2, 3),
                   "b": np.zeros(4, dtype=np.float32)}
        buf = io.BytesIO()
        ck.write_tensors(buf, tensors, "note=1\n")
        buf.seek(0)
        loaded, text = ck.read_tensors(buf)
        assert text == "note=1\n"
        np.testing.assert_array_equal(loaded["a"], tensors["a"])
        assert loaded["b"].dtype == np.float32


class TestSpecText:
    def test_spec_roundtrip(self):
        for kind in tf.KINDS:
            spec = tiny_spec(kind)
            again = nw.spec_from_text(nw.spec_to_text(spec))
            assert again == spec
