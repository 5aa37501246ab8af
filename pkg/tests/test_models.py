"""Structure, semantics, and gradients of the eight model variants."""

import numpy as np
import pytest

from snifr import autodiff as ad
from snifr import models as sm
from snifr.autodiff import Tensor
from snifr.data import ClipRecord, Label
from snifr.models import Batch, FusionKind, ModelConfig


def tiny_config(kind, **overrides):
    base = dict(fusion_kind=kind, d_model=8, d_ff=16, n_encoder_layers=1,
                dropout_p=0.1, seed=5)
    base.update(overrides)
    return ModelConfig(**base)


def make_batch(n, t_audio=1, t_video=1, seed=0):
    rng = np.random.default_rng(seed)
    records = [
        ClipRecord(clip_id=i, label=Label(int(rng.integers(0, 4))),
                   audio=rng.standard_normal((t_audio, 768)).astype(np.float32),
                   video=rng.standard_normal((t_video, 768)).astype(np.float32))
        for i in range(n)
    ]
    return records


class TestBuild:
    def test_video_only_has_no_cross_or_audio_params(self):
        model = sm.build_model(tiny_config(FusionKind.V))
        assert not any(name.startswith(("cas.", "proj.a", "enc.a", "lc."))
                       for name in model.params)

    def test_same_seed_bitwise_identical(self):
        m1 = sm.build_model(tiny_config(FusionKind.SNIFR))
        m2 = sm.build_model(tiny_config(FusionKind.SNIFR))
        assert list(m1.params) == list(m2.params)
        for name in m1.params:
            np.testing.assert_array_equal(m1.params[name].data, m2.params[name].data)

    def test_different_seed_differs(self):
        m1 = sm.build_model(tiny_config(FusionKind.SNIFR, seed=1))
        m2 = sm.build_model(tiny_config(FusionKind.SNIFR, seed=2))
        assert any(not np.array_equal(m1.params[n].data, m2.params[n].data)
                   for n in m1.params)

    def test_invalid_config_rejected(self):
        with pytest.raises(ValueError, match="divisible"):
            sm.build_model(tiny_config(FusionKind.V, d_model=8, n_heads=3))
        with pytest.raises(ValueError, match=">= 1"):
            sm.build_model(tiny_config(FusionKind.V, d_model=0))


class TestParamCount:
    def test_tiny_snifr_matches_handwritten_sum(self):
        # Independent arithmetic over the block shapes at d=8, d_ff=16.
        d, d_ff, din, hid, ncls = 8, 16, 768, 120, 4
        proj = 2 * (din * d + d)
        qkv = 3 * d * d + 2 * d  # q and v biased; key bias would be dead
        out_proj = d * d + d
        ffn = d * d_ff + d_ff + d_ff * d + d
        two_lns = 2 * (2 * d)
        enc = 2 * (qkv + out_proj + ffn + two_lns)
        cascade = 2 * 2 * (qkv + ffn + two_lns)  # 2 stages x 2 sides, no out proj
        head = (2 * d) * hid + hid + hid * ncls + ncls
        expected = proj + enc + cascade + head
        model = sm.build_model(tiny_config(FusionKind.SNIFR))
        assert sm.param_count(model) == expected

    def test_tiny_video_only_matches_handwritten_sum(self):
        d, d_ff, din, hid, ncls = 8, 16, 768, 120, 4
        expected = (din * d + d) \
            + ((3 * d * d + 2 * d) + (d * d + d) + (d * d_ff + d_ff + d_ff * d + d) + 4 * d) \
            + (d * hid + hid + hid * ncls + ncls)
        model = sm.build_model(tiny_config(FusionKind.V))
        assert sm.param_count(model) == expected

    def test_structural_containment_ordering(self):
        counts = {kind: sm.param_count(sm.build_model(tiny_config(kind)))
                  for kind in (FusionKind.EC, FusionKind.CT, FusionKind.SNIFR)}
        assert counts[FusionKind.SNIFR] > counts[FusionKind.CT] > counts[FusionKind.EC]

    def test_default_snifr_count_is_stable(self):
        # Documented in the README next to the architecture notes.
        model = sm.build_model(ModelConfig(FusionKind.SNIFR))
        assert sm.param_count(model) == 3_353_692


class TestForwardShapes:
    @pytest.mark.parametrize("kind", list(FusionKind))
    def test_logits_and_penultimate_shapes(self, kind):
        model = sm.build_model(tiny_config(kind))
        out = sm.forward(model, make_batch(3), mode="eval")
        assert out.logits.shape == (3, 4)
        assert out.penultimate.shape == (3, 120)
        if kind in (FusionKind.V, FusionKind.A):
            assert out.fused is None
        else:
            assert out.fused is not None

    def test_empty_batch_rejected(self):
        model = sm.build_model(tiny_config(FusionKind.V))
        with pytest.raises(ValueError, match="empty"):
            sm.forward(model, [], mode="eval")

    def test_wrong_feature_dim_rejected(self):
        model = sm.build_model(tiny_config(FusionKind.EC))
        batch = Batch(audio=np.zeros((2, 1, 512)), video=np.zeros((2, 1, 768)))
        with pytest.raises(ValueError, match="audio feature dim"):
            sm.forward(model, batch, mode="eval")

    def test_train_mode_requires_rng(self):
        model = sm.build_model(tiny_config(FusionKind.V))
        with pytest.raises(ValueError, match="rng"):
            sm.forward(model, make_batch(2), mode="train")


def copy_shared_params(dst: sm.Model, src: sm.Model) -> None:
    for name in dst.params:
        if name in src.params:
            dst.params[name].data = src.params[name].data.copy()


class TestFusionSemantics:
    def test_elementwise_average_of_equal_streams_is_either_stream(self):
        # Tie video params to audio params and feed identical features:
        # the averaged fusion must equal the single-modality pipeline.
        ea = sm.build_model(tiny_config(FusionKind.EA))
        for name in list(ea.params):
            if ".v." in name or name.startswith("proj.v"):
                ea.params[name].data = ea.params[name.replace(".v.", ".a.")
                                                 .replace("proj.v", "proj.a")].data.copy()
        a_model = sm.build_model(tiny_config(FusionKind.A))
        copy_shared_params(a_model, ea)

        records = make_batch(4)
        for rec in records:
            rec.video = rec.audio.copy()
        out_ea = sm.forward(ea, records, mode="eval")
        out_a = sm.forward(a_model, records, mode="eval")
        np.testing.assert_allclose(out_ea.logits.data, out_a.logits.data, atol=1e-12)

    def test_elementwise_product_with_all_ones_stream_passes_other(self):
        # Zero gamma / unit beta on the video encoder's final norm forces
        # an all-ones video stream, so the product returns the audio side.
        ep = sm.build_model(tiny_config(FusionKind.EP))
        ep.params["enc.v.l0.ln2.g"].data[:] = 0.0
        ep.params["enc.v.l0.ln2.b"].data[:] = 1.0
        a_model = sm.build_model(tiny_config(FusionKind.A))
        copy_shared_params(a_model, ep)

        records = make_batch(4, seed=11)
        out_ep = sm.forward(ep, records, mode="eval")
        out_a = sm.forward(a_model, records, mode="eval")
        np.testing.assert_allclose(out_ep.logits.data, out_a.logits.data, atol=1e-12)

    def test_snifr_with_identity_cascades_reproduces_ec(self):
        snifr = sm.build_model(tiny_config(FusionKind.SNIFR, cascade_identity=True))
        ec = sm.build_model(tiny_config(FusionKind.EC))
        copy_shared_params(ec, snifr)
        records = make_batch(5, seed=3)
        out_s = sm.forward(snifr, records, mode="eval")
        out_e = sm.forward(ec, records, mode="eval")
        np.testing.assert_array_equal(out_s.logits.data, out_e.logits.data)


class TestDegeneracies:
    def test_encode_intra_single_token_reduces_to_value_path(self):
        model = sm.build_model(tiny_config(FusionKind.EC))
        z = Tensor(np.random.default_rng(7).standard_normal((1, 8)))
        via_attention = sm.encode_intra(model, z, "a", mode="eval")
        p = model.params
        manual = ad.layer_norm(
            ad.add(z, ad.add(ad.matmul(ad.add(ad.matmul(z, p["enc.a.l0.attn.wv"]),
                                              p["enc.a.l0.attn.bv"]),
                                       p["enc.a.l0.attn.wo"]),
                             p["enc.a.l0.attn.bo"])),
            p["enc.a.l0.ln1.g"], p["enc.a.l0.ln1.b"], model.config.ln_eps)
        manual = ad.layer_norm(
            ad.add(manual, ad.ffn(manual, p["enc.a.l0.ffn.w1"], p["enc.a.l0.ffn.b1"],
                                  p["enc.a.l0.ffn.w2"], p["enc.a.l0.ffn.b2"])),
            p["enc.a.l0.ln2.g"], p["enc.a.l0.ln2.b"], model.config.ln_eps)
        np.testing.assert_allclose(via_attention.data, manual.data, atol=1e-12)

    def test_cascade_single_token_delivers_other_modality_value(self):
        model = sm.build_model(tiny_config(FusionKind.SNIFR))
        rng = np.random.default_rng(8)
        z_a = Tensor(rng.standard_normal((1, 8)))
        z_b = Tensor(rng.standard_normal((1, 8)))
        out_a, out_b = sm.cascade_step(model, z_a, z_b, stage=1, mode="eval")
        p = model.params
        attn_a = ad.add(ad.matmul(z_b, p["cas.s1.a.attn.wv"]), p["cas.s1.a.attn.bv"])
        manual = ad.layer_norm(ad.add(z_a, attn_a), p["cas.s1.a.ln1.g"],
                               p["cas.s1.a.ln1.b"], model.config.ln_eps)
        manual = ad.layer_norm(
            ad.add(manual, ad.ffn(manual, p["cas.s1.a.ffn.w1"], p["cas.s1.a.ffn.b1"],
                                  p["cas.s1.a.ffn.w2"], p["cas.s1.a.ffn.b2"])),
            p["cas.s1.a.ln2.g"], p["cas.s1.a.ln2.b"], model.config.ln_eps)
        np.testing.assert_allclose(out_a.data, manual.data, atol=1e-12)

    def test_cascade_symmetry_under_tied_sides_and_equal_inputs(self):
        model = sm.build_model(tiny_config(FusionKind.SNIFR))
        for name in list(model.params):
            if ".s1.b." in name:
                model.params[name].data = model.params[name.replace(".s1.b.", ".s1.a.")].data.copy()
        z = Tensor(np.random.default_rng(9).standard_normal((3, 8)))
        out_a, out_b = sm.cascade_step(model, z, z, stage=1, mode="eval")
        np.testing.assert_array_equal(out_a.data, out_b.data)

    def test_stage_parameters_are_independent(self):
        model = sm.build_model(tiny_config(FusionKind.SNIFR))
        s1 = model.params["cas.s1.a.attn.wq"].data
        s2 = model.params["cas.s2.a.attn.wq"].data
        assert not np.array_equal(s1, s2)


class TestForwardProperties:
    def test_eval_forward_deterministic(self):
        model = sm.build_model(tiny_config(FusionKind.SNIFR))
        records = make_batch(4, seed=13)
        o1 = sm.forward(model, records, mode="eval")
        o2 = sm.forward(model, records, mode="eval")
        np.testing.assert_array_equal(o1.logits.data, o2.logits.data)

    @pytest.mark.parametrize("kind", [FusionKind.V, FusionKind.LC, FusionKind.SNIFR])
    def test_batch_permutation_permutes_outputs(self, kind):
        model = sm.build_model(tiny_config(kind))
        records = make_batch(6, seed=17)
        perm = [3, 0, 5, 1, 4, 2]
        out = sm.forward(model, records, mode="eval").logits.data
        out_perm = sm.forward(model, [records[i] for i in perm], mode="eval").logits.data
        np.testing.assert_allclose(out_perm, out[perm], atol=1e-12)

    def test_argmax_invariant_under_constant_logit_shift(self):
        model = sm.build_model(tiny_config(FusionKind.EC))
        logits = sm.forward(model, make_batch(8, seed=19), mode="eval").logits.data
        shifted = logits + 123.45
        np.testing.assert_array_equal(logits.argmax(axis=1), shifted.argmax(axis=1))

    def test_pooled_fast_path_matches_sequence_path(self):
        for kind in (FusionKind.A, FusionKind.EC, FusionKind.SNIFR):
            model = sm.build_model(tiny_config(kind, seed=23))
            batch = Batch.from_records(make_batch(4, seed=29))
            fast_a, fast_v = sm._forward_pooled(model, batch, "eval", None)
            slow_a, slow_v = sm._forward_sequences(model, batch, "eval", None)
            for fast, slow in ((fast_a, slow_a), (fast_v, slow_v)):
                assert (fast is None) == (slow is None)
                if fast is not None:
                    np.testing.assert_allclose(fast.data, slow.data, rtol=1e-12, atol=1e-14)

    def test_multihead_pooled_path_matches_sequence_path(self):
        model = sm.build_model(tiny_config(FusionKind.SNIFR, n_heads=2, seed=31))
        batch = Batch.from_records(make_batch(3, seed=37))
        fast_a, fast_v = sm._forward_pooled(model, batch, "eval", None)
        slow_a, slow_v = sm._forward_sequences(model, batch, "eval", None)
        np.testing.assert_allclose(fast_a.data, slow_a.data, rtol=1e-12, atol=1e-14)
        np.testing.assert_allclose(fast_v.data, slow_v.data, rtol=1e-12, atol=1e-14)


class TestGradients:
    def _loss_closure(self, model, records, labels):
        def forward():
            out = sm.forward(model, records, mode="eval")
            return ad.cross_entropy(out.logits, labels)
        return forward

    def test_snifr_full_gradient_check_with_sequences(self):
        model = sm.build_model(tiny_config(FusionKind.SNIFR, dropout_p=0.0))
        records = make_batch(2, t_audio=2, t_video=3, seed=41)
        labels = [int(r.label) for r in records]
        report = ad.grad_check_report(self._loss_closure(model, records, labels),
                                      model.params, h=1e-5, coords_per_tensor=8)
        assert report[0][1] < 1e-4, f"worst offender: {report[0]}"

    def test_multihead_gradient_check(self):
        model = sm.build_model(tiny_config(FusionKind.CT, n_heads=2, dropout_p=0.0))
        records = make_batch(2, t_audio=3, t_video=2, seed=43)
        labels = [int(r.label) for r in records]
        err = ad.grad_check(self._loss_closure(model, records, labels),
                            model.params.values(), h=1e-5, coords_per_tensor=8)
        assert err < 1e-4


class TestCheckpoint:
    def test_round_trip_bitwise(self, tmp_path):
        model = sm.build_model(tiny_config(FusionKind.SNIFR, seed=47))
        rng = np.random.default_rng(0)
        for p in model.params.values():
            p.data += 0.01 * rng.standard_normal(p.data.shape)
        path = tmp_path / "model.ckpt"
        sm.save_checkpoint(model, str(path))
        loaded = sm.load_checkpoint(str(path))
        assert loaded.config == model.config
        assert list(loaded.params) == list(model.params)
        for name in model.params:
            assert loaded.params[name].data.tobytes() == model.params[name].data.tobytes()

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "junk.ckpt"
        path.write_bytes(b"NOPE" + b"\x00" * 64)
        with pytest.raises(ValueError, match="magic"):
            sm.load_checkpoint(str(path))

    def test_checkpointed_model_predicts_identically(self, tmp_path):
        model = sm.build_model(tiny_config(FusionKind.EC, seed=53))
        records = make_batch(3, seed=59)
        path = tmp_path / "m.ckpt"
        sm.save_checkpoint(model, str(path))
        loaded = sm.load_checkpoint(str(path))
        np.testing.assert_array_equal(
            sm.forward(model, records, mode="eval").logits.data,
            sm.forward(loaded, records, mode="eval").logits.data)
