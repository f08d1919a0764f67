import hashlib

import numpy as np
import pytest

from geomattn.autodiff import Tensor, check_gradients
from geomattn.autodiff import functional as F
from geomattn.losses import LossWeights
from geomattn.model import GeomAttnModel, ModelConfig
from geomattn.nn import Adam
from geomattn.training import Batch, NonFiniteLossError, load_checkpoint, save_checkpoint, train_step

WIDTHS = (4, 6, 8)


def model(seed=0, **kw):
    return GeomAttnModel(ModelConfig(n_ids=3, widths=WIDTHS, seed=seed, **kw))


def state_hash(m):
    h = hashlib.sha256()
    for name, arr in sorted(m.state_dict().items()):
        h.update(name.encode())
        h.update(np.ascontiguousarray(arr).tobytes())
    return h.hexdigest()


@pytest.fixture(scope="module")
def images():
    return np.random.default_rng(0).uniform(size=(4, 3, 32, 32))


class TestShapes:
    def test_attention_grid_is_input_over_eight(self, images):
        m = model()
        L = m.attn_encoder(Tensor(images))
        assert L.shape[-2:] == (4, 4)
        assert np.all(L.data >= 0)
        assert m.gb_stage1(Tensor(images)).shape[-2:] == (4, 4)

    def test_rejects_bad_inputs(self):
        m = model()
        with pytest.raises(ValueError, match="divisible"):
            m.forward_train(np.zeros((1, 3, 20, 20)))
        with pytest.raises(ValueError, match="batch"):
            m.forward_train(np.zeros((3, 32, 32)))

    def test_attention_shape_mismatch_names_both_shapes(self, images):
        m = model()
        with pytest.raises(ValueError) as err:
            m.forward_train(images, attention=np.full((4, 3, 3), 1 / 9))
        assert "(4, 3, 3)" in str(err.value) and "(4, 8, 4, 4)" in str(err.value)


class TestAttentionWeighting:
    def test_uniform_attention_scales_stage1(self, images):
        m = model()
        x1 = m.gb_stage1(Tensor(images)).data
        q = np.full((4, 4, 4), 1 / 16)
        weighted = x1 * q[:, None]
        np.testing.assert_allclose(weighted, x1 / 16)
        out = m.forward_train(images, attention=q)
        tail = F.global_avg_pool(m.gfb_tail(Tensor(x1 / 16))).data
        np.testing.assert_allclose(out.f_gfb.data, tail, atol=1e-12)

    def test_one_hot_attention_selects_location(self, images):
        m = model()
        x1 = m.gb_stage1(Tensor(images)).data
        q = np.zeros((4, 4, 4))
        q[:, 1, 2] = 1.0
        pooled = F.global_avg_pool(Tensor(x1 * q[:, None])).data
        np.testing.assert_allclose(pooled, x1[:, :, 1, 2] / 16, atol=1e-15)

    def test_uniform_preset_wiring(self, images):
        m = model(use_iam=False)
        out = m.forward_train(images)
        assert out.maps is None
        np.testing.assert_allclose(out.attention.data, 1 / 16)

    def test_gb_only_has_no_gfb(self, images):
        out = model(use_gfb=False).forward_train(images)
        assert out.f_gfb is None and out.logits_gfb is None


class TestInference:
    def test_embeddings_are_deterministic(self, images):
        m = model()
        a = m.forward_infer(images)
        b = m.forward_infer(images)
        assert np.array_equal(a.concat, b.concat)
        assert a.concat.shape == (4, 2 * WIDTHS[2])
        np.testing.assert_array_equal(a.concat, np.concatenate([a.f_gb, a.f_gfb], axis=1))

    def test_self_similarity(self, images):
        e = model().forward_infer(images).concat
        cos = (e * e).sum(1) / np.linalg.norm(e, axis=1) ** 2
        np.testing.assert_allclose(cos, 1.0, atol=1e-9)

    def test_inference_mutates_nothing(self, images):
        m = model()
        before = state_hash(m)
        m.forward_infer(images)
        m.attention_maps(images)
        assert state_hash(m) == before
        assert m.training

    def test_chunking_does_not_change_results(self, images):
        m = model()
        # BLAS blocking may differ with the batch size, so allow rounding noise
        np.testing.assert_allclose(m.forward_infer(images, chunk=1).concat,
                                   m.forward_infer(images, chunk=4).concat, atol=1e-12)


def test_full_forward_backward_gradient():
    rng = np.random.default_rng(1)
    m = model(seed=2)
    x = rng.uniform(0.1, 1.0, size=(2, 3, 32, 32))
    w_gb, w_gfb = rng.normal(size=(2, WIDTHS[2])), rng.normal(size=(2, WIDTHS[2]))
    buffers = {n: b.copy() for n, b in m.named_buffers()}

    def restore():
        for n, b in m.named_buffers():
            b[...] = buffers[n]

    def readout(p):
        restore()
        out = m.forward_train(p)
        return (out.f_gb * w_gb).sum() + (out.f_gfb_bn * w_gfb).sum()

    probe = Tensor(x, requires_grad=True)
    idx = np.ravel_multi_index(([0, 1, 0, 1], [0, 2, 1, 0], [5, 20, 30, 0], [7, 11, 30, 16]),
                               x.shape)
    assert check_gradients(readout, probe, 1e-5, indices=idx) < 1e-4
    # encoder kernels act on the GFB only through Q, so read Q out directly
    w_q = rng.normal(size=(2, 4, 4))

    def attention_readout(p):
        restore()
        return (m.forward_train(Tensor(x)).attention * w_q).sum()

    kernel = m.attn_encoder.parameters()[0]
    kidx = np.ravel_multi_index(([0, 2, 3], [0, 1, 2], [1, 0, 2], [1, 2, 0]), kernel.shape)
    assert check_gradients(attention_readout, kernel, 1e-5, indices=kidx) < 1e-4


class TestTrainStep:
    def batch(self, seed=0):
        rng = np.random.default_rng(seed)
        imgs = rng.uniform(size=(6, 3, 32, 32))
        return Batch(imgs, imgs, np.array([0, 0, 1, 1, 2, 2]))

    def test_zero_weights_leave_parameters_unchanged(self):
        m = model()
        opt = Adam(m.parameters(), lr=1e-2, weight_decay=0.0)
        before = {n: p.data.copy() for n, p in m.named_parameters()}
        w = LossWeights(0, 0, 0, 0, 0)
        train_step(self.batch(), m, opt, w, np.random.default_rng(0))
        assert all(np.array_equal(p.data, before[n]) for n, p in m.named_parameters())

    def test_step_is_reproducible(self):
        reps = []
        for _ in range(2):
            m = model(seed=3)
            opt = Adam(m.parameters(), lr=1e-3)
            reps.append(train_step(self.batch(), m, opt, LossWeights(), np.random.default_rng(4)))
        assert reps[0].to_json() == reps[1].to_json()

    def test_all_five_terms_reported(self):
        m = model()
        rep = train_step(self.batch(), m, Adam(m.parameters()), LossWeights(),
                         np.random.default_rng(0))
        assert all(v > 0 for v in rep.terms())
        assert rep.total == pytest.approx(sum(a * b for a, b in zip(LossWeights().as_tuple(),
                                                                    rep.terms())), abs=1e-12)

    def test_non_finite_loss_names_the_term(self):
        m = model()
        m.rot_head.gamma_raw.data[...] = np.nan
        with pytest.raises(NonFiniteLossError) as err, np.errstate(invalid="ignore"):
            train_step(self.batch(), m, Adam(m.parameters()), LossWeights(),
                       np.random.default_rng(0))
        assert err.value.term == "l_slb"

    def test_loss_decreases_on_two_identities(self):
        rng = np.random.default_rng(5)
        protos = rng.uniform(size=(2, 3, 32, 32))
        m = GeomAttnModel(ModelConfig(n_ids=2, widths=WIDTHS, seed=6))
        opt = Adam(m.parameters(), lr=3e-3)
        totals = []
        for step in range(50):
            imgs = np.repeat(protos, 4, axis=0) + rng.normal(0, 0.05, size=(8, 3, 32, 32))
            batch = Batch(imgs, imgs, np.repeat([0, 1], 4))
            totals.append(train_step(batch, m, opt, LossWeights(), rng, step).total)
        assert np.mean(totals[-10:]) < np.mean(totals[:10])


class TestCheckpoint:
    def test_round_trip_restores_outputs(self, images, tmp_path):
        m = model(seed=4, attn_shift=0.5)
        m.forward_train(images)  # move the running statistics off their defaults
        save_checkpoint(tmp_path / "ck", m, Adam(m.parameters()))
        back = load_checkpoint(tmp_path / "ck" / "params.gatn")
        assert back.cfg == m.cfg
        assert state_hash(back) == state_hash(m)
        assert np.array_equal(back.forward_infer(images).concat, m.forward_infer(images).concat)

    def test_identity_count_is_checked(self, tmp_path):
        save_checkpoint(tmp_path, model())
        with pytest.raises(ValueError, match="3 identities"):
            load_checkpoint(tmp_path, n_ids=5)


def test_attention_shift_sets_final_encoder_bias():
    m = model(attn_shift=1.5)
    np.testing.assert_array_equal(m.attn_encoder.layers[-1].bn.bias.data, -1.5)
    assert np.all(m.attn_encoder.layers[0].bn.bias.data == 0)
