import numpy as np
import pytest

from mddnet.losses import reconstruction_loss, restoration_loss
from mddnet.model import MDDNet
from mddnet.tensor import Tensor, backward, get_tape
from mddnet.vit import (Decoder, ModelConfig, Neck, PatchEmbed, TeacherEncoder, spatial_to_tokens,
                        tokens_to_spatial)


def small_cfg(**kw):
    base = dict(image_size=16, patch_size=4, embed_dim=16, num_heads=2, teacher_blocks=4,
                teacher_stages=4, decoder_blocks=3, mlp_ratio=2.0, num_classes=2, seed=0)
    base.update(kw)
    return ModelConfig(**base)


@pytest.mark.parametrize("kw", [dict(image_size=30, patch_size=4), dict(teacher_blocks=10),
                                dict(decoder_blocks=8), dict(embed_dim=10, num_heads=4)])
def test_config_invariants(kw):
    with pytest.raises(ValueError):
        small_cfg(**kw)


def test_token_count():
    cfg = ModelConfig(image_size=32, patch_size=4)
    assert cfg.num_tokens == 64
    emb = PatchEmbed(cfg, np.random.default_rng(0))
    assert emb(Tensor(np.zeros((1, 3, 32, 32), np.float32))).shape == (1, 64, cfg.embed_dim)


def test_wrong_image_size():
    cfg = small_cfg()
    with pytest.raises(ValueError):
        PatchEmbed(cfg, np.random.default_rng(0))(Tensor(np.zeros((1, 3, 20, 20), np.float32)))


def test_zero_image_gives_positional_embedding():
    cfg = small_cfg()
    emb = PatchEmbed(cfg, np.random.default_rng(0))
    out = emb(Tensor(np.zeros((2, 3, 16, 16), np.float32))).data
    np.testing.assert_array_equal(out, np.broadcast_to(emb.pos.data, out.shape))


def test_patch_permutation_permutes_tokens():
    cfg = small_cfg()
    emb = PatchEmbed(cfg, np.random.default_rng(0))
    img = np.random.default_rng(1).normal(size=(1, 3, 16, 16)).astype(np.float32)
    swapped = img.copy()
    # swap patch (0,0) with patch (2,3)
    swapped[..., 0:4, 0:4], swapped[..., 8:12, 12:16] = img[..., 8:12, 12:16], img[..., 0:4, 0:4]
    a = (emb(Tensor(img)) - emb.pos).data[0]
    b = (emb(Tensor(swapped)) - emb.pos).data[0]
    j = 2 * 4 + 3
    np.testing.assert_allclose(b[0], a[j], atol=1e-6)
    np.testing.assert_allclose(b[j], a[0], atol=1e-6)
    rest = [i for i in range(16) if i not in (0, j)]
    np.testing.assert_allclose(b[rest], a[rest], atol=1e-6)


def test_tokens_spatial_roundtrip_row_major():
    t = np.arange(2 * 9 * 4, dtype=np.float64).reshape(2, 9, 4)
    s = tokens_to_spatial(Tensor(t)).data
    assert s.shape == (2, 4, 3, 3)
    np.testing.assert_array_equal(s[1, :, 1, 2], t[1, 5])
    np.testing.assert_array_equal(spatial_to_tokens(Tensor(s)).data, t)


def test_teacher_stage_boundaries_and_shapes():
    cfg = ModelConfig(image_size=16, patch_size=4, embed_dim=16, num_heads=2)
    teacher = TeacherEncoder(cfg)
    assert teacher.stage_ends == [3, 6, 9, 12]
    pyr = teacher(Tensor(np.zeros((1, 3, 16, 16), np.float32)))
    assert [s.shape for s in pyr.spatial] == [(1, 16, 4, 4)] * 3
    assert pyr.tokens.shape == (1, 16, 16)


def test_teacher_batch_consistency():
    cfg = small_cfg()
    teacher = TeacherEncoder(cfg)
    img = np.random.default_rng(2).normal(size=(1, 3, 16, 16)).astype(np.float32)
    pyr = teacher(Tensor(np.concatenate([img, img])))
    for s in pyr.spatial:
        np.testing.assert_array_equal(s.data[0], s.data[1])


def test_teacher_is_seeded():
    a = TeacherEncoder(small_cfg()).parameters()
    b = TeacherEncoder(small_cfg()).parameters()
    for x, y in zip(a, b):
        np.testing.assert_array_equal(x.data, y.data)
    assert all(not p.requires_grad for p in a)


def test_neck_identity_and_bias():
    neck = Neck(8, np.float64)
    x = np.random.default_rng(0).normal(size=(2, 5, 8))
    np.testing.assert_array_equal(neck(Tensor(x)).data, x)
    neck.weight.data[...] = 0
    neck.bias.data[...] = np.arange(8)
    np.testing.assert_array_equal(neck(Tensor(x)).data, np.broadcast_to(np.arange(8.0), x.shape))


def test_decoder_shapes_and_determinism():
    cfg = small_cfg(decoder_blocks=6)
    x = Tensor(np.random.default_rng(0).normal(size=(2, 16, 16)).astype(np.float32))
    d1, d2 = Decoder(cfg, seed=5), Decoder(cfg, seed=5)
    o1, o2 = d1(x), d2(x)
    assert [o.shape for o in o1] == [(2, 16, 4, 4)] * 3
    for a, b in zip(o1, o2):
        np.testing.assert_array_equal(a.data, b.data)
    for a, b in zip(o1, d1(x)):
        np.testing.assert_array_equal(a.data, b.data)


def _step_inputs(cfg, bs=2):
    rng = np.random.default_rng(0)
    x_n = rng.normal(size=(bs, 3, cfg.image_size, cfg.image_size)).astype(np.float32)
    x_a = x_n + rng.normal(scale=0.5, size=x_n.shape).astype(np.float32)
    mask = (rng.random((bs, cfg.image_size, cfg.image_size)) > 0.7).astype(np.float32)
    return x_n, x_a, mask, [0, 1][:bs]


def test_teacher_receives_no_gradient():
    cfg = small_cfg()
    model = MDDNet(cfg, num_slots=8)
    out = model.training_step(*_step_inputs(cfg))
    backward(out.report.total)
    assert all(p.grad is None for p in model.teacher.parameters())
    assert all(p.grad is not None for _, p in model.trainable())


@pytest.mark.parametrize("which", ["restoration", "reconstruction"])
def test_neck_gets_gradient_from_each_branch(which):
    cfg = small_cfg()
    model = MDDNet(cfg, num_slots=8)
    x_n, x_a, *_ = _step_inputs(cfg)
    get_tape().clear()
    from mddnet.memory import retrieve
    t_n, t_a = model.encode(x_n), model.encode(x_a)
    src = t_a if which == "restoration" else t_n
    f, _ = retrieve(src.tokens, model.memory)
    restored = model.restoration(model.neck(f))
    loss = (restoration_loss if which == "restoration" else reconstruction_loss)(restored, t_n.spatial)
    model.zero_grad()
    backward(loss)
    assert np.abs(model.neck.weight.grad).sum() > 0
