import struct

import numpy as np
import pytest

from s4d import autodiff as ad
from s4d.backbone import (CheckpointError, ModelConfig, ModelConfigError, S4DModel, count_params,
                          load_checkpoint, model_from_checkpoint, moae_layer, save_checkpoint, standard_layer)
from s4d.gradsuite import tiny_config
from s4d.masking import sample_mask


def small(**kw):
    base = dict(clip_frames=4, image_size=16, channels=3, tubelet_t=2, patch=8, dim=32, depth=4, heads=4,
                moae_layers=2, n_experts=4, decoder_width=16)
    base.update(kw)
    return ModelConfig(**base)


def test_bad_configs():
    with pytest.raises(ModelConfigError):
        ModelConfig(dim=30, heads=4)
    with pytest.raises(ModelConfigError):
        ModelConfig(moae_layers=7)
    with pytest.raises(ModelConfigError):
        ModelConfig(moae_position="top")
    with pytest.raises(ModelConfigError):
        ModelConfig(moae_layers=4, moae_position="alternate")


@pytest.mark.parametrize("pos,kinds", [
    ("later", "SSSMMM"), ("early", "MMMSSS"), ("middle", "SMMMSS"), ("alternate", "SMSMSM"),
])
def test_placement(pos, kinds):
    cfg = ModelConfig(moae_position=pos)
    got = "".join("M" if k == "moae" else "S" for k in cfg.layer_kinds())
    assert got == kinds
    assert got.count("M") == cfg.moae_layers


def test_default_replaces_latter_half():
    cfg = ModelConfig()
    assert cfg.moae_layer_indices() == [3, 4, 5]
    assert cfg.bottleneck == cfg.dim // 4


def test_param_count_difference():
    cfg = ModelConfig()
    m = S4DModel(cfg, seed=0)
    d, r, n = cfg.dim, cfg.bottleneck, cfg.n_experts
    extra = count_params(m.params, "enc.5.") - count_params(m.params, "enc.0.")
    assert extra == n * (2 * d * r + r + d) + d * n
    names = list(m.params)
    assert len(names) == len(set(names))


def test_standard_layer_identity_at_zero_projections():
    cfg = small()
    m = S4DModel(cfg, seed=1)
    for name in ("enc.0.attn.o.w", "enc.0.attn.o.b", "enc.0.ffn.fc2.w", "enc.0.ffn.fc2.b"):
        m.params[name].data[...] = 0
    x = ad.Tensor(np.random.default_rng(0).standard_normal((2, 5, cfg.dim)).astype(np.float32))
    y = standard_layer(x, m.params, "enc.0", cfg.heads)
    assert y.shape == x.shape and y.data.tobytes() == x.data.tobytes()


def test_moae_branch_is_layernorm_at_zero_adapters():
    cfg = small()
    m = S4DModel(cfg, seed=2)
    i = cfg.moae_layer_indices()[0]
    for j in range(cfg.n_experts):
        m.params[f"enc.{i}.moae.expert{j}.w2"].data[...] = 0
        m.params[f"enc.{i}.moae.expert{j}.b2"].data[...] = 0
    x = ad.Tensor(np.random.default_rng(1).standard_normal((2, 6, cfg.dim)).astype(np.float32))
    probe = {}
    out, dec = moae_layer(x, m.params, f"enc.{i}", cfg, probe=probe)
    assert out.shape == x.shape
    assert np.allclose(probe["x_s"].data, probe["shared"].data, atol=1e-6)
    assert dec.selected.shape == (12, cfg.top_k)


def test_branches_share_normalised_input():
    cfg = small()
    m = S4DModel(cfg, seed=3)
    i = cfg.moae_layer_indices()[0]
    x = ad.Tensor(np.random.default_rng(2).standard_normal((1, 4, cfg.dim)).astype(np.float32))
    a, b = {}, {}
    moae_layer(x, m.params, f"enc.{i}", cfg, probe=a)
    for j in range(cfg.n_experts):
        m.params[f"enc.{i}.moae.expert{j}.w2"].data[...] = 0
    m.params[f"enc.{i}.ffn.fc2.w"].data[...] = 0
    moae_layer(x, m.params, f"enc.{i}", cfg, probe=b)
    assert a["shared"].data.tobytes() == b["shared"].data.tobytes()


def test_checkpoint_round_trip(tmp_path):
    cfg = small()
    m = S4DModel(cfg, seed=4)
    path = tmp_path / "m.s4dc"
    save_checkpoint(path, m.params, {"model": cfg.to_dict()})
    m2 = model_from_checkpoint(path)
    assert list(m2.params) == list(m.params)
    for k in m.params:
        assert m2.params[k].data.tobytes() == m.params[k].data.tobytes()
    clips = np.random.default_rng(0).random((2, 4, 16, 16, 3)).astype(np.float32)
    assert m.embed(clips)[0].data.tobytes() == m2.embed(clips)[0].data.tobytes()


def test_checkpoint_layout(tmp_path):
    params = {"w": ad.Tensor(np.arange(6, dtype=np.float32).reshape(2, 3))}
    path = tmp_path / "x.s4dc"
    save_checkpoint(path, params, {})
    buf = path.read_bytes()
    assert buf[:4] == b"S4DC"
    assert struct.unpack_from("<H", buf, 4)[0] == 1
    assert buf.endswith(np.arange(6, dtype="<f4").tobytes())
    back, meta = load_checkpoint(path)
    assert meta == {} and back["w"].data.tolist() == params["w"].data.tolist()


def test_checkpoint_corrupt(tmp_path):
    path = tmp_path / "bad.s4dc"
    path.write_bytes(b"NOPE" + bytes(10))
    with pytest.raises(CheckpointError):
        load_checkpoint(path)
    good = tmp_path / "good.s4dc"
    save_checkpoint(good, {"a": ad.Tensor(np.ones(2, np.float32))})
    path.write_bytes(good.read_bytes() + b"x")
    with pytest.raises(CheckpointError):
        load_checkpoint(path)


def test_decoder_shapes_and_permutation_invariance():
    cfg = small()
    m = S4DModel(cfg, seed=5)
    clips = np.random.default_rng(3).random((1, 4, 16, 16, 3)).astype(np.float32)
    tb = m.tokenize(clips)
    n = tb.n_tokens
    mask = sample_mask(n, 0.5, seed=1, batch=1)
    idx = mask.visible_index()
    vis = ad.Tensor(tb.tokens.data[:, idx[0]])
    latent = m.encode(vis, use_moae=False).latent
    pred = m.decode(latent, idx, mask, tb.grid)
    assert pred.shape == (1, n, cfg.patch_dim)
    perm = np.random.default_rng(4).permutation(idx.shape[1])
    pred_p = m.decode(ad.Tensor(latent.data[:, perm]), idx[:, perm], mask, tb.grid)
    assert np.allclose(pred.data, pred_p.data, atol=1e-5)


def test_decode_without_masking():
    cfg = small()
    m = S4DModel(cfg, seed=6)
    clips = np.random.default_rng(5).random((1, 4, 16, 16, 3)).astype(np.float32)
    tb = m.tokenize(clips)
    mask = sample_mask(tb.n_tokens, 0.0, seed=0, batch=1)
    m.params["dec.mask_token"].data[...] = 1e6  # would explode if used
    latent = m.encode(tb.tokens, use_moae=False).latent
    pred = m.decode(latent, mask.visible_index(), mask, tb.grid)
    assert np.all(np.abs(pred.data) < 1e3)


def test_heads_disjoint_and_sized():
    cfg = small(n_classes_sfer=5, n_classes_dfer=3)
    m = S4DModel(cfg, seed=7)
    phi = ad.Tensor(np.random.default_rng(6).standard_normal((4, cfg.dim)).astype(np.float32))
    s = m.classify(phi, "sfer").data.copy()
    assert s.shape == (4, 5) and m.classify(phi, "dfer").shape == (4, 3)
    for k in m.head_params("dfer"):
        m.params[k].data += 1.0
    assert m.classify(phi, "sfer").data.tobytes() == s.tobytes()
    assert not set(m.head_params("sfer")) & set(m.head_params("dfer"))
    with pytest.raises(ValueError):
        m.classify(phi, "other")


def test_hidden_head_variant():
    m = S4DModel(small(head_hidden=8), seed=8)
    phi = ad.Tensor(np.zeros((2, 32), np.float32))
    assert m.classify(phi, "sfer").shape == (2, 6)


def test_logits_finite_on_random_clips():
    cfg = ModelConfig()
    m = S4DModel(cfg, seed=9)
    clips = np.random.default_rng(7).random((100, 8, 32, 32, 3)).astype(np.float32)
    for i in range(0, 100, 25):
        phi, _ = m.embed(clips[i:i + 25])
        assert np.all(np.isfinite(m.classify(phi, "dfer").data))


def test_images_and_videos_share_encoder():
    cfg = small()
    m = S4DModel(cfg, seed=10)
    rng = np.random.default_rng(8)
    img = rng.random((2, 1, 16, 16, 3)).astype(np.float32)
    phi_i, enc_i = m.embed(img)
    phi_v, enc_v = m.embed(np.repeat(img, 2, axis=1)[:, :2])
    assert phi_i.data.tobytes() == phi_v.data.tobytes()
    assert [l for l, _ in enc_i.gates] == cfg.moae_layer_indices()


def test_model_gradcheck():
    cfg = tiny_config()
    assert cfg.layer_kinds() == ["standard", "moae"]
    rng = np.random.default_rng(0)
    with ad.precision(np.float64):
        m = S4DModel(cfg, seed=0)
        clips = rng.random((2, 2, 8, 8, 2))
        labels = np.array([1, 3])

        def loss():
            phi, _ = m.embed(clips)
            return ad.cross_entropy(m.classify(phi, "dfer"), labels)

        def routing():
            return tuple(d.selected.tobytes() for _, d in m.embed(clips)[1].gates)

        params = [m.params[k] for k in m.params if k.startswith(("patch", "enc.", "head_dfer"))]
        assert ad.gradcheck(loss, params, max_coords=5, guard=routing) < 1e-4


def test_load_matching_skips_moae_and_heads():
    src = S4DModel(small(moae_layers=0), seed=11)
    dst = S4DModel(small(), seed=12)
    copied = dst.load_matching(src.params)
    assert copied and all(k.startswith(("patch.", "enc.")) for k in copied)
    assert not any(".moae." in k for k in copied)
    assert dst.params["enc.0.attn.q.w"].data.tobytes() == src.params["enc.0.attn.q.w"].data.tobytes()
