import numpy as np
import pytest
import torch

from duosplat.geometry import PointMap
from duosplat.pointnet import (NetConfig, PointMapNet, PointMapPrediction, TokenGrid,
                               config_fingerprint, stage1_loss)

CFG = NetConfig(image_size=32, patch_size=8, embed_dim=64, n_heads=4,
                n_encoder_blocks=2, n_decoder_blocks=2)


def make_net(cfg=CFG, seed=0):
    torch.manual_seed(seed)
    return PointMapNet(cfg)


def rand_img(rng, size=32):
    return rng.random((size, size, 3))


# -- NetConfig ---------------------------------------------------------------


def test_config_rejects_indivisible_patch():
    with pytest.raises(ValueError):
        NetConfig(image_size=30, patch_size=8)


def test_config_rejects_shallow_decoder():
    with pytest.raises(ValueError):
        NetConfig(n_decoder_blocks=1)


def test_config_rejects_unknown_tags():
    with pytest.raises(ValueError):
        NetConfig(fusion="max")
    with pytest.raises(ValueError):
        NetConfig(head_type="dpt")


def test_fingerprint_stable_and_sensitive():
    a = config_fingerprint(NetConfig())
    b = config_fingerprint(NetConfig())
    c = config_fingerprint(NetConfig(embed_dim=64))
    assert a == b and a != c and len(a) == 16


# -- encode_pair -------------------------------------------------------------


def test_encoder_shared_weights_identical_images():
    net = make_net()
    rng = np.random.default_rng(0)
    img = rand_img(rng)
    f, b = net.encode_pair(img, img)
    assert len(f) == CFG.n_encoder_blocks
    for gf, gb in zip(f, b):
        assert torch.equal(gf.tokens, gb.tokens)


def test_encoder_token_count():
    net = make_net()
    rng = np.random.default_rng(1)
    f, _ = net.encode_pair(rand_img(rng), rand_img(rng))
    assert f[-1].tokens.shape == (CFG.n_tokens, CFG.embed_dim)
    assert CFG.n_tokens == (32 // 8) ** 2


def test_encoder_permuting_inputs_permutes_outputs():
    net = make_net()
    rng = np.random.default_rng(2)
    a, b = rand_img(rng), rand_img(rng)
    fa, fb = net.encode_pair(a, b)
    ga, gb = net.encode_pair(b, a)
    for x, y in zip(fa, gb):
        assert torch.equal(x.tokens, y.tokens)
    for x, y in zip(fb, ga):
        assert torch.equal(x.tokens, y.tokens)


def test_encoder_rejects_resolution_mismatch():
    net = make_net()
    rng = np.random.default_rng(3)
    with pytest.raises(ValueError):
        net.encode_pair(rng.random((16, 16, 3)), rand_img(rng))


# -- decode_pair -------------------------------------------------------------


def test_decoder_block_count():
    net = make_net()
    rng = np.random.default_rng(4)
    f, b = net.encode_pair(rand_img(rng), rand_img(rng))
    fd, bd = net.decode_pair(f, b)
    assert len(fd) == CFG.n_decoder_blocks and len(bd) == CFG.n_decoder_blocks
    assert all(isinstance(g, TokenGrid) and g.block_index == i for i, g in enumerate(fd))


def test_zeroed_cross_attention_decouples_streams():
    net = make_net()
    with torch.no_grad():
        for blk in net.decoder:
            blk.cross.in_proj_weight.zero_()
            blk.cross.in_proj_bias.zero_()
            blk.cross.out_proj.weight.zero_()
            blk.cross.out_proj.bias.zero_()
    rng = np.random.default_rng(5)
    front = rand_img(rng)
    with torch.no_grad():
        f1, _ = net.decode_pair(*net.encode_pair(front, rand_img(rng)))
        f2, _ = net.decode_pair(*net.encode_pair(front, rand_img(rng)))
    for x, y in zip(f1, f2):
        assert torch.equal(x.tokens, y.tokens)


def test_gradient_flows_across_streams_through_cross_attention():
    net = make_net()
    rng = np.random.default_rng(6)
    back = torch.as_tensor(rand_img(rng), dtype=torch.float32, ).requires_grad_(True)
    front = torch.as_tensor(rand_img(rng), dtype=torch.float32)
    pred = net.predict(front, back)
    pred.maps["front"].sum().backward()
    assert back.grad is not None
    assert float(back.grad.abs().sum()) > 0.0


# -- side_tokens -------------------------------------------------------------


def _token_blocks(rng, n_blocks=2, t=16, c=64):
    return [TokenGrid(tokens=torch.as_tensor(rng.normal(size=(t, c)), dtype=torch.float32),
                      block_index=i) for i in range(n_blocks)]


def test_side_tokens_average_idempotent_and_symmetric():
    net = make_net()
    rng = np.random.default_rng(7)
    f = _token_blocks(rng)
    same = net.side_tokens(f, f, fusion="average")
    for s, g in zip(same, f):
        assert torch.equal(s.tokens, g.tokens)
    b = _token_blocks(rng)
    ab = net.side_tokens(f, b, fusion="average")
    ba = net.side_tokens(b, f, fusion="average")
    for x, y in zip(ab, ba):
        assert torch.equal(x.tokens, y.tokens)


def test_side_tokens_average_matches_elementwise_oracle():
    net = make_net()
    rng = np.random.default_rng(8)
    f, b = _token_blocks(rng), _token_blocks(rng)
    fused = net.side_tokens(f, b, fusion="average")
    for s, gf, gb in zip(fused, f, b):
        oracle = (gf.tokens.numpy() + gb.tokens.numpy()) / 2.0
        np.testing.assert_allclose(s.tokens.numpy(), oracle, atol=1e-7)


def test_side_tokens_concat_mode():
    net = make_net(NetConfig(image_size=32, patch_size=8, embed_dim=64, n_heads=4,
                             n_encoder_blocks=2, n_decoder_blocks=2, fusion="concat"))
    rng = np.random.default_rng(9)
    f, b = _token_blocks(rng), _token_blocks(rng)
    fused = net.side_tokens(f, b)
    assert all(s.tokens.shape == (16, 64) for s in fused)


def test_side_tokens_rejects_unknown_fusion_and_length_mismatch():
    net = make_net()
    rng = np.random.default_rng(10)
    f, b = _token_blocks(rng), _token_blocks(rng)
    with pytest.raises(ValueError):
        net.side_tokens(f, b, fusion="sum")
    with pytest.raises(ValueError):
        net.side_tokens(f[:1], b)


# -- predict -----------------------------------------------------------------


def test_predict_shapes_and_finiteness():
    net = make_net()
    gray = np.full((32, 32, 3), 0.5)
    with torch.no_grad():
        pred = net.predict(gray, gray)
    assert set(pred.maps) == {"front", "back", "left", "right"}
    for v in pred.maps:
        assert pred.maps[v].shape == (32, 32, 3)
        assert pred.confidences[v].shape == (32, 32)
        assert torch.isfinite(pred.maps[v]).all()
        assert torch.all((pred.confidences[v] > 0) & (pred.confidences[v] < 1))
    assert float(pred.delta) > 0


def test_delta_positive_for_any_parameter():
    net = make_net()
    for val in (-20.0, 0.0, 5.0):
        with torch.no_grad():
            net.log_delta.fill_(val)
        assert float(net.delta.detach()) > 0


def test_multiscale_head_shapes():
    net = make_net(NetConfig(image_size=32, patch_size=8, embed_dim=64, n_heads=4,
                             n_encoder_blocks=2, n_decoder_blocks=2, head_type="multiscale"))
    rng = np.random.default_rng(11)
    with torch.no_grad():
        pred = net.predict(rand_img(rng), rand_img(rng))
    assert pred.maps["left"].shape == (32, 32, 3)


# -- stage1_loss -------------------------------------------------------------


def _perfect_prediction(rng, shape=(4, 4)):
    maps, confs, gt_pts, gt_masks = {}, {}, {}, {}
    for v in ("front", "back", "left", "right"):
        pts = rng.normal(size=shape + (3,))
        mask = rng.random(shape) > 0.4
        maps[v] = torch.as_tensor(pts, dtype=torch.float32)
        conf = np.where(mask, 1.0 - 1e-6, 1e-6)
        confs[v] = torch.as_tensor(conf, dtype=torch.float32)
        gt_pts[v] = PointMap(points=np.where(mask[..., None], pts, 0.0), valid=mask)
        gt_masks[v] = mask
    pred = PointMapPrediction(maps=maps, confidences=confs, delta=torch.tensor(1.0))
    return pred, gt_pts, gt_masks


def test_stage1_loss_zero_at_perfect_prediction():
    rng = np.random.default_rng(12)
    pred, gt_pts, gt_masks = _perfect_prediction(rng)
    total, parts = stage1_loss(pred, gt_pts, gt_masks)
    assert float(parts["reg"]) < 1e-10
    assert float(parts["conf"]) < 1e-5
    assert float(total) < 1e-5


def test_stage1_loss_quadratic_in_offset():
    rng = np.random.default_rng(13)
    pred, gt_pts, gt_masks = _perfect_prediction(rng)
    def with_offset(eps):
        maps = {v: pred.maps[v] + eps for v in pred.maps}
        p = PointMapPrediction(maps=maps, confidences=pred.confidences, delta=pred.delta)
        return float(stage1_loss(p, gt_pts, gt_masks)[1]["reg"])
    r1, r2 = with_offset(0.01), with_offset(0.02)
    assert abs(r2 / r1 - 4.0) < 1e-4


def test_stage1_loss_matches_scalar_loop_oracle():
    rng = np.random.default_rng(14)
    views = ("front", "back", "left", "right")
    maps = {v: torch.as_tensor(rng.normal(size=(4, 4, 3)), dtype=torch.float64) for v in views}
    confs = {v: torch.as_tensor(rng.uniform(0.05, 0.95, size=(4, 4)), dtype=torch.float64)
             for v in views}
    gt_pts = {v: PointMap(points=rng.normal(size=(4, 4, 3)), valid=rng.random((4, 4)) > 0.5)
              for v in views}
    gt_masks = {v: gt_pts[v].valid for v in views}
    delta = 1.3
    pred = PointMapPrediction(maps=maps, confidences=confs,
                              delta=torch.tensor(delta, dtype=torch.float64))

    # independent scalar-loop oracle
    sq_sum, n_valid, bce_sum, n_pix = 0.0, 0, 0.0, 0
    for v in views:
        for i in range(4):
            for j in range(4):
                m = bool(gt_masks[v][i, j])
                if m:
                    for k in range(3):
                        d = delta * float(maps[v][i, j, k]) - gt_pts[v].points[i, j, k]
                        sq_sum += d * d
                        n_valid += 1
                c = min(max(float(confs[v][i, j]), 1e-6), 1 - 1e-6)
                bce_sum += -(np.log(c) if m else np.log(1 - c))
                n_pix += 1
    expect_reg = sq_sum / n_valid
    expect_conf = bce_sum / n_pix

    total, parts = stage1_loss(pred, gt_pts, gt_masks)
    assert abs(float(parts["reg"]) - expect_reg) < 1e-9
    assert abs(float(parts["conf"]) - expect_conf) < 1e-9
    assert abs(float(total) - (expect_reg + expect_conf)) < 1e-9


def test_stage1_loss_rejects_no_valid_pixels():
    rng = np.random.default_rng(15)
    pred, gt_pts, gt_masks = _perfect_prediction(rng)
    empty = {v: np.zeros((4, 4), dtype=bool) for v in gt_masks}
    empty_pts = {v: PointMap(points=np.zeros((4, 4, 3)), valid=empty[v]) for v in gt_pts}
    with pytest.raises(ValueError):
        stage1_loss(pred, empty_pts, empty)


def test_stage1_loss_finite_difference_gradient():
    net = make_net(seed=1).double()  # 64-bit for a clean central difference
    rng = np.random.default_rng(16)
    front, back = rand_img(rng), rand_img(rng)
    gt_pts = {v: PointMap(points=rng.normal(size=(32, 32, 3)),
                          valid=rng.random((32, 32)) > 0.5)
              for v in ("front", "back", "left", "right")}
    gt_masks = {v: gt_pts[v].valid for v in gt_pts}

    loss = stage1_loss(net.predict(front, back), gt_pts, gt_masks)[0]
    net.zero_grad()
    loss.backward()

    param = net.heads["front"].proj.weight
    flat = param.data.reshape(-1)
    grad = param.grad.reshape(-1)
    eps = 1e-3
    idx = rng.choice(flat.numel(), size=8, replace=False)
    for j in idx:
        orig = float(flat[j])
        flat[j] = orig + eps
        with torch.no_grad():
            up = float(stage1_loss(net.predict(front, back), gt_pts, gt_masks)[0])
        flat[j] = orig - eps
        with torch.no_grad():
            dn = float(stage1_loss(net.predict(front, back), gt_pts, gt_masks)[0])
        flat[j] = orig
        fd = (up - dn) / (2 * eps)
        an = float(grad[j])
        assert abs(fd - an) / max(abs(fd), abs(an), 1e-4) < 1e-2, f"[{j}] fd={fd} an={an}"
