import json

import numpy as np
import pytest

from poselectr import diffcore as dc
from poselectr.diffcore import Tensor
from poselectr.encoderdecoder import (
    ModelConfig,
    PoseLecTr,
    build_graph,
    decoder_forward,
    embed_features,
    encoder_forward,
    init_params,
    normalize_quaternion,
    pose_head,
    pose_loss,
    section_lengths,
    spatial_eigenvectors,
    spatiotemporal_embed,
)
from poselectr.errors import ConfigurationError, ContractError, DimensionError
from poselectr.pose import Pose, random_quaternion
from poselectr.posemetrics import add
from poselectr.selftest import LAYER_EPS, layer_cases, random_graph, run_grad_case

TOY = ModelConfig(T=4, N=8, c=3, d=8, d_prime=8, heads=2, K=3, encoder_sections=2)


def patches_for(cfg, rng):
    return rng.standard_normal((cfg.T, cfg.N, cfg.c))


# -- config -----------------------------------------------------------------


def test_variant_names():
    assert ModelConfig().variant == "PoseLecTr"
    assert ModelConfig(kernel_family="Chebyshev").variant == "PoseLecTr+"
    assert ModelConfig(sfa_enabled=False).variant == "PoseLecTr*"
    assert ModelConfig(distill_enabled=False).variant == "PoseLecTr#"


@pytest.mark.parametrize(
    "kwargs",
    [dict(d_prime=6, heads=4), dict(T=0), dict(mapping="entmax"), dict(n_eig=8), dict(T=1, encoder_sections=2)],
)
def test_invalid_configs(kwargs):
    with pytest.raises(ConfigurationError):
        ModelConfig(**kwargs)


def test_unknown_keys_listed():
    with pytest.raises(ConfigurationError, match="bar, foo"):
        ModelConfig.from_dict({"foo": 1, "bar": 2, "T": 4})


def test_dict_roundtrip():
    cfg = ModelConfig(kernel_family="chebyshev", seed=9)
    assert ModelConfig.from_dict(json.loads(json.dumps(cfg.to_dict()))) == cfg


def test_section_lengths():
    assert section_lengths(ModelConfig(T=8, encoder_sections=3)) == [8, 4, 2]
    assert section_lengths(ModelConfig(T=8, encoder_sections=3, distill_enabled=False)) == [8, 8, 8]
    assert section_lengths(ModelConfig(T=9, encoder_sections=2, pool_stride=3)) == [9, 3]


# -- embeddings -------------------------------------------------------------


def test_embedding_zero_input_zero_bias():
    cfg = ModelConfig(T=2, N=6, c=3, d=4, d_prime=4)
    out = embed_features(np.zeros((2, 6, 3)), init_params(cfg))
    assert out.shape == (2, 6, 4)
    assert not out.data.any()


def test_embedding_gradients():
    cfg = ModelConfig(T=2, N=6, c=3, d=4, d_prime=4)
    builder = layer_cases(cfg)["embed_features"]
    assert max(run_grad_case(builder, s).max_rel_error for s in range(10)) < 1e-5


def test_embedding_channel_mismatch(rng):
    with pytest.raises(DimensionError):
        embed_features(rng.standard_normal((4, 8, 5)), init_params(TOY))


def test_spatiotemporal_identity_case(rng):
    g = random_graph(rng, 8)
    X = rng.standard_normal((4, 8, 8))
    out = spatiotemporal_embed(X, g, 0, np.zeros((0, 8)), np.zeros((8, 8)))
    np.testing.assert_array_equal(out.data, X)


def test_spatial_embedding_follows_node_swap(rng):
    F = rng.standard_normal((6, 3))
    perm = np.arange(6)
    perm[[1, 4]] = perm[[4, 1]]
    from poselectr.graphlap import graph_from_features

    E = spatial_eigenvectors(graph_from_features(F), 3)
    Ep = spatial_eigenvectors(graph_from_features(F[perm]), 3)
    np.testing.assert_allclose(Ep, E[perm], atol=1e-10)


def test_n_eig_out_of_range(rng):
    g = random_graph(rng, 4)
    with pytest.raises(ContractError):
        spatiotemporal_embed(rng.standard_normal((2, 4, 3)), g, 4, np.zeros((4, 3)), np.zeros((3, 3)))


# -- encoder / decoder -------------------------------------------------------


def test_single_section_is_one_block(rng):
    cfg = ModelConfig(encoder_sections=1, distill_enabled=False)
    p = init_params(cfg)
    patches = patches_for(cfg, rng)
    g = build_graph(patches)
    X = rng.standard_normal((cfg.T, cfg.N, cfg.d))
    merged, sections = encoder_forward(X, cfg, p, g)
    assert len(sections) == 1
    np.testing.assert_array_equal(merged.data, sections[0].data)


def test_encoder_merge_lengths(rng):
    cfg = ModelConfig(T=8, encoder_sections=3)
    p = init_params(cfg)
    patches = patches_for(cfg, rng)
    merged, sections = encoder_forward(rng.standard_normal((8, cfg.N, cfg.d)), cfg, p, build_graph(patches))
    assert merged.shape == (2, cfg.N, 3 * cfg.d_prime)
    assert all(s.shape[0] == 2 for s in sections)


def test_zero_bypass_weights_ignore_skip_path(rng):
    p = init_params(TOY)
    for s in range(TOY.encoder_sections):
        p[f"dec.bypass{s}"] = Tensor(np.zeros_like(p[f"dec.bypass{s}"].data))
    enc = rng.standard_normal((2, 8, 16))
    a = decoder_forward(enc, [rng.standard_normal((2, 8, 8)) for _ in range(2)], p, 2).data
    b = decoder_forward(enc, [rng.standard_normal((2, 8, 8)) for _ in range(2)], p, 2).data
    np.testing.assert_array_equal(a, b)


def test_decoder_output_is_fixed_length(rng):
    p = init_params(TOY)
    for T, N in [(1, 3), (2, 8), (5, 11)]:
        out = decoder_forward(rng.standard_normal((T, N, 16)), [rng.standard_normal((T, N, 8))] * 2, p, 2)
        assert out.shape == (TOY.d_sk,)


# -- pose head / loss -------------------------------------------------------


def test_head_identity_pose():
    p = init_params(TOY)
    p["head.weight"] = Tensor(np.zeros_like(p["head.weight"].data))
    pose = pose_head(np.ones(TOY.d_sk), p).to_pose()
    np.testing.assert_array_equal(pose.q, [1, 0, 0, 0])
    np.testing.assert_array_equal(pose.t, [0, 0, 0])


def test_head_zero_quaternion_flagged():
    p = init_params(TOY)
    p["head.weight"] = Tensor(np.zeros_like(p["head.weight"].data))
    p["head.bias"] = Tensor(np.zeros(7))
    pred = pose_head(np.ones(TOY.d_sk), p)
    assert pred.degenerate
    np.testing.assert_array_equal(pred.q.data, [1, 0, 0, 0])


def test_normalization_canonical_sign(rng):
    q = rng.standard_normal(4)
    np.testing.assert_allclose(normalize_quaternion(q).data, normalize_quaternion(-q).data)
    assert normalize_quaternion(q).data[0] >= 0


def test_normalization_gradient():
    for seed in range(10):
        rng = np.random.default_rng(seed)
        q = Tensor(rng.standard_normal(4), requires_grad=True)
        R = rng.standard_normal(4)
        f = lambda: dc.tsum(dc.mul(normalize_quaternion(q), R))
        assert dc.grad_check_report(f, [q], eps=1e-6, guard=True).max_rel_error < 1e-5


def test_loss_examples(rng):
    pts = rng.standard_normal((20, 3)) * 0.05
    gt = Pose(random_quaternion(rng), rng.uniform(-0.1, 0.1, 3))
    assert pose_loss(gt, gt, pts).item() == pytest.approx(0.0, abs=1e-15)
    delta = np.array([0.01, -0.02, 0.005])
    assert pose_loss(Pose(gt.q, gt.t + delta), gt, pts).item() == pytest.approx(np.linalg.norm(delta), abs=1e-12)
    for _ in range(10):
        pred = Pose(random_quaternion(rng), rng.uniform(-0.1, 0.1, 3))
        assert abs(pose_loss(pred, gt, pts).item() - add(pred, gt, pts)) < 1e-12
    with pytest.raises(ContractError):
        pose_loss(gt, gt, np.zeros((0, 3)))


# -- whole model ------------------------------------------------------------


@pytest.mark.parametrize("name", sorted(set(layer_cases()) - {"end_to_end"}))
def test_layer_gradients(name):
    builder = layer_cases()[name]
    assert max(run_grad_case(builder, s, eps=LAYER_EPS).max_rel_error for s in range(10)) < 1e-4


def test_end_to_end_gradient():
    builder = layer_cases()["end_to_end"]
    for seed in range(3):
        assert run_grad_case(builder, seed, eps=LAYER_EPS, max_coords=40).max_rel_error < 1e-4


def test_forward_shapes_and_report(rng):
    model = PoseLecTr(TOY)
    res = model.forward(patches_for(TOY, rng))
    assert res.pose.q.shape == (4,) and res.pose.t.shape == (3,)
    assert abs(np.linalg.norm(res.pose.q.data) - 1) < 1e-12
    assert res.report["section_lengths"] == [4, 2]
    assert res.report["merged_length"] == 2
    with pytest.raises(DimensionError):
        model.forward(rng.standard_normal((4, 8, 2)))


def test_forward_is_deterministic(rng):
    patches = patches_for(TOY, rng)
    a = PoseLecTr(TOY).forward(patches).feature.data
    b = PoseLecTr(TOY).forward(patches).feature.data
    np.testing.assert_array_equal(a, b)


def test_ablation_structure_reports(rng):
    patches = patches_for(TOY, rng)
    base = PoseLecTr(TOY).structure_report(patches)
    plus = PoseLecTr(ModelConfig(**{**TOY.to_dict(), "kernel_family": "chebyshev"})).structure_report(patches)
    star = PoseLecTr(ModelConfig(**{**TOY.to_dict(), "sfa_enabled": False})).structure_report(patches)
    hash_ = PoseLecTr(ModelConfig(**{**TOY.to_dict(), "distill_enabled": False})).structure_report(patches)
    assert base["op_counts"].get("legendre_conv") and not base["op_counts"].get("chebyshev_conv")
    assert plus["op_counts"].get("chebyshev_conv") and not plus["op_counts"].get("legendre_conv")
    assert base["op_counts"].get("sparsemax") and not star["op_counts"].get("sparsemax")
    assert star["attention_mapping"] == "uniform"
    assert hash_["section_lengths"] == [4, 4] and base["section_lengths"] == [4, 2]
    assert not hash_["op_counts"].get("avg_pool1d")


def test_checkpoint_roundtrip(tmp_path, rng):
    model = PoseLecTr(ModelConfig(seed=3, kernel_family="chebyshev"))
    path = tmp_path / "ckpt.json"
    model.save(path)
    loaded = PoseLecTr.load(path)
    assert loaded.cfg == model.cfg
    patches = patches_for(model.cfg, rng)
    np.testing.assert_array_equal(loaded.forward(patches).feature.data, model.forward(patches).feature.data)


def test_checkpoint_shape_validation(tmp_path):
    path = tmp_path / "ckpt.json"
    PoseLecTr(TOY).save(path)
    payload = json.loads(path.read_text())
    payload["params"]["head.bias"]["shape"] = [8]
    payload["params"]["head.bias"]["data"].append(0.0)
    path.write_text(json.dumps(payload))
    with pytest.raises(ContractError, match="head.bias"):
        PoseLecTr.load(path)
    payload["params"].pop("head.bias")
    path.write_text(json.dumps(payload))
    with pytest.raises(ContractError, match="missing"):
        PoseLecTr.load(path)
