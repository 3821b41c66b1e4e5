"""Variance statistics, gain tables, sphere projection and attention maps."""

import dataclasses
import json

import numpy as np
import pytest

import oracles
from uniprompt.autodiff.io import load_tensor
from uniprompt.data import SyntheticSpec, make_synthetic
from uniprompt.diagnostics import (
    VARIANCE_SCALARIZATION,
    VarianceReport,
    attention_response_map,
    gain_table_csv,
    gain_vs_variance_table,
    inter_class_text_variance,
    intra_class_visual_variance,
    project_to_sphere,
    variance_report,
)
from uniprompt.encoder import TextConfig, VisionConfig, init_backbone
from uniprompt.errors import ContractError, DataError
from uniprompt.harness import RunRecord, TrainConfig
from uniprompt.prompts import make_strategy


@pytest.fixture(scope="module")
def encoder():
    return init_backbone(VisionConfig(), TextConfig(), seed=0, dtype=np.float64)


def hooked_rows(encoder, layer_input, index):
    """Full softmax rows of one block recomputed with scalar loops from its captured input."""
    block = encoder.vision_blocks[index]
    g, b = block.ln1.gamma.data.tolist(), block.ln1.beta.data.tolist()
    normed = [oracles.layer_norm_row(r, g, b) for r in layer_input.tolist()]
    weights = {k: v.data.tolist() for k, v in block.attn.named().items()}
    _, probs = oracles.attention(normed, weights, block.heads)
    return np.array(probs)


# -- variances -------------------------------------------------------------------

def test_identical_class_has_zero_variance():
    var_c, _ = intra_class_visual_variance([np.ones((4, 3)), np.array([[0.0, 0, 0], [2, 0, 0]])])
    assert var_c[0] == 0.0


def test_hand_computed_intra_variance():
    var_c, var_v = intra_class_visual_variance([np.array([[0.0, 0.0], [2.0, 0.0]])])
    assert var_c.tolist() == [0.5] and var_v == 0.5


def test_hand_computed_inter_variance():
    assert inter_class_text_variance(np.array([[1.0, -1.0], [0.0, 0.0]])) == 0.5
    assert inter_class_text_variance(np.ones((4, 3))) == 0.0


def test_inter_variance_needs_two_classes():
    with pytest.raises(DataError):
        inter_class_text_variance(np.ones((4, 1)))


def test_empty_class_is_error():
    with pytest.raises(DataError):
        intra_class_visual_variance(np.ones((4, 2)), np.array([0, 0, 2, 2]), k=3)


@pytest.mark.parametrize("seed", range(5))
def test_variances_match_loop_oracle(seed):
    rng = np.random.default_rng(seed)
    feats = rng.normal(size=(15, 4))
    labels = np.repeat(np.arange(3), 5)
    var_c, var_v = intra_class_visual_variance(feats, labels)
    ref_c, ref_v = oracles.intra_class_variance(feats.tolist(), labels.tolist(), 3)
    assert np.max(np.abs(var_c - ref_c)) < 1e-10 and abs(var_v - ref_v) < 1e-10
    W = rng.normal(size=(4, 3))
    assert abs(inter_class_text_variance(W) - oracles.inter_class_variance(W.tolist())) < 1e-10


def test_var_v_is_exact_mean_and_nonnegative():
    rng = np.random.default_rng(9)
    var_c, var_v = intra_class_visual_variance(rng.normal(size=(30, 6)), np.repeat(np.arange(5), 6))
    assert np.all(var_c >= 0) and var_v == float(var_c.mean())


def test_alpha_scaling():
    rng = np.random.default_rng(3)
    feats, labels = rng.normal(size=(12, 5)), np.repeat(np.arange(3), 4)
    _, base = intra_class_visual_variance(feats, labels)
    _, scaled = intra_class_visual_variance(2.0 * feats, labels)
    assert abs(scaled - 4.0 * base) < 1e-8


def test_report_from_encoder(encoder):
    data = make_synthetic(SyntheticSpec(k=3, train_per_class=4))
    rep = variance_report(encoder, data)
    assert len(rep.var_c) == 3 and rep.var_v >= 0 and rep.var_t >= 0
    assert rep.encoder_checksum == encoder.checksum() and rep.scalarization == VARIANCE_SCALARIZATION
    assert rep.to_csv().splitlines()[0] == "dataset,quantity,class,value"


# -- gain table ------------------------------------------------------------------

def _record(dataset, strategy, shots, seed, acc):
    return RunRecord(strategy, dataset, shots, seed, dataclasses.asdict(TrainConfig()), {}, test_accuracy=acc)


def test_gain_table_definition():
    records = [_record("a", "zero_shot", 16, s, 0.4) for s in (1, 2, 3)]
    records += [_record("a", "unified", 16, s, a) for s, a in zip((1, 2, 3), (0.6, 0.7, 0.8))]
    records += [_record("a", "unified", 1, 1, 0.1)]
    rows = gain_vs_variance_table(records, [VarianceReport("a", [0.1], 0.1, 0.2)])
    by = {r["strategy"]: r for r in rows}
    assert by["zero_shot"]["gain"] == 0.0
    assert abs(by["unified"]["gain"] - 0.3) < 1e-12 and by["unified"]["shots"] == 16
    assert gain_table_csv(rows).splitlines()[0] == "dataset,strategy,shots,var_v,var_t,accuracy,gain"


def test_gain_table_needs_zero_shot():
    with pytest.raises(DataError, match="zero-shot"):
        gain_vs_variance_table([_record("a", "text", 16, 1, 0.5)], [VarianceReport("a", [0.1], 0.1, 0.2)])


def test_gain_table_tracks_variance_knob(encoder):
    reports, records = [], []
    for sigma in (0.1, 0.5, 1.0):
        data = make_synthetic(SyntheticSpec(name=f"s{sigma}", k=3, train_per_class=6, sigma_v=sigma))
        reports.append(variance_report(encoder, data))
        records += [_record(data.name, "zero_shot", 4, 1, 0.3), _record(data.name, "text", 4, 1, 0.5)]
    rows = gain_vs_variance_table(records, reports)
    seen = sorted({r["var_v"] for r in rows})
    assert len(seen) == 3
    assert seen == sorted(r.var_v for r in reports)


# -- sphere projection -----------------------------------------------------------

def test_sphere_outputs_unit_norm():
    rng = np.random.default_rng(0)
    proj = project_to_sphere(rng.normal(size=(10, 8)), rng.normal(size=(8, 3)))
    assert proj.points.shape == (13, 3) and not proj.padded
    assert np.allclose(np.linalg.norm(proj.points, axis=1), 1.0, atol=1e-6)
    assert proj.features.shape == (10, 3) and proj.classifier.shape == (3, 3)


def test_sphere_identity_components():
    """Unit 3-d inputs whose principal axes are the coordinate axes come back unchanged."""
    base = np.array([0.8, 0.5, np.sqrt(1 - 0.89)])
    signs = np.array([[i, j, k] for i in (1, -1) for j in (1, -1) for k in (1, -1)], dtype=float)
    x = signs * base
    proj = project_to_sphere(x)
    assert np.allclose(proj.components, np.eye(3), atol=1e-12)
    assert np.allclose(proj.points, x, atol=1e-12)


def test_sphere_preserves_angles_of_rank3_data():
    rng = np.random.default_rng(2)
    basis, _ = np.linalg.qr(rng.normal(size=(10, 3)))
    coeffs = np.array([[1.0, 0.2, 0], [0, 1.0, 0.5], [0.1, 0, 1.0], [-1.0, -1.0, -1.0]])
    coeffs /= np.linalg.norm(coeffs, axis=1, keepdims=True)
    x = coeffs @ basis.T
    proj = project_to_sphere(x)
    before, after = x @ x.T, proj.points @ proj.points.T
    assert np.allclose(after, before, atol=1e-10)
    iu = np.triu_indices(4, 1)
    assert np.array_equal(np.argsort(after[iu]), np.argsort(before[iu]))


def test_sphere_rank_deficient_is_padded():
    proj = project_to_sphere(np.array([[1.0, 0, 0, 0], [2.0, 0, 0, 0], [0, 1.0, 0, 0]]))
    assert proj.padded
    assert np.allclose(proj.points[:, 2], 0.0)
    assert np.allclose(np.linalg.norm(proj.points, axis=1), 1.0)


def test_sphere_sign_convention():
    rng = np.random.default_rng(4)
    proj = project_to_sphere(rng.normal(size=(9, 5)))
    for v in proj.components:
        assert v[np.argmax(np.abs(v))] > 0


def test_sphere_needs_three_vectors():
    with pytest.raises(DataError):
        project_to_sphere(np.ones((2, 4)))


# -- attention maps --------------------------------------------------------------

def test_map_shapes_and_rows(encoder):
    s = make_strategy("vpt_deep", encoder, seed=1, n=3)
    image = np.random.default_rng(0).normal(size=(32, 32, 1))
    amap = attention_response_map(encoder, s, image, layer=-1, image_id="img0")
    assert amap.layer == 3 and amap.heads == 4
    assert amap.mean.shape == (3, 16) and amap.per_head.shape == (4, 3, 16)
    assert np.allclose(amap.rows.sum(axis=-1), 1.0, atol=1e-6)
    assert np.all(amap.per_head.sum(axis=-1) <= 1.0 + 1e-12) and np.all(amap.per_head >= 0)
    assert np.allclose(amap.mean, amap.per_head.mean(axis=0))
    mean_grid, head_grid = amap.grid_maps()
    assert mean_grid.shape == (3, 4, 4) and head_grid.shape == (4, 3, 4, 4)


def test_uniform_attention_gives_inverse_length():
    enc = init_backbone(VisionConfig(), TextConfig(), seed=0, dtype=np.float64)
    attn = enc.vision_blocks[-1].attn
    for p in (attn.q_w, attn.q_b, attn.k_w, attn.k_b):
        p.data[...] = 0.0
    s = make_strategy("vpt_deep", enc, seed=1, n=2)
    amap = attention_response_map(enc, s, np.zeros((32, 32, 1)))
    assert np.allclose(amap.per_head, 1.0 / 19, atol=1e-15)


def test_map_matches_hooked_oracle(encoder):
    s = make_strategy("unified", encoder, seed=3)
    image = np.random.default_rng(5).normal(size=(32, 32, 1))
    capture = []
    encoder.image_tokens(image, s.generate().visual, capture)
    amap = attention_response_map(encoder, s, image, layer=2)
    ref = hooked_rows(encoder, capture[2][0], 2)
    n = amap.n_prompts
    assert np.max(np.abs(amap.rows - ref[:, 1:1 + n, :])) < 1e-10


def test_no_visual_prompts_is_contract_error(encoder):
    image = np.zeros((32, 32, 1))
    for kind in ("zero_shot", "text"):
        with pytest.raises(ContractError):
            attention_response_map(encoder, make_strategy(kind, encoder), image)
    with pytest.raises(ContractError):
        attention_response_map(encoder, make_strategy("vpt_deep", encoder, n=0), image)


def test_bad_layer_and_batch(encoder):
    s = make_strategy("vpt_deep", encoder)
    with pytest.raises(ContractError):
        attention_response_map(encoder, s, np.zeros((32, 32, 1)), layer=4)
    with pytest.raises(ContractError):
        attention_response_map(encoder, s, np.zeros((2, 32, 32, 1)))


def test_map_save(encoder, tmp_path):
    s = make_strategy("vpt_shallow", encoder, seed=1)
    amap = attention_response_map(encoder, s, np.zeros((32, 32, 1)), layer=1, image_id="zeros")
    sidecar = json.loads(amap.save(tmp_path).read_text())
    assert sidecar["grid"] == [4, 4] and sidecar["layer"] == 1 and sidecar["heads"] == 4
    assert np.array_equal(load_tensor(tmp_path / "per_head.pft"), amap.grid_maps()[1])
