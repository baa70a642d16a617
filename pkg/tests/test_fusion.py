import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from umdr.fusion import (CfcerConfig, CfcerFusion, CfcerLayer, UnimodalOutputs, cfcer_cross, cfcer_enhance,
                         cross_attention, fuse_add, fuse_mul, fusion_forward, load_fusion, save_fusion)


def test_fuse_add_example():
    s = fuse_add(torch.tensor([0.6, 0.4]), torch.tensor([0.2, 0.8]))
    assert torch.allclose(s, torch.tensor([0.8, 1.2]))
    assert s.argmax().item() == 1


def test_fuse_mul_identity_and_add_argmax():
    p = torch.softmax(torch.randn(5, 4), -1)
    assert torch.equal(fuse_mul(p, torch.ones(5, 4)), p)
    assert torch.equal(fuse_add(p, p).argmax(-1), p.argmax(-1))


def test_fuse_errors():
    with pytest.raises(ValueError):
        fuse_add(torch.ones(3), torch.ones(4))
    with pytest.raises(ValueError):
        fuse_mul(torch.ones(3))


def test_enhance_zero_gate_halves():
    layer = CfcerLayer(6, d=4)
    layer.zero_init_gates()
    o_r, o_d = torch.randn(2, 5, 6), torch.randn(2, 5, 6)
    e_r, e_d = cfcer_enhance(o_r, o_d, layer)
    assert torch.equal(e_r, 0.5 * o_r) and torch.equal(e_d, 0.5 * o_d)


def test_enhance_gate_range_and_shape():
    layer = CfcerLayer(6, d=4)
    o_r, o_d = torch.randn(3, 5, 6), torch.randn(3, 5, 6)
    e_r, _ = layer.enhance(o_r, o_d)
    assert e_r.shape == o_r.shape
    gate = e_r / o_r
    assert torch.all((gate > 0) & (gate < 1))
    with pytest.raises(ValueError):
        layer.enhance(o_r, torch.randn(3, 5, 5))


def test_cross_single_token():
    layer = CfcerLayer(4, d=3)
    e_r, e_d = torch.randn(1, 1, 4), torch.randn(1, 1, 4)
    f_r, f_d = cfcer_cross(e_r, e_d, layer)
    assert torch.allclose(f_r, layer.v_r(e_r)) and torch.allclose(f_d, layer.v_d(e_d))
    assert torch.all(layer.last_attention[0] == 1.0)


def test_cross_two_token_oracle():
    layer = CfcerLayer(2, d=2).double()
    with torch.no_grad():
        for lin, w in [(layer.q_d, [[1.0, 0.0], [0.0, 2.0]]), (layer.k_r, [[0.5, 1.0], [-1.0, 0.0]]),
                       (layer.v_r, [[1.0, 1.0], [0.0, 3.0]]), (layer.q_r, [[0.0, 1.0], [1.0, 0.0]]),
                       (layer.k_d, [[2.0, 0.0], [0.0, 1.0]]), (layer.v_d, [[1.0, -1.0], [2.0, 0.0]])]:
            lin.weight.copy_(torch.tensor(w))
    e_r = np.array([[1.0, 2.0], [0.5, -1.0]])
    e_d = np.array([[0.0, 1.0], [2.0, 1.0]])
    f_r, f_d = layer.cross(torch.tensor(e_r)[None], torch.tensor(e_d)[None])

    def W(lin):
        return lin.weight.detach().numpy()

    def softmax(s):
        e = np.exp(s - s.max(axis=1, keepdims=True))
        return e / e.sum(axis=1, keepdims=True)

    A_r = softmax((e_d @ W(layer.q_d).T) @ (e_r @ W(layer.k_r).T).T / math.sqrt(2))
    A_d = softmax((e_r @ W(layer.q_r).T) @ (e_d @ W(layer.k_d).T).T / math.sqrt(2))
    assert np.allclose(f_r[0].detach().numpy(), A_r @ (e_r @ W(layer.v_r).T), atol=1e-12)
    assert np.allclose(f_d[0].detach().numpy(), A_d @ (e_d @ W(layer.v_d).T), atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(n=st.integers(1, 12), seed=st.integers(0, 1000))
def test_cross_attention_row_stochastic(n, seed):
    g = torch.Generator().manual_seed(seed)
    a = cross_attention(5 * torch.randn(2, n, 4, generator=g), 5 * torch.randn(2, n, 4, generator=g), 4)
    assert torch.allclose(a.sum(-1), torch.ones(2, n), atol=1e-6)


def _inputs(n=3, T=4, C=8, D=12, K=5, seed=0):
    g = torch.Generator().manual_seed(seed)
    mk = lambda: UnimodalOutputs(torch.randn(n, T, C, generator=g), torch.randn(n, D, generator=g),
                                 torch.randn(n, K, generator=g))
    return mk(), mk()


def test_fusion_forward_shapes_and_score_mass():
    rgb, depth = _inputs()
    model = CfcerFusion(8, 12, 5, CfcerConfig(d=16))
    out = fusion_forward(rgb, depth, model)
    assert out.score.shape == (3, 5) and out.comp_r.shape == (3, 16)
    assert torch.allclose(out.score.sum(-1), torch.full((3,), 4.0), atol=1e-5)
    for layer in model.layers():
        for a in layer.last_attention:
            assert torch.allclose(a.sum(-1), torch.ones(a.shape[:-1]), atol=1e-6)


def test_ablation_reduces_to_addition():
    rgb, depth = _inputs()
    model = CfcerFusion(8, 12, 5, CfcerConfig(d=16))
    out = fusion_forward(rgb, depth, model, ablate=True)
    assert torch.equal(out.score, fuse_add(torch.softmax(rgb.logits, -1), torch.softmax(depth.logits, -1)))


def test_missing_logits():
    rgb, depth = _inputs()
    with pytest.raises(ValueError):
        fusion_forward(rgb._replace(logits=None), depth, CfcerFusion(8, 12, 5))


def test_stack_sizes():
    model = CfcerFusion(8, 12, 5)
    assert len(model.spatial) == 2 and len(model.temporal) == 4
    empty = CfcerFusion(8, 12, 5, CfcerConfig(spatial_layers=0, temporal_layers=0))
    assert fusion_forward(*_inputs(), empty).score.shape == (3, 5)
    with pytest.raises(ValueError):
        CfcerConfig(d=0)


def test_save_load_roundtrip(tmp_path):
    model = CfcerFusion(8, 12, 5, CfcerConfig(d=16))
    save_fusion(model, tmp_path / "fuse", "a", "b")
    loaded, meta = load_fusion(tmp_path / "fuse")
    rgb, depth = _inputs()
    with torch.no_grad():
        assert torch.equal(fusion_forward(rgb, depth, model).score, fusion_forward(rgb, depth, loaded).score)
    assert meta["num_classes"] == 5
