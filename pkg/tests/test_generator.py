import numpy as np
import pytest
import torch

from textovsr.exceptions import ConfigurationError, ContractError, ShapeError
from textovsr.flow import ExternalFlow, PyramidLKFlow, ZeroFlow, estimate_flow, warp
from textovsr.generator import GeneratorConfig, TextOVSRGenerator, propagate_step, shallow_features
from textovsr.tracing import record_module_calls

from conftest import textured_clip
from fd import autograd_grad, fd_grad, rel_err

TINY = dict(channels=8, num_blocks=1, d_text=16, heads=2)


def gen(**kw):
    torch.manual_seed(kw.pop("seed", 0))
    return TextOVSRGenerator(GeneratorConfig(**{**TINY, **kw})).eval()


def frames(n=3, h=16, w=16, b=1, seed=0):
    g = torch.Generator().manual_seed(seed)
    return torch.rand(b, n, 3, h, w, generator=g)


def emb(n=3, b=1, d=16, seed=1):
    g = torch.Generator().manual_seed(seed)
    return torch.randn(b, n, d, generator=g)


def textured_frame(h=64, w=64, seed=0):
    rng = np.random.default_rng(seed)
    base = textured_clip(n=1, h=h, w=w, seed=seed).frames[0]
    noise = rng.random((1, h, w)).astype(np.float32)
    t = torch.from_numpy(noise)[None]
    tex = torch.nn.functional.avg_pool2d(torch.nn.functional.pad(t, (1, 1, 1, 1), mode="reflect"), 3, 1)[0]
    return 0.5 * torch.from_numpy(base) + 0.5 * tex


def test_config_validation():
    with pytest.raises(ConfigurationError):
        GeneratorConfig(scale=2)
    with pytest.raises(ConfigurationError):
        GeneratorConfig(drf_negative="middle")
    with pytest.raises(ConfigurationError):
        GeneratorConfig(drf_positive="after_deep")


def test_shallow_features():
    g = TextOVSRGenerator(GeneratorConfig(channels=32, d_text=16))
    x = torch.rand(3, 64, 64)
    f = shallow_features(x, g.trunk)
    assert f.shape == (32, 64, 64)
    assert torch.equal(f, shallow_features(x.clone(), g.trunk))
    x = x.requires_grad_(True)
    shallow_features(x, g.trunk)[5, 10, 10].backward()
    assert x.grad.abs().sum() > 0


def test_zero_flow_and_identity_warp():
    a = torch.rand(3, 12, 12)
    flow = estimate_flow(a, a, ZeroFlow())
    assert flow.shape == (2, 12, 12) and torch.all(flow == 0)
    f = torch.randn(5, 12, 12)
    assert (warp(f, flow) - f).abs().max() <= 1e-6


def test_lk_zero_motion():
    a = textured_frame()
    flow = estimate_flow(a, a.clone(), PyramidLKFlow())
    assert flow.norm(dim=0).max() <= 0.1


def test_lk_synthetic_shift():
    a = textured_frame()
    b = torch.roll(a, shifts=2, dims=-1)  # content moves 2 px right
    flow = estimate_flow(a, b, PyramidLKFlow())
    med = flow[0, 8:-8, 8:-8].median().item()
    assert 1.0 <= med <= 3.0


def test_flow_backend_frozen():
    a = torch.rand(3, 16, 16, requires_grad=True)
    b = torch.rand(3, 16, 16, requires_grad=True)
    for backend in (ZeroFlow(), PyramidLKFlow()):
        flow = estimate_flow(a, b, backend)
        assert not flow.requires_grad
    g = gen(flow_backend="pyramid_lk")
    assert all(not n.startswith("flow") for n, _ in g.named_parameters())


def test_flow_backend_detached_gradient_is_zero():
    lr = frames(n=2).requires_grad_(True)
    feat = torch.randn(1, 4, 16, 16, requires_grad=True)
    # the only path from lr to the loss runs through the flow backend
    flow = estimate_flow(lr[:, 0], lr[:, 1] + 0.05 * torch.roll(lr[:, 1], 1, -1), PyramidLKFlow())
    (warp(feat, flow) ** 2).sum().backward()
    assert feat.grad.abs().sum() > 0
    assert lr.grad is None or torch.all(lr.grad == 0)


def test_external_flow(tmp_path):
    backend = ExternalFlow(tmp_path)
    a = torch.rand(3, 8, 8)
    with pytest.raises(FileNotFoundError, match="c1/0000_0001.npy"):
        estimate_flow(a, a, backend, key="c1/0000_0001")
    (tmp_path / "c1").mkdir()
    np.save(tmp_path / "c1" / "0000_0001.npy", np.ones((2, 8, 8), np.float32))
    assert torch.all(estimate_flow(a, a, backend, key="c1/0000_0001") == 1)


def test_warp_integer_shift():
    f = torch.randn(4, 6, 7)
    flow = torch.zeros(2, 6, 7)
    flow[0] = 1.0
    out = warp(f, flow)
    assert torch.allclose(out[:, :, :-1], f[:, :, 1:], atol=1e-6)


def test_warp_gradient_fd():
    g = torch.Generator().manual_seed(3)
    f0 = torch.randn(1, 2, 5, 5, generator=g, dtype=torch.float64)
    flow = (torch.rand(1, 2, 5, 5, generator=g, dtype=torch.float64) - 0.5) * 1.3
    w = torch.randn(1, 2, 5, 5, generator=g, dtype=torch.float64)

    def loss(f):
        return (warp(f, flow) * w).sum()

    assert rel_err(autograd_grad(loss, f0), fd_grad(loss, f0)) < 1e-3


def test_propagate_step_contract():
    g = gen()
    prev, fused = torch.randn(1, 8, 6, 6), torch.randn(1, 8, 6, 6)
    out = propagate_step(prev, torch.zeros(1, 2, 6, 6), fused, g.trunk.backward_prop)
    assert out.shape == (1, 8, 6, 6)
    with pytest.raises(ShapeError):
        propagate_step(torch.randn(1, 4, 6, 6), torch.zeros(1, 2, 6, 6), fused, g.trunk.backward_prop)


def test_first_step_uses_zero_state():
    g = gen()
    out = g.forward_positive(frames(n=1), emb(n=1), trace=True)
    fused = out.hidden_trace["shallow"][0]
    expected = g.trunk.forward_prop(torch.cat([torch.zeros_like(fused), fused], 1))
    assert torch.allclose(out.hidden_trace["forward"][0], expected)


def test_recurrence_sensitivity_to_first_frame_text():
    g = gen()
    lr, e = frames(), emb()
    base = g.forward_positive(lr, e).sr
    e2 = e.clone()
    e2[:, 0] += 1.0
    assert (g.forward_positive(lr, e2).sr[:, 2] - base[:, 2]).abs().max() > 0


@pytest.mark.parametrize("n", [1, 3, 7])
def test_geometry(n):
    g = gen()
    lr = frames(n=n, h=8, w=12)
    out = g.forward_positive(lr, emb(n=n)).sr
    assert out.shape == (1, n, 3, 32, 48)
    assert out.min() >= 0 and out.max() <= 1
    neg = g.forward_negative(lr, torch.randn(1, 16)).sr
    assert neg.shape == (1, n, 3, 32, 48)


def test_geometry_64_to_256():
    g = gen()
    out = g.forward_positive(frames(n=2, h=64, w=64), emb(n=2)).sr
    assert out.shape == (1, 2, 3, 256, 256)


def test_missing_embeddings():
    g = gen()
    with pytest.raises(ContractError):
        g.forward_positive(frames())
    with pytest.raises(ContractError):
        g.forward_positive(frames(n=3), emb(n=2))
    with pytest.raises(ContractError):
        g.forward_negative(frames())


def test_fusion_liveness_per_frame():
    g = gen()
    lr, e = frames(), emb()
    base = g.forward_positive(lr, e).sr
    for k in range(3):
        e2 = e.clone()
        e2[:, k] = torch.randn(16)
        diff = (g.forward_positive(lr, e2).sr[:, k] - base[:, k]).abs().max()
        assert diff > 1e-6


def test_negative_position_sensitivity():
    g_after = gen(drf_negative="after_deep")
    g_before = gen(drf_negative="before_deep")
    g_before.load_state_dict(g_after.state_dict())
    lr, d = frames(), torch.randn(1, 16)
    assert (g_after.forward_negative(lr, d).sr - g_before.forward_negative(lr, d).sr).abs().max() > 1e-6


def test_branch_equivalence_under_identical_configs():
    g = gen(drf_negative="before_deep")
    g.drf_neg.load_state_dict(g.drf_pos.state_dict())
    lr = frames()
    d = torch.randn(1, 16)
    pos = g.forward_positive(lr, d[:, None].expand(1, 3, 16)).sr
    neg = g.forward_negative(lr, d).sr
    assert torch.allclose(pos, neg, atol=1e-6)


def test_temporal_causality_of_forward_pass():
    g = gen()
    lr = frames().requires_grad_(True)
    out = g.forward_positive(lr, emb(), trace=True)
    out.hidden_trace["forward"][0].sum().backward()
    assert lr.grad[:, 0].abs().sum() > 0
    assert torch.all(lr.grad[:, 1:] == 0)


def test_text_embedding_gradient_is_zero():
    g = gen().train()
    e = emb().requires_grad_(True)
    g.forward_positive(frames(), e).sr.sum().backward()
    assert e.grad is None or torch.all(e.grad == 0)


def test_infer_touches_no_negative_modules():
    g = gen(share_trunk=False)
    with record_module_calls(g.negative_exclusive_modules()) as calls:
        out1 = g.infer(frames(), emb())
    assert all(v == 0 for v in calls.values()) and set(calls) == {"drf_neg", "trunk_neg"}
    out2 = g.infer(frames(), emb())
    assert torch.equal(out1, out2)


def test_infer_chunked_long_clip():
    g = gen(channels=8, drf_positive=None)
    lr = torch.rand(1, 100, 3, 64, 64)
    g.max_stored_states = 0
    out = g.infer(lr, chunk_size=10)
    assert out.shape == (1, 100, 3, 256, 256)
    assert g.max_stored_states <= 10


def test_infer_chunk_equals_full_for_single_chunk():
    g = gen()
    lr, e = frames(n=4), emb(n=4)
    assert torch.allclose(g.infer(lr, e), g.infer(lr, e, chunk_size=4))


def test_ablation_configs_build_from_config():
    variants = [
        dict(drf_positive=None, drf_negative=None),
        dict(drf_positive=None, drf_negative="after_deep", text_negative=False),
        dict(drf_positive=None, drf_negative="after_deep", text_negative=True),
        dict(drf_positive="before_deep", drf_negative="after_deep", text_positive=False, text_negative=False),
        dict(drf_positive="before_deep", drf_negative="after_deep"),
    ]
    sets = []
    for v in variants:
        g = gen(**v)
        out = g.forward_positive(frames(n=2), emb(n=2)).sr
        assert out.shape == (1, 2, 3, 64, 64)
        sets.append(frozenset(n for n, _ in g.named_parameters()))
    assert len(set(sets)) == len(sets)
