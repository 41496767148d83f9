import math
import warnings

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from torch import nn

from sdkd.dataset import ChecksumError
from sdkd.nn import (
    ModelSpec,
    ParameterSet,
    SelfAttention,
    alternation_groups,
    attention_block,
    build_model,
    channel_layer_norm,
    conv_block,
    count_flops,
    count_params,
    latent_fuse,
    load_checkpoint,
    save_checkpoint,
    softmax_attention,
)
from sdkd.nn import layers
from sdkd.nn.layers import gelu

from oracles import check_grads, correlate2d_same, softmax_list



@pytest.fixture(autouse=True)
def _double():
    prev = torch.get_default_dtype()
    torch.set_default_dtype(torch.float64)
    yield
    torch.set_default_dtype(prev)


def micro_spec(kind, **kw):
    base = dict(in_frames=2, out_frames=3, channels=1, hidden_dim=4, depth=1, heads=1, n_down=1, patch=2, grid=(8, 8))
    base.update(kw)
    return ModelSpec(kind, **base)


# -- conv --------------------------------------------------------------------


def test_conv_identity_kernel():
    z = torch.randn(2, 3, 8, 8)
    w = torch.zeros(3, 3, 3, 3)
    for c in range(3):
        w[c, c, 1, 1] = 1.0
    out = conv_block(z, w, torch.zeros(3), activation=None)
    assert torch.equal(out, z)


def test_conv_matches_loop_correlation():
    img = np.array([[1.0, 2, 0, -1], [3, -2, 4, 1], [0, 1, 1, 2], [-3, 2, 0, 5]])
    ker = np.array([[0.5, -1, 2], [1, 0, -0.5], [0.25, 3, 1]])
    out = conv_block(torch.tensor(img)[None, None], torch.tensor(ker)[None, None], torch.tensor([0.7]), activation=None)
    np.testing.assert_allclose(out[0, 0].numpy(), correlate2d_same(img, ker) + 0.7, atol=1e-12)


def test_conv_gradients_match_finite_differences():
    g = torch.Generator().manual_seed(0)
    z = torch.randn(1, 2, 5, 5, generator=g, requires_grad=True)
    w = torch.randn(3, 2, 3, 3, generator=g, requires_grad=True)
    b = torch.randn(3, generator=g, requires_grad=True)
    assert check_grads(lambda: conv_block(z, w, b).sum(), [w, b, z]) < 1e-6


def test_conv_errors():
    with pytest.raises(ValueError, match="channel"):
        conv_block(torch.zeros(1, 2, 4, 4), torch.zeros(1, 3, 3, 3))
    with pytest.raises(ValueError, match="odd"):
        conv_block(torch.zeros(1, 1, 4, 4), torch.zeros(1, 1, 2, 2))


# -- attention ---------------------------------------------------------------


def test_zero_query_gives_uniform_mean():
    z = torch.randn(2, 4, 3, 3)
    wv = torch.randn(4, 4)
    out, weights = attention_block(z, torch.zeros(4, 4), torch.randn(4, 4), wv, return_weights=True)
    torch.testing.assert_close(weights, torch.full_like(weights, 1 / 9), atol=1e-15, rtol=0)
    mean_v = (z.flatten(2).transpose(1, 2) @ wv).mean(1)  # [B, D]
    torch.testing.assert_close(out, mean_v[:, :, None, None].expand_as(out), atol=1e-12, rtol=0)


def test_two_position_closed_form():
    q = torch.tensor([[1.0], [2.0]])
    k = torch.tensor([[1.0], [0.0]])
    v = torch.tensor([[3.0], [5.0]])
    out, _ = softmax_attention(q, k, v)
    e = math.e
    assert out[0, 0].item() == pytest.approx((3 * e + 5) / (e + 1), abs=1e-14)
    assert out[1, 0].item() == pytest.approx((3 * e**2 + 5) / (e**2 + 1), abs=1e-14)


def test_multihead_matches_list_softmax():
    g = torch.Generator().manual_seed(1)
    z = torch.randn(1, 4, 2, 2, generator=g)
    wq, wk, wv = (torch.randn(4, 4, generator=g) for _ in range(3))
    out, weights = attention_block(z, wq, wk, wv, heads=2, return_weights=True)
    tok = z.flatten(2)[0].T.tolist()  # N x D
    mat = lambda a, w: [[sum(r[i] * w[i][j] for i in range(4)) for j in range(4)] for r in a]
    Q, K, V = mat(tok, wq.tolist()), mat(tok, wk.tolist()), mat(tok, wv.tolist())
    for h in range(2):
        cols = range(2 * h, 2 * h + 2)
        for i in range(4):
            p = softmax_list([sum(Q[i][c] * K[j][c] for c in cols) / math.sqrt(2) for j in range(4)])
            assert weights[0, h, i].tolist() == pytest.approx(p, abs=1e-13)
            for c in cols:
                expected = sum(p[j] * V[j][c] for j in range(4))
                assert out[0, c].flatten()[i].item() == pytest.approx(expected, abs=1e-12)


def test_softmax_rows_sum_to_one():
    g = torch.Generator().manual_seed(2)
    z = torch.randn(3, 8, 4, 4, generator=g) * 5
    _, weights = attention_block(z, *(torch.randn(8, 8, generator=g) for _ in range(3)), heads=4, return_weights=True)
    assert (weights.sum(-1) - 1).abs().max() < 1e-9


def test_attention_gradients_match_finite_differences():
    g = torch.Generator().manual_seed(3)
    z = torch.randn(1, 4, 3, 3, generator=g, requires_grad=True)
    ws = [torch.randn(4, 4, generator=g, requires_grad=True) for _ in range(3)]
    probe = torch.randn(1, 4, 3, 3, generator=g)
    assert check_grads(lambda: (attention_block(z, *ws, heads=2) * probe).sum(), ws + [z]) < 1e-6


def test_attention_warns_above_limit(monkeypatch):
    monkeypatch.setattr(layers, "ATTENTION_N_LIMIT", 8)
    eye = torch.eye(2)
    with pytest.warns(RuntimeWarning, match="N=16"):
        attention_block(torch.zeros(1, 2, 4, 4), eye, eye, eye)
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        attention_block(torch.zeros(1, 2, 2, 2), eye, eye, eye)


# -- fuse --------------------------------------------------------------------


def test_fuse_cancelling_inputs_give_bias():
    z = torch.randn(2, 3, 4, 4)
    beta = torch.tensor([0.5, -1.0, 2.0])
    out = latent_fuse(z, -z, torch.randn(3), beta)
    torch.testing.assert_close(out, beta.view(1, 3, 1, 1).expand_as(out), atol=1e-12, rtol=0)


def test_fuse_two_point_normalization():
    z = torch.tensor([1.0, 3.0]).view(1, 2, 1, 1)
    out = latent_fuse(z, torch.zeros_like(z), eps=0.0)
    assert out.flatten().tolist() == pytest.approx([-1.0, 1.0], abs=1e-15)


def test_fuse_statistics_contract():
    g = torch.Generator().manual_seed(4)
    a, b = torch.randn(2, 4, 16, 5, 5, generator=g) * 3 + 1
    out = latent_fuse(a, b, eps=0.0)
    assert out.mean(1).abs().max() < 1e-7
    assert (out.var(1, unbiased=False) - 1).abs().max() < 1e-6
    with pytest.raises(ValueError):
        latent_fuse(a, b[:, :3])


def test_layer_norm_gradients():
    g = torch.Generator().manual_seed(5)
    z = torch.randn(1, 3, 2, 2, generator=g, requires_grad=True)
    gamma = torch.randn(3, generator=g, requires_grad=True)
    beta = torch.randn(3, generator=g, requires_grad=True)
    probe = torch.randn(1, 3, 2, 2, generator=g)
    assert check_grads(lambda: (channel_layer_norm(z, gamma, beta) * probe).sum(), [z, gamma, beta]) < 1e-6


# -- model zoo ---------------------------------------------------------------


def test_teacher_shape_contract():
    x = torch.randn(2, 10, 32, 32)
    for kind in ("st_alternet", "simvp"):
        model = build_model(ModelSpec(kind), seed=0)
        pred, latent = model.features(x)
        assert pred.shape == (2, 10, 32, 32)
        assert latent.shape == (2, 32, 8, 8)  # H / 2^n_down


@pytest.mark.parametrize("kind", ["st_alternet", "simvp"])
def test_teacher_zero_collapse(kind):
    model = build_model(micro_spec(kind))
    b = torch.tensor([0.3, -1.2, 2.0])
    with torch.no_grad():
        for p in model.parameters():
            p.zero_()
        model.head.bias.copy_(b)
    out = model(torch.randn(2, 2, 8, 8))
    torch.testing.assert_close(out, b.view(1, 3, 1, 1).expand(2, 3, 8, 8), atol=0, rtol=0)


@pytest.mark.parametrize("kind", ["st_alternet", "simvp", "unet", "resnet", "mlp_mixer"])
def test_end_to_end_gradients(kind):
    model = build_model(micro_spec(kind), seed=0)
    x = torch.randn(1, 2, 8, 8, generator=torch.Generator().manual_seed(0))
    probe = torch.randn(1, 3, 8, 8, generator=torch.Generator().manual_seed(1))
    params = list(model.parameters())
    assert check_grads(lambda: (model(x) * probe).sum(), params, joint=True) < 1e-5


def test_unet_skip_audit():
    model = build_model(ModelSpec("unet", depth=3), seed=0)
    model.skip_log = []
    model(torch.randn(1, 10, 32, 32))
    assert len(model.skip_log) == 3
    for up_shape, skip_shape in model.skip_log:
        assert up_shape[-2:] == skip_shape[-2:]
    assert [s[1][-1] for s in model.skip_log] == [8, 16, 32]


def test_resnet_residual_collapse():
    model = build_model(micro_spec("resnet", depth=3), seed=0)
    with torch.no_grad():
        for block in model.blocks:
            for p in block.parameters():
                p.zero_()
    x = torch.randn(2, 2, 8, 8)
    torch.testing.assert_close(model(x), model.head(gelu(model.stem(x))), atol=0, rtol=0)


def test_student_param_ratio():
    teacher = count_params(build_model(ModelSpec("st_alternet"), seed=0))
    for kind in ("unet", "resnet", "mlp_mixer"):
        spec = ModelSpec("st_alternet").student_of(kind)
        assert spec.hidden_dim == 8
        ratio = count_params(build_model(spec, seed=0)) / teacher
        assert 0.05 <= ratio <= 0.35, (kind, ratio)


def test_student_default_width():
    assert ModelSpec("unet").hidden_dim == round(0.25 * ModelSpec("st_alternet").hidden_dim)
    with pytest.raises(ValueError):
        ModelSpec("transformer")


@settings(max_examples=25, deadline=None)
@given(
    st.sampled_from(["st_alternet", "simvp", "unet", "resnet", "mlp_mixer"]),
    st.integers(1, 3),
    st.integers(1, 3),
    st.integers(1, 2),
    st.sampled_from([(8, 8), (16, 8), (8, 16)]),
)
def test_shape_closure(kind, i, d, c, grid):
    spec = ModelSpec(kind, in_frames=i, out_frames=d, channels=c, hidden_dim=4, depth=1, heads=2, n_down=1, patch=2, grid=grid)
    model = build_model(spec, seed=0)
    assert model(torch.randn(2, i * c, *grid)).shape == (2, d * c, *grid)


def test_indivisible_grid_rejected():
    with pytest.raises(ValueError, match="divisible"):
        build_model(ModelSpec("st_alternet", n_down=2, hidden_dim=4))(torch.zeros(1, 10, 6, 8))


def test_forward_determinism_and_batch_independence():
    torch.set_num_threads(1)
    model = build_model(micro_spec("st_alternet"), seed=3)
    x = torch.randn(4, 2, 8, 8)
    a, b = model(x), model(x)
    assert torch.equal(a, b)
    rows = torch.cat([model(x[i : i + 1]) for i in range(4)])
    torch.testing.assert_close(rows, a, atol=1e-12, rtol=0)


def test_alternation_groups_partition():
    model = build_model(micro_spec("st_alternet"), seed=0)
    conv, attn = alternation_groups(model)
    assert len(conv) + len(attn) == len(list(model.parameters()))
    assert sum(p.numel() for p in attn) == 3 * 4 * 4
    assert alternation_groups(build_model(micro_spec("simvp")))[1] == []


# -- complexity --------------------------------------------------------------


def test_attention_counts():
    layer = SelfAttention(8, heads=2)
    assert count_params(layer) == 192
    assert count_flops(layer, (8, 4, 4)) == 5120


def test_conv_counts():
    conv = nn.Conv2d(4, 4, 3, padding=1)
    assert count_params(conv) == 148
    assert count_flops(conv, (4, 8, 8)) == 9216


def test_empty_model_counts():
    empty = nn.Sequential()
    assert (count_params(empty), count_flops(empty, (1, 4, 4))) == (0, 0)


def test_flops_deterministic_and_additive():
    model = build_model(ModelSpec("st_alternet"), seed=0)
    f = count_flops(model, (10, 32, 32))
    assert f == count_flops(model, (1, 10, 32, 32))
    attn = 4 * (64 * 64 * 32 + 3 * 64 * 32 * 32)
    assert f > attn


# -- parameters and checkpoints ------------------------------------------------


def test_parameter_set_bijection():
    model = build_model(micro_spec("unet"), seed=0)
    ps = ParameterSet.from_module(model)
    vec = ps.flatten()
    assert vec.numel() == ps.size == count_params(model)
    back = torch.cat([t.reshape(-1) for t in ps.unflatten(vec).values()])
    assert torch.equal(back, vec)
    ps.load_flat(vec * 2)
    assert torch.equal(ps.flatten(), vec * 2)
    with pytest.raises(ValueError):
        ps.unflatten(vec[:-1])


@pytest.mark.parametrize("kind", ["st_alternet", "mlp_mixer"])
def test_checkpoint_round_trip(tmp_path, kind):
    torch.set_default_dtype(torch.float32)
    model = build_model(micro_spec(kind), seed=0)
    opt = torch.optim.Adam(model.parameters(), lr=1e-3)
    model(torch.randn(1, 2, 8, 8)).sum().backward()
    opt.step()
    save_checkpoint(tmp_path / "ck", model, opt, extra={"epoch": 3})
    opt2 = torch.optim.Adam(build_model(micro_spec(kind)).parameters(), lr=1e-3)
    loaded, manifest = load_checkpoint(tmp_path / "ck", spec=model.spec, optimizer=opt2)
    assert manifest["extra"] == {"epoch": 3}
    for (n, a), (_, b) in zip(model.state_dict().items(), loaded.state_dict().items()):
        assert torch.equal(a, b), n
    s1, s2 = opt.state_dict()["state"], opt2.state_dict()["state"]
    for idx in s1:
        assert torch.equal(s1[idx]["exp_avg"], s2[idx]["exp_avg"])
        assert float(s1[idx]["step"]) == float(s2[idx]["step"])


def test_checkpoint_corruption_and_mismatch(tmp_path):
    torch.set_default_dtype(torch.float32)
    model = build_model(micro_spec("resnet"), seed=0)
    save_checkpoint(tmp_path / "ck", model)
    with pytest.raises(ValueError, match="does not match"):
        load_checkpoint(tmp_path / "ck", spec=micro_spec("resnet", hidden_dim=6))
    blob = tmp_path / "ck" / "tensors" / "0000.bin"
    raw = bytearray(blob.read_bytes())
    raw[0] ^= 0xFF
    blob.write_bytes(bytes(raw))
    with pytest.raises(ChecksumError):
        load_checkpoint(tmp_path / "ck")
