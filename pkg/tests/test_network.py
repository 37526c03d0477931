"""RT-CAN network: pyramid shapes, RCA gating, GTA, cascaded decoder, determinism, gradient flow."""

import pytest
import torch
import torch.nn as nn

from rtcan.errors import ModelConfigError, ShapeError
from rtcan.losses import combined_loss
from rtcan.models import ModelConfig
from rtcan.network import (
    STAGE_CHANNELS,
    STAGE_STRIDES,
    ChannelAttention,
    GTAModule,
    Prediction,
    RCAModule,
    SpatialAttention,
    build_model,
    count_parameters,
    predict_mask,
)


def _config(**overrides) -> ModelConfig:
    """Small decoder for CPU speed; everything else at defaults."""
    base = {"decoder_channels": 32}
    base.update(overrides)
    return ModelConfig(**base)


def _inputs(h: int, w: int, batch: int = 1, seed: int = 0) -> tuple[torch.Tensor, torch.Tensor]:
    g = torch.Generator().manual_seed(seed)
    return torch.randn(batch, 3, h, w, generator=g), torch.randn(batch, 1, h, w, generator=g)


# --- Encoder ---

def test_encode_pyramid_shapes() -> None:
    """Five stages at strides 2..32 with 64/256/512/1024/2048 channels."""
    model = build_model(_config()).eval()
    rgb, thermal = _inputs(96, 128)
    with torch.no_grad():
        for stream, x in (("rgb", rgb), ("thermal", thermal)):
            pyramid = model.encode(stream, x)
            assert len(pyramid) == 5
            for feat, c, s in zip(pyramid, STAGE_CHANNELS, STAGE_STRIDES):
                assert tuple(feat.shape) == (1, c, 96 // s, 128 // s)


def test_encode_accepts_unbatched_input() -> None:
    model = build_model(_config()).eval()
    with torch.no_grad():
        pyramid = model.encode("thermal", torch.zeros(1, 64, 64))
    assert tuple(pyramid[-1].shape) == (1, 2048, 2, 2)


def test_encode_rejects_indivisible_size() -> None:
    model = build_model(_config()).eval()
    with pytest.raises(ShapeError):
        model.encode("rgb", torch.zeros(1, 3, 100, 96))


def test_encode_rejects_wrong_channel_count() -> None:
    model = build_model(_config()).eval()
    with pytest.raises(ShapeError):
        model.encode("thermal", torch.zeros(1, 3, 64, 64))


def test_build_rejects_bad_depth_and_kernels() -> None:
    with pytest.raises(ModelConfigError):
        build_model(_config(backbone_depth=34))
    with pytest.raises(ModelConfigError):
        build_model(_config(gta_kernel_sizes=[1, 4]))


def test_build_is_seeded_and_leaves_global_rng_alone() -> None:
    state = torch.get_rng_state()
    a = build_model(_config(init_seed=3))
    b = build_model(_config(init_seed=3))
    c = build_model(_config(init_seed=4))
    assert torch.equal(torch.get_rng_state(), state)
    for (name, pa), (_, pb) in zip(a.state_dict().items(), b.state_dict().items()):
        assert torch.equal(pa, pb), name
    assert not torch.equal(a.fusion[0].conv.weight, c.fusion[0].conv.weight)


# --- Forward ---

@pytest.mark.parametrize("scheme", ["A", "B", "C"])
@pytest.mark.parametrize("size", [(96, 96), (128, 160)])
def test_forward_shapes_depth50(scheme: str, size: tuple[int, int]) -> None:
    model = build_model(_config(scheme=scheme)).eval()
    rgb, thermal = _inputs(*size)
    with torch.no_grad():
        pred = model(rgb, thermal)
    for logits in pred:
        assert tuple(logits.shape) == (1, 2, *size)
        assert torch.isfinite(logits).all()


@pytest.mark.slow
@pytest.mark.parametrize("depth", [50, 152])
@pytest.mark.parametrize("scheme", ["A", "B", "C"])
@pytest.mark.parametrize("size", [(96, 96), (160, 128), (224, 320), (512, 640)])
def test_forward_shape_suite(depth: int, scheme: str, size: tuple[int, int]) -> None:
    model = build_model(ModelConfig(backbone_depth=depth, scheme=scheme)).eval()
    rgb, thermal = _inputs(*size)
    with torch.no_grad():
        pred = model(rgb, thermal)
    assert tuple(pred.logits_final.shape) == (1, 2, *size)
    assert all(torch.isfinite(t).all() for t in pred)


def test_forward_rejects_misaligned_inputs() -> None:
    model = build_model(_config()).eval()
    with pytest.raises(ShapeError):
        model(torch.zeros(1, 3, 64, 64), torch.zeros(1, 1, 64, 96))


def test_final_logits_average_heads() -> None:
    """logits_final equals (deep + shallow) / 2 on random forwards."""
    model = build_model(_config()).eval()
    for seed in range(3):
        rgb, thermal = _inputs(64, 96, seed=seed)
        with torch.no_grad():
            pred = model(rgb, thermal)
        diff = pred.logits_final - (pred.logits_deep + pred.logits_shallow) / 2
        assert float(diff.abs().max()) <= 1e-6


def test_opposite_heads_cancel() -> None:
    a = torch.randn(1, 2, 4, 4)
    pred = Prediction.from_heads(a, -a)
    assert torch.equal(pred.logits_final, torch.zeros_like(a))


def test_decoder_rejects_missing_stage() -> None:
    model = build_model(_config()).eval()
    with torch.no_grad():
        pyramid = model.encode("rgb", torch.zeros(1, 3, 64, 64))
        with pytest.raises(ShapeError):
            model.decode(pyramid[:4], (64, 64))


def test_per_stage_gta_and_spatial_first() -> None:
    model = build_model(_config(gta_placement="per_stage", attention_order="spatial_first")).eval()
    assert len(model.gta) == 5
    assert isinstance(model.fusion[0].attention[0], SpatialAttention)
    rgb, thermal = _inputs(64, 64)
    with torch.no_grad():
        pred = model(rgb, thermal)
    assert tuple(pred.logits_final.shape) == (1, 2, 64, 64)


# --- RCA ---

def test_rca_gate_strictly_inside_unit_interval() -> None:
    """1000 random invocations: every gate value in (0, 1)."""
    torch.manual_seed(0)
    rca = RCAModule(8, "A").double()
    with torch.no_grad():
        for _ in range(1000):
            t = torch.randn(1, 8, 4, 4, dtype=torch.float64)
            r = torch.randn(1, 8, 4, 4, dtype=torch.float64)
            g = rca.gate(t, r)
            assert float(g.min()) > 0.0
            assert float(g.max()) < 1.0


def test_rca_zero_conv_gives_half_thermal() -> None:
    """Zero 1×1 weights and bias: scheme C returns exactly 0.5·T; scheme A gates at 0.5 before attention."""
    t = torch.randn(2, 16, 8, 8)
    r = torch.randn(2, 16, 8, 8)
    for scheme in ("A", "C"):
        rca = RCAModule(16, scheme)
        with torch.no_grad():
            rca.conv.weight.zero_()
            rca.conv.bias.zero_()
            assert torch.equal(rca.gate(t, r), torch.full_like(t, 0.5))
            if scheme == "C":
                assert torch.equal(rca(t, r), 0.5 * t)


def test_rca_scheme_b_is_concat_conv() -> None:
    rca = RCAModule(4, "B")
    t, r = torch.randn(1, 4, 3, 3), torch.randn(1, 4, 3, 3)
    with torch.no_grad():
        assert torch.allclose(rca(t, r), rca.conv(torch.cat([t, r], dim=1)))


def test_rca_shape_mismatch() -> None:
    with pytest.raises(ShapeError):
        RCAModule(4, "A")(torch.zeros(1, 4, 4, 4), torch.zeros(1, 4, 2, 2))


def test_rca_nonnegative_input_stays_nonnegative() -> None:
    rca = RCAModule(8, "A")
    t = torch.rand(1, 8, 6, 6)
    with torch.no_grad():
        assert float(rca(t, torch.randn(1, 8, 6, 6)).min()) >= 0.0


def test_rca_gate_saturates_only_in_float32() -> None:
    """A logit of 20 rounds the float32 gate to exactly 1; float64 still resolves it below 1."""
    rca = RCAModule(4, "C")
    with torch.no_grad():
        rca.conv.weight.zero_()
        rca.conv.bias.fill_(20.0)
        t, r = torch.randn(1, 4, 3, 3), torch.randn(1, 4, 3, 3)
        assert float(rca.gate(t, r).max()) == 1.0
        rca = rca.double()
        assert float(rca.gate(t.double(), r.double()).max()) < 1.0


def test_rca_conv_gradient_matches_finite_differences() -> None:
    """Analytic d(sum out)/d(conv weight) agrees with central differences in float64."""
    torch.manual_seed(0)
    rca = RCAModule(8, "A", reduction=4).double()
    t = torch.randn(1, 8, 8, 8, dtype=torch.float64)
    r = torch.randn(1, 8, 8, 8, dtype=torch.float64)
    rca(t, r).sum().backward()
    analytic = rca.conv.weight.grad.clone()

    eps = 1e-6
    numeric = torch.zeros_like(analytic)
    weight = rca.conv.weight.data
    with torch.no_grad():
        for idx in torch.cartesian_prod(*(torch.arange(n) for n in weight.shape)):
            i = tuple(idx.tolist())
            saved = float(weight[i])
            weight[i] = saved + eps
            up = float(rca(t, r).sum())
            weight[i] = saved - eps
            down = float(rca(t, r).sum())
            weight[i] = saved
            numeric[i] = (up - down) / (2 * eps)
    assert torch.allclose(analytic, numeric, rtol=1e-4, atol=1e-4)


def test_scheme_c_is_scheme_a_without_attention() -> None:
    """Same 1×1 conv, A's attention block replaced by identity: A and C agree exactly."""
    torch.manual_seed(1)
    a, c = RCAModule(8, "A"), RCAModule(8, "C")
    c.conv.load_state_dict(a.conv.state_dict())
    a.attention = nn.Identity()
    t, r = torch.randn(2, 8, 5, 5), torch.randn(2, 8, 5, 5)
    with torch.no_grad():
        assert torch.equal(a(t, r), c(t, r))


def test_attention_zero_weights_gate_half() -> None:
    x = torch.randn(1, 32, 5, 5)
    ca, sa = ChannelAttention(32, 16), SpatialAttention(7)
    with torch.no_grad():
        for m in (ca, sa):
            for p in m.parameters():
                p.zero_()
        assert torch.equal(ca.gate(x), torch.full((1, 32, 1, 1), 0.5))
        assert torch.equal(sa.gate(x), torch.full((1, 1, 5, 5), 0.5))


def test_scheme_a_has_more_parameters_than_c() -> None:
    assert count_parameters(build_model(_config(scheme="A"))) > count_parameters(build_model(_config(scheme="C")))


# --- GTA ---

def test_gta_preserves_shape() -> None:
    gta = GTAModule(64, (1, 3, 5), branch_channels=16)
    x = torch.randn(2, 64, 7, 9)
    assert gta(x).shape == x.shape


def test_gta_rejects_even_kernel() -> None:
    with pytest.raises(ModelConfigError):
        GTAModule(8, (1, 2))


def test_gta_without_global_branch() -> None:
    gta = GTAModule(8, (3,), branch_channels=8, global_branch=False)
    assert gta.global_branch is None
    assert gta.reduce.in_channels == 8


def test_gta_zero_branches_give_zero_output() -> None:
    gta = GTAModule(16, (1, 3, 5), branch_channels=8)
    with torch.no_grad():
        for branch in gta.branches:
            branch.weight.zero_()
        gta.global_branch.weight.zero_()
        out = gta(torch.randn(2, 16, 6, 6))
    assert torch.equal(out, torch.zeros_like(out))


def test_gta_identity_path_is_channel_rescale() -> None:
    """Kernel 1 with identity branch and reduce: output is x times the channel gate of x."""
    gta = GTAModule(8, (1,), branch_channels=8, global_branch=False)
    eye = torch.eye(8).view(8, 8, 1, 1)
    x = torch.randn(2, 8, 5, 7)
    with torch.no_grad():
        gta.branches[0].weight.copy_(eye)
        gta.reduce.weight.copy_(eye)
        assert torch.allclose(gta(x), x * gta.attention.gate(x))


@pytest.mark.slow
def test_depth152_has_more_parameters_than_depth50() -> None:
    deep = count_parameters(build_model(ModelConfig(backbone_depth=152)))
    assert deep > count_parameters(build_model(ModelConfig(backbone_depth=50)))


# --- Prediction ---

def test_predict_mask_ties_to_background() -> None:
    logits = torch.tensor([[[[0.0, 1.0], [2.0, -1.0]], [[0.0, 2.0], [1.0, -1.0]]]])
    mask = predict_mask(Prediction.from_heads(logits, logits))
    assert mask.tolist() == [[[0, 1], [0, 0]]]


# --- Gradient flow ---

def test_gradient_reaches_every_parameter() -> None:
    """One step at 128×160, scheme A: ≥99% of parameter arrays and every RCA 1×1 conv get gradient."""
    model = build_model(_config(scheme="A")).train()
    rgb, thermal = _inputs(128, 160, batch=2)
    target = torch.zeros(2, 128, 160, dtype=torch.int64)
    target[:, 40:90, 50:110] = 1
    optimizer = torch.optim.SGD(model.parameters(), lr=0.01, momentum=0.9)
    optimizer.zero_grad()
    loss = combined_loss(model(rgb, thermal).logits_final, target)
    assert torch.isfinite(loss)
    loss.backward()
    params = list(model.named_parameters())
    with_grad = [n for n, p in params if p.grad is not None and bool(p.grad.abs().sum() > 0)]
    assert len(with_grad) / len(params) >= 0.99
    for rca in model.fusion:
        assert rca.conv.weight.grad is not None
        assert float(rca.conv.weight.grad.abs().sum()) > 0.0
    optimizer.step()
