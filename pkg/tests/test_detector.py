import pytest
import torch

from longichange.detector import (
    AttentionGate,
    DetectorConfig,
    SiameseUNet3D,
    count_parameters,
    siamese_inputs,
)

TINY = dict(levels=3, base_channels=4)


def conv(i, o, k):
    return i * o * k ** 3 + o


def conv_block_params(i, o):
    # two bias-free 3^3 convs, each followed by an affine instance norm
    return i * o * 27 + o * o * 27 + 4 * o


def expected_params(cfg: DetectorConfig):
    """Independent tally for the plain-conv variant (no inception)."""
    ch = [cfg.base_channels * 2 ** k for k in range(cfg.levels)]
    in_ch = cfg.in_channels if cfg.siamese else 2 * cfg.in_channels
    enc, prev = 0, in_ch
    for k, c in enumerate(ch):
        extra = in_ch if cfg.use_multiscale_inputs and k > 0 else 0
        enc += conv_block_params(prev + extra, c)
        prev = c
    fuse = sum(conv(2 * c, c, 1) for c in ch) if cfg.siamese else 0
    dec = 0
    for k in range(cfg.levels - 2, -1, -1):
        c, cu = ch[k], ch[k + 1]
        dec += cu * c * 8 + c + conv_block_params(2 * c, c)
        if cfg.use_attention_gates:
            dec += conv(c, c // 2, 1) + conv(cu, c // 2, 1) + conv(c // 2, 1, 1)
    heads = conv(ch[0], 1, 1)
    if cfg.use_deep_supervision:
        heads += sum(conv(ch[k], 1, 1) for k in range(1, cfg.levels))
    return enc, fuse, dec + heads


@pytest.mark.parametrize("flags", [
    dict(), dict(use_attention_gates=False), dict(use_multiscale_inputs=False),
    dict(use_deep_supervision=False), dict(siamese=False),
])
def test_parameter_count_oracle(flags):
    cfg = DetectorConfig(use_inception=False, **TINY, **flags)
    enc, fuse, rest = expected_params(cfg)
    assert count_parameters(SiameseUNet3D(cfg)) == enc + fuse + rest


def test_siamese_shares_encoder():
    cfg = DetectorConfig(use_inception=False, **TINY)
    net = SiameseUNet3D(cfg)
    a, b = net.streams
    assert a is b
    enc, fuse, rest = expected_params(cfg)
    assert count_parameters(net) == enc + fuse + rest < 2 * enc + fuse + rest


def _inputs(seed, shape=(2, 2, 8, 8, 8)):
    g = torch.Generator().manual_seed(seed)
    return torch.rand(shape, generator=g), torch.rand(shape, generator=g)


@pytest.mark.parametrize("inception", [False, True])
def test_output_shapes_and_range(inception):
    net = SiameseUNet3D(DetectorConfig(use_inception=inception, **TINY))
    x1, x2 = _inputs(0, (2, 2, 8, 16, 4))
    with torch.no_grad():
        out = net(x1, x2)
    assert out.final.shape == (2, 1, 8, 16, 4)
    # side outputs run coarse to fine, halving per level
    assert [tuple(s.shape[2:]) for s in out.side_outputs] == [(2, 4, 1), (4, 8, 2)]
    for t in [out.final] + out.side_outputs:
        assert float(t.min()) >= 0 and float(t.max()) <= 1


def test_rejects_bad_inputs():
    net = SiameseUNet3D(DetectorConfig(use_inception=False, **TINY))
    x1, x2 = _inputs(0)
    with pytest.raises(ValueError, match="axis W"):
        net(torch.rand(1, 2, 8, 6, 8), torch.rand(1, 2, 8, 6, 8))
    with pytest.raises(ValueError):
        net(x1, x2[:1])
    with pytest.raises(ValueError):
        net(x1[:, :1], x2[:, :1])


def test_every_parameter_gets_gradient():
    cfg = DetectorConfig(**TINY)
    torch.manual_seed(0)
    net = SiameseUNet3D(cfg)
    reached = {n: False for n, _ in net.named_parameters()}
    for seed in range(5):
        net.zero_grad(set_to_none=True)
        x1, x2 = _inputs(seed)
        out = net(x1, x2)
        target = (torch.rand(out.final.shape, generator=torch.Generator().manual_seed(seed)) > 0.5)
        loss = ((out.final - target.float()) ** 2).mean()
        for s in out.side_outputs:
            loss = loss + s.mean()
        loss.backward()
        for n, p in net.named_parameters():
            reached[n] |= p.grad is not None and bool(p.grad.abs().sum() > 0)
    missing = [n for n, ok in reached.items() if not ok]
    assert not missing, missing


def test_forward_deterministic_and_order_sensitive():
    torch.manual_seed(0)
    net = SiameseUNet3D(DetectorConfig(use_inception=False, **TINY)).eval()
    x1, x2 = _inputs(1)
    with torch.no_grad():
        a = net(x1, x2).final
        b = net(x1, x2).final
        c = net(x2, x1).final
    assert torch.equal(a, b)
    assert not torch.allclose(a, c)


def test_attention_gate_range_and_channel_check():
    gate = AttentionGate(4, 8)
    skip, gating = torch.rand(1, 4, 8, 8, 8), torch.rand(1, 8, 4, 4, 4)
    alpha = gate.coefficients(skip, gating).detach()
    assert alpha.shape == (1, 1, 8, 8, 8)
    assert float(alpha.min()) >= 0 and float(alpha.max()) <= 1
    assert gate(skip, gating).abs().le(skip.abs()).all()
    with pytest.raises(ValueError):
        gate(gating, skip)


def test_heads_start_at_prior():
    net = SiameseUNet3D(DetectorConfig(head_prior=0.02, **TINY))
    for h in net.heads():
        assert torch.sigmoid(h.bias).item() == pytest.approx(0.02)
    with pytest.raises(ValueError):
        DetectorConfig(head_prior=1.0)


def test_kernel_l2_excludes_biases():
    net = SiameseUNet3D(DetectorConfig(use_inception=False, **TINY))
    before = float(net.kernel_l2().detach())
    with torch.no_grad():
        for n, p in net.named_parameters():
            if n.endswith("bias"):
                p.add_(1.0)
    assert float(net.kernel_l2().detach()) == pytest.approx(before)
    with torch.no_grad():
        for p in net.parameters():
            p.zero_()
    assert float(net.kernel_l2().detach()) == 0.0


def test_siamese_inputs():
    x = torch.rand(4, 4, 4)
    h = torch.rand(4, 4, 4)
    x1, x2 = siamese_inputs(x, h)
    assert x1.shape == (1, 2, 4, 4, 4)
    assert torch.equal(x1[0, 0], x) and torch.equal(x2[0, 0], h)
    assert torch.equal(x1[0, 1], (x - h).abs()) and torch.equal(x1[0, 1], x2[0, 1])
