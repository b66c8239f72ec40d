from dataclasses import replace

import numpy as np
import pytest

from conftest import max_abs
from hrss import io, net
from hrss.functional import count_macs
from hrss.gradcheck import weighted_sum_loss
from hrss.nn import Module, fan_in, zeros
from hrss.tensor import Tape, Tensor


def tiny(**kw):
    base = net.ModelConfig(variant="tiny", channels=(4, 8, 8, 8), blocks=(1, 1, 1, 1), modules=(1, 1, 1, 1),
                           height=64, width=64, state_dim=2, stem_channels=4, stage1_width=2,
                           head_channels=(2, 2, 2, 2), head_features=8, num_classes=5)
    return replace(base, **kw)


def randomize(module, rng, scale=0.3):
    for p in module.parameters():
        p.data = p.data + scale * rng.standard_normal(p.shape)


# ---------------------------------------------------------------------------
# stem, stage 1, transitions


@pytest.mark.parametrize("hw,out", [((256, 192), (64, 48)), ((64, 64), (16, 16))])
def test_stem_shapes(rng, hw, out):
    stem = net.Stem(64, rng=rng)
    assert stem(Tensor(np.zeros((1, 3) + hw))).shape == (1, 64) + out


def test_stem_rejects_indivisible_input():
    with pytest.raises(ValueError, match="multiples of 32"):
        net.Stem(8)(Tensor(np.zeros((1, 3, 250, 192))))


def test_stage1_shape_and_channels(rng):
    stage = net.Stage1(64, 64, 2, rng=rng)
    assert stage.out_channels == 256
    assert stage(Tensor(rng.standard_normal((1, 64, 8, 6)))).shape == (1, 256, 8, 6)


def test_bottleneck_with_zero_final_conv_is_identity(rng):
    blk = net.Bottleneck(16, 4, rng=rng)
    blk.conv3.g.data = np.zeros(16)
    x = np.abs(rng.standard_normal((1, 16, 4, 5)))
    assert np.array_equal(blk(Tensor(x)).data, x)


def test_transition_channels_and_resolutions(rng):
    t = net.Transition((256,), (32, 64), rng=rng)
    out = t([Tensor(rng.standard_normal((1, 256, 64, 48)))])
    assert [o.shape for o in out] == [(1, 32, 64, 48), (1, 64, 32, 24)]
    t3 = net.Transition((32, 64, 128), (32, 64, 128, 256), rng=rng)
    assert t3.adjust == [None, None, None]
    xs = [Tensor(np.zeros((1, c, 32 >> i, 24 >> i))) for i, c in enumerate((32, 64, 128))]
    assert t3(xs)[3].shape == (1, 256, 4, 3)


# ---------------------------------------------------------------------------
# fusion


def test_fuse_single_branch_is_identity(rng):
    x = Tensor(rng.standard_normal((1, 4, 3, 3)))
    assert net.fuse([x], net.Fuse((4,), rng=rng))[0] is x


def identity_fuse(channels):
    layer = net.Fuse(channels, norm=False)
    for _, m in layer.children():
        if isinstance(m, net.ConvNorm):
            m.w.data = np.eye(m.cout, m.cin).reshape(m.cout, m.cin, 1, 1)
        else:
            m.dw.w.data = np.zeros(m.dw.w.shape)
            m.dw.w.data[:, 0, 1, 1] = 1.0
            m.pw.w.data = np.eye(m.pw.cout, m.pw.cin).reshape(m.pw.w.shape)
    return layer


def test_fuse_constants_with_identity_resampling():
    layer = identity_fuse((4, 4, 4))
    values = (1.5, 2.0, 0.25)
    xs = [Tensor(np.full((1, 4, 8 >> i, 8 >> i), v)) for i, v in enumerate(values)]
    out = layer(xs)
    for i, o in enumerate(out):
        assert o.shape == xs[i].shape
        assert np.allclose(o.data, sum(values), rtol=0, atol=1e-15)


def test_fuse_output_shapes(rng):
    layer = net.Fuse((4, 8, 16), rng=rng)
    xs = [Tensor(rng.standard_normal((2, c, 8 >> i, 12 >> i))) for i, c in enumerate((4, 8, 16))]
    assert [o.shape for o in layer(xs)] == [x.shape for x in xs]


def test_fuse_down_path_structure(rng):
    layer = net.Fuse((4, 8, 16, 32), rng=rng)
    path = layer.paths[3][0]
    assert len(path) == 3
    assert [s.pw.act for s in path] == [True, True, False]
    assert [s.pw.cout for s in path] == [4, 4, 32]


# ---------------------------------------------------------------------------
# full model


def test_s_topology_shapes_and_counts():
    cfg = net.preset("S")
    assert cfg.channels == (32, 64, 128, 256) and cfg.blocks == (2, 2, 2, 2) and cfg.modules == (1, 1, 4, 2)
    assert net.preset("B").channels == (80, 160, 320, 640)
    assert [cfg.branch_resolution(b) for b in range(4)] == [(64, 48), (32, 24), (16, 12), (8, 6)]
    model = net.HRVMamba(cfg)
    assert [len(m) for m in model.stages] == [1, 4, 2]
    assert [len(m.branches) for s in model.stages for m in s] == [2, 3, 3, 3, 3, 4, 4]


def test_tiny_forward_branches_and_logits(rng):
    cfg = tiny()
    model = net.HRVMambaClassifier(cfg, rng=rng)
    x = Tensor(rng.standard_normal((1, 3, 64, 64)))
    branches = net.forward(x, model.backbone)
    assert [b.shape for b in branches] == [(1, 4, 16, 16), (1, 8, 8, 8), (1, 8, 4, 4), (1, 8, 2, 2)]
    assert net.classify(branches, model.head).shape == (1, 5)


def test_default_head_has_thousand_classes():
    head = net.ClassificationHead(net.preset("S"))
    assert head.fc_w.shape == (2048, 1000)


def test_batch_permutation_equivariance(rng):
    model = net.HRVMambaClassifier(tiny(), rng=rng)
    randomize(model, rng, 0.1)
    x = rng.standard_normal((3, 3, 32, 32))
    perm = [2, 0, 1]
    a = model(Tensor(x)).data
    b = model(Tensor(x[perm])).data
    assert np.array_equal(a[perm], b)


def test_every_parameter_receives_gradient(rng):
    model = net.HRVMambaClassifier(tiny(), rng=rng)
    randomize(model, rng)
    x = Tensor(rng.standard_normal((1, 3, 64, 64)))
    probe = rng.standard_normal((1, 5))
    with Tape() as tape:
        loss = weighted_sum_loss(model(x), probe)
    grads = tape.backward(loss)
    dead = [name for name, p in model.named_parameters() if not np.any(grads.get(p, np.zeros(1)) != 0)]
    assert dead == []


def test_analytic_macs_match_instrumented_count(rng):
    cfg = tiny(use_dcn=True, use_multidw=True, multidw_in_ffn=True)
    model = net.HRVMambaClassifier(cfg, rng=rng)
    with count_macs() as mc:
        model(Tensor(rng.standard_normal((1, 3, 64, 32))))
    assert mc.total == model.macs(64, 32)


def test_count_flops_rejects_bad_size():
    with pytest.raises(ValueError, match="multiples of 32"):
        net.count_flops(tiny(), 48, 64)


# ---------------------------------------------------------------------------
# accounting


def test_linear_parameter_count(rng):
    class Lin(Module):
        def __init__(self):
            self.w = fan_in(rng, (7, 3), 7)
            self.b = zeros(rng, (3,))

    assert Lin().num_parameters() == 7 * 3 + 3


def test_ablation_parameter_delta_is_predictor_minus_depthwise():
    cfg = tiny()
    plain = net.count_params(cfg.with_ablation("ss2d"))
    deform = net.count_params(cfg.with_ablation("dss2d"))
    model = net.HRVMamba(cfg)
    inners = [blk.cfg.inner for s in model.stages for m in s for blocks in m.branches for blk in blocks]
    assert deform - plain == sum(108 * d + 108 for d in inners)


def test_doubling_channels_doubles_branch_widths():
    cfg = tiny()
    wide = replace(cfg, channels=tuple(2 * c for c in cfg.channels))
    for a, b in zip(net.HRVMamba(cfg).transitions, net.HRVMamba(wide).transitions):
        assert b.nxt == tuple(2 * c for c in a.nxt)
    blk = net.HRVMamba(wide).stages[0][0].branches[1][0]
    assert blk.ffn.w1.shape == (16, 32) and blk.mixer.w_in.shape == (16, 64)


# ---------------------------------------------------------------------------
# configuration and weights


def test_config_round_trip(tmp_path):
    cfg = net.preset("B").with_ablation("multidw-in-ffn")
    path = tmp_path / "cfg.json"
    cfg.save(path)
    assert net.ModelConfig.load(path) == cfg
    assert set(cfg.to_dict()) == {"variant", "topology", "block", "input", "stem", "head"}


def test_config_rejects_unknown_keys_and_bad_lengths():
    with pytest.raises(ValueError, match="unknown config keys"):
        net.ModelConfig.loads('{"variant": "S", "topology": {"widths": [1, 2, 3, 4]}}')
    with pytest.raises(ValueError, match="needs 4 entries"):
        net.ModelConfig(channels=(32, 64))
    with pytest.raises(ValueError, match="unknown variant"):
        net.preset("L")


def test_weights_round_trip_through_container(tmp_path, rng):
    cfg = tiny()
    model = net.HRVMamba(cfg, rng=rng)
    randomize(model, rng)
    path = tmp_path / "w.hrt"
    offsets = io.save_weights(path, model.state_dict())
    assert set(offsets) == set(model.state_dict())
    clone = net.HRVMamba(cfg, rng=rng)
    clone.load_state_dict({k: v.data for k, v in io.load_weights(path).items()})
    x = Tensor(rng.standard_normal((1, 3, 32, 32)))
    assert all(max_abs(a, b) == 0.0 for a, b in zip(model(x), clone(x)))
