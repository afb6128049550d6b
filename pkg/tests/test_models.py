import numpy as np
import pytest
import torch

from oilseg.graph import INFERENCE, GraphError, execute_graph
from oilseg.models import (
    ModelSpec, activation_maximization, build_classifier, build_ofcn, build_pixelwise, is_fully_convolutional,
    load_model, ofcn_channels, param_breakdown, param_count, pooling_depth, receptive_field, save_model,
)


def hand_recurrence():
    # two 3x3 convs then a 2x2 pool per block; rf at the second conv of each block
    rf, jump, out = 1, 1, []
    for block in range(5):
        rf += 2 * jump
        rf += 2 * jump
        out.append(rf)
        if block < 4:
            rf += jump
            jump *= 2
    return out


def test_receptive_field_matches_hand_recurrence():
    report = receptive_field(build_ofcn(8))
    convs = [e.receptive_field for e in report.entries if "conv2" in e.layer]
    assert convs == hand_recurrence() == [5, 14, 32, 68, 140]
    assert report.deepest == 140
    assert report.block_values() == [6, 16, 36, 76, 140]
    assert report["enc1_conv1"].receptive_field == 3


def test_ofcn_channels_and_param_count():
    assert ofcn_channels(32) == [32, 64, 128, 256, 512, 256, 128, 64, 32]
    g = build_ofcn(32)
    assert param_count(g) == 7_873_729
    assert sum(n for _, n in param_breakdown(g)) == param_count(g)


def test_ofcn_shapes_and_range():
    g = build_ofcn(8)
    for size in (16, 48, 96):
        run = execute_graph(g, {"image": torch.rand(1, 1, size, size)}, INFERENCE)
        p = run.values["prob"]
        assert p.shape == (1, 1, size, size)
        assert bool(((p >= 0) & (p <= 1)).all())
    with pytest.raises(GraphError):
        execute_graph(g, {"image": torch.rand(1, 1, 20, 20)}, INFERENCE)


def test_ofcn_variants():
    assert pooling_depth(build_ofcn(8)) == 4
    assert not any(n.op == "batch_norm" for n in build_ofcn(8, use_bn=False).nodes)
    assert not any(n.op == "squeeze_excitation" for n in build_ofcn(8, use_se=False).nodes)
    assert is_fully_convolutional(build_ofcn(8))
    with pytest.raises(GraphError):
        build_ofcn(0)


@pytest.mark.parametrize("k", [2, 3, 4])
def test_classifier_simplex(k):
    g = build_classifier(k, input_size=64)
    assert not is_fully_convolutional(g)
    out = execute_graph(g, {"image": torch.rand(3, 2, 64, 64)}, INFERENCE).values["probs"]
    assert out.shape == (3, k)
    assert torch.allclose(out.sum(dim=1), torch.ones(3), atol=1e-5)


def test_classifier_param_count_and_errors():
    assert param_count(build_classifier(4)) == 4_936_164
    with pytest.raises(GraphError):
        build_classifier(5)
    with pytest.raises(GraphError):
        build_classifier(2, input_size=100)


def test_pixelwise_model():
    g = build_pixelwise(2.0, -1.0)
    x = torch.rand(1, 1, 5, 7)
    out = execute_graph(g, {"image": x}).values["prob"]
    assert torch.allclose(out, torch.sigmoid(2 * x - 1))


def test_model_save_load(tmp_path):
    g = build_ofcn(8, use_se=False, dropout_rate=0.25, seed=4)
    save_model(g, tmp_path / "m.oseg")
    h = load_model(tmp_path / "m.oseg")
    assert h.descriptor == g.descriptor
    x = torch.rand(1, 1, 32, 32)
    assert torch.equal(execute_graph(g, {"image": x}).values["prob"], execute_graph(h, {"image": x}).values["prob"])
    assert ModelSpec.from_dict(g.descriptor).dropout_rate == 0.25


def test_activation_maximization_trace_non_decreasing():
    g = build_ofcn(8, seed=0)
    res = activation_maximization(g, "enc2_conv1", 3, steps=6, size=(32, 32), rng=1)
    assert all(b >= a for a, b in zip(res.trace, res.trace[1:]))
    assert res.trace[-1] > res.trace[0]
    assert res.image.shape == (32, 32) and res.image.min() >= 0 and res.image.max() <= 1
    with pytest.raises(GraphError):
        activation_maximization(g, "enc2_conv1", 99, steps=1, size=(32, 32))
    with pytest.raises(GraphError):
        activation_maximization(g, "no_such_layer", 0, steps=1)
