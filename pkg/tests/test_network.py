import numpy as np
import pytest

from ranet import autodiff as ad
from ranet.config import (
    PRESET_NAMES,
    RANetConfig,
    StepMode,
    downsample_positions,
    fusion_split,
    load_config,
    load_preset,
    resolve_config,
    save_config,
    validate_config,
)
from ranet.errors import ConfigError, DataError, UsageError
from ranet.inference import forward_anytime
from ranet.network import DenseLayer, Execution, FusionLayer, build_graph, forward_logits
from ranet.planning import DENSE, FUSION_DOWN, FUSION_KEEP, plan_fusion_layer, plan_initial_layer, plan_subnetwork

from oracles import MacCounter

PUBLISHED_PRESETS = {
    # name: (classifiers, channels top-down, growth top-down, sizes top-down, blocks top-down)
    "model-c-1": (6, (16, 32, 64), (6, 12, 24), (32, 16, 8), (6, 4, 2)),
    "model-c-2": (8, (16, 32, 32, 64), (6, 12, 12, 24), (32, 16, 16, 8), (8, 6, 4, 2)),
    "model-c-3": (8, (16, 16, 32, 64), (6, 6, 12, 24), (32, 16, 8, 8), None),
    "model-i-1": (8, (32, 64, 64, 128), (16, 32, 32, 64), None, (8, 6, 4, 2)),
    "model-i-2": (8, (64, 128, 128, 256), (16, 32, 32, 64), None, (8, 6, 4, 2)),
}


def tiny_cfg(**kw):
    base = dict(name="t", num_scales=2, base_features=2, scale_of_base=(1, 2), blocks=(1, 2),
                base_channels=(8, 4), growth_rates=(4, 4), step_mode=StepMode("even", 1),
                num_classes=4, input_resolution=(8, 8))
    base.update(kw)
    return RANetConfig(**base)


# presets [PAPER]

@pytest.mark.parametrize("name", sorted(PUBLISHED_PRESETS))
def test_preset_matches_published_lists(name):
    k, channels, growth, sizes, blocks = PUBLISHED_PRESETS[name]
    cfg = load_preset(name)
    assert validate_config(cfg).num_classifiers == k
    assert cfg.published_order("base_channels") == channels
    assert cfg.published_order("growth_rates") == growth
    if sizes is not None:
        assert tuple(cfg.resolution(s)[0] for s in cfg.published_order("scale_of_base")) == sizes
    if blocks is not None:
        assert cfg.published_order("blocks") == blocks
    assert cfg.fusion_compression == 0.25


def test_preset_step_modes():
    c1 = load_preset("model-c-1")
    assert [c1.step_mode.layers(j) for j in (1, 2, 3)] == [4, 4, 4]
    lg = load_preset("model-c-1", "lg")
    assert [lg.step_mode.layers(j) for j in (1, 2, 3)] == [2, 4, 6]
    assert load_preset("model-i-2").step_mode.layers(5) == 8


def test_model_c1_stored_bottom_up():
    cfg = load_preset("model-c-1")
    assert cfg.scale_of_base == (1, 2, 3)
    assert cfg.blocks == (2, 4, 6)
    assert cfg.base_channels == (64, 32, 16)
    assert cfg.growth_rates == (24, 12, 6)


def test_mini_is_model_c1_at_quarter_width():
    mini, c1 = load_preset("mini"), load_preset("model-c-1")
    assert load_preset("model-c-1-mini") == mini
    assert mini.blocks == c1.blocks and mini.scale_of_base == c1.scale_of_base
    assert mini.base_channels == tuple(c // 4 for c in c1.base_channels)
    assert validate_config(mini).num_classifiers == 6


def test_unknown_preset():
    with pytest.raises(ConfigError, match="unknown preset"):
        load_preset("model-z")
    with pytest.raises(ConfigError):
        load_preset("model-c-1", "zigzag")


# validation

def test_validate_reports_all_violations():
    cfg = tiny_cfg(blocks=(4, 4), input_resolution=(30, 30), num_scales=3, scale_of_base=(1, 3))
    with pytest.raises(ConfigError) as err:
        validate_config(cfg)
    fields = {f for f, _ in err.value.violations}
    assert {"blocks", "input_resolution", "scale_of_base"} <= fields
    msgs = " ".join(c for _, c in err.value.violations)
    assert "b_h must be strictly increasing" in msgs


def test_validate_resolution_message():
    cfg = load_preset("model-c-1").replace(input_resolution=(30, 30))
    with pytest.raises(ConfigError, match="resolution not divisible by 4"):
        validate_config(cfg)


def test_validate_channel_and_growth_positive():
    with pytest.raises(ConfigError):
        validate_config(tiny_cfg(base_channels=(0, 4)))
    with pytest.raises(ConfigError):
        validate_config(tiny_cfg(fusion_compression=1.0))


def test_downsample_positions_error_when_too_few_fusion_positions():
    with pytest.raises(ConfigError, match="downsampling positions"):
        downsample_positions((2, 4), (1, 3), 2)


def test_config_yaml_round_trip(tmp_path):
    cfg = load_preset("model-c-2", "lg")
    path = tmp_path / "c2.yaml"
    save_config(cfg, path)
    assert load_config(path) == cfg
    assert resolve_config(str(path)) == cfg
    assert resolve_config("model-c-2") == load_preset("model-c-2")
    with pytest.raises(ConfigError):
        resolve_config(str(tmp_path / "missing.yaml"))


# planning

def test_initial_layer_model_c1():
    plans = plan_initial_layer(load_preset("model-c-1"))
    assert [p.resolution[0] for p in plans] == [32, 16, 8]
    assert [p.out_channels for p in plans] == [16, 32, 64]
    assert [p.conv for p in plans] == ["regular", "strided", "strided"]


def test_initial_layer_model_c2_repeats_a_scale():
    plans = plan_initial_layer(load_preset("model-c-2"))
    assert [p.resolution[0] for p in plans] == [32, 16, 16, 8]
    assert [p.conv for p in plans] == ["regular", "strided", "regular", "strided"]


def test_initial_layer_single_scale():
    cfg = tiny_cfg(num_scales=1, base_features=1, scale_of_base=(1,), blocks=(1,), base_channels=(4,), growth_rates=(2,))
    plans = plan_initial_layer(cfg)
    assert len(plans) == 1 and plans[0].conv == "regular" and plans[0].source == "image"


def test_subnetwork_plans_model_c1():
    cfg = load_preset("model-c-1")
    top = plan_subnetwork(cfg, 3)
    assert [p.kind for p in top] == [FUSION_KEEP, FUSION_DOWN, FUSION_KEEP, FUSION_DOWN, DENSE, DENSE]
    assert [p.out_scale for p in top] == [3, 2, 2, 1, 1, 1]
    assert [p.index for p in top if p.classifier_after] == [5, 6]
    assert [p.index for p in top if p.transition_after] == [2, 4, 5]
    assert all(p.fusion_source == (2, p.index) for p in top[:4])
    bottom = plan_subnetwork(cfg, 1)
    assert [p.kind for p in bottom] == [DENSE, DENSE]
    assert [p.classifier_after for p in bottom] == [True, True]
    for h in (1, 2, 3):
        for p in plan_subnetwork(cfg, h):
            assert not p.classifier_after or p.out_scale == 1
            assert p.out_scale == (p.in_scale - 1 if p.kind == FUSION_DOWN else p.in_scale)


def test_subnetwork_same_scale_fusion_has_no_downsampling():
    cfg = tiny_cfg(num_scales=1, scale_of_base=(1, 1), blocks=(2, 4), input_resolution=(4, 4))
    plans = plan_subnetwork(cfg, 2)
    assert [p.kind for p in plans] == [FUSION_KEEP, FUSION_KEEP, DENSE, DENSE]
    assert all(p.out_scale == 1 for p in plans)


def test_subnetwork_index_out_of_range():
    with pytest.raises(ConfigError):
        plan_subnetwork(load_preset("model-c-1"), 4)


def test_fusion_split_examples():
    fp = plan_fusion_layer("keep", 16, 32, 24, 0.25)
    assert (fp.current_out, fp.source_out) == (18, 6)  # [PAPER] 75% / 25% of growth 24
    assert fusion_split(4, 0.25) == (3, 1)
    assert fusion_split(6, 0.5) == (3, 3)
    assert plan_fusion_layer("keep", 4, 4, 4, 0.25, scale_gap=0).source_transform == "regular"
    assert plan_fusion_layer("down", 4, 4, 4, 0.25).source_transform == "up"
    with pytest.raises(ConfigError):
        plan_fusion_layer("keep", 4, 4, 4, 0.0)


# graph and costs

def test_count_flops_range_and_monotone():
    for name in PRESET_NAMES:
        g = build_graph(load_preset(name))
        costs = g.prefix_costs()
        assert all(a < b for a, b in zip(costs, costs[1:])), name
        assert costs[-1] == sum(s.macs for s in g.steps)
    g = build_graph(load_preset("mini"))
    with pytest.raises(UsageError):
        g.count_flops(0)
    with pytest.raises(UsageError):
        g.count_flops(7)


def test_model_c3_full_cost_in_figure_range():
    full = build_graph(load_preset("model-c-3")).count_flops(8)
    assert 1e7 <= full <= 1e8


@pytest.mark.parametrize("name", ["tiny", "mini", "model-c-1"])
def test_count_flops_matches_naive_loop_counter(name, monkeypatch):
    g = build_graph(load_preset(name), seed=1)
    x = np.random.default_rng(0).standard_normal((1,) + (3,) + g.config.input_resolution).astype(np.float32)
    counter = MacCounter(monkeypatch)
    run = Execution(g, x)
    for k in range(1, g.num_classifiers + 1):
        run.run_to_head(k)
        assert counter.macs == g.count_flops(k), (name, k)


def test_classifier_inputs_at_lowest_resolution():
    for name in PRESET_NAMES:
        g = build_graph(load_preset(name))
        cfg = g.config
        expected = tuple(r // 2 ** (cfg.num_scales - 1) for r in cfg.input_resolution)
        heads = [s for s in g.steps if s.kind == "head"]
        assert len(heads) == g.num_classifiers
        for s in heads:
            assert tuple(s.unit.in_shape[1:]) == expected, name


def test_dense_connectivity_channel_growth():
    for name in ("mini", "model-c-2", "model-c-3"):
        g = build_graph(load_preset(name))
        for st in g.steps:
            if st.kind != "block":
                continue
            h = st.key[0]
            growth = g.config.growth_rates[h - 1]
            c0 = st.unit.in_shape[0]
            for i, layer in enumerate(st.unit.layers):
                assert layer.in_shape[0] == c0 + i * growth
                assert layer.out_shape[0] == layer.in_shape[0] + growth
                assert isinstance(layer, DenseLayer if st.unit.plan.kind == DENSE else FusionLayer)


def test_transitions_halve_channels_and_count_per_scale():
    g = build_graph(load_preset("model-c-1"))
    for st in g.steps:
        if st.kind == "transition":
            assert st.unit.out_shape[0] == st.unit.in_shape[0] // 2
    counts = {h: sum(1 for st in g.steps if st.kind == "transition" and st.key[0] == h) for h in (1, 2, 3)}
    assert counts == {1: 1, 2: 2, 3: 3}  # [PAPER] s transition layers for Sub-network s


def test_model_c1_forward_gives_six_ten_way_outputs():
    g = build_graph(load_preset("model-c-1"))
    x = np.random.default_rng(0).standard_normal((2, 3, 32, 32)).astype(np.float32)
    probs = forward_anytime(g, x)
    assert len(probs) == 6
    for p in probs:
        assert p.shape == (2, 10)
        np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-6)


def test_tiny_smoke_config():
    g = build_graph(tiny_cfg())
    assert g.num_classifiers == 2
    logits = forward_logits(g, np.zeros((3, 3, 8, 8), np.float32))
    assert [lg.shape for lg in logits] == [(3, 4), (3, 4)]


def test_same_seed_same_parameters():
    a, b, c = (build_graph(load_preset("mini"), seed=s) for s in (3, 3, 4))
    for (na, pa), (nb, pb) in zip(a.named_parameters(), b.named_parameters()):
        assert na == nb
        np.testing.assert_array_equal(pa.data, pb.data)
    assert any(not np.array_equal(pa.data, pc.data) for pa, pc in zip(a.parameters(), c.parameters()))


def test_initialization_convention():
    g = build_graph(load_preset("mini"), seed=0)
    for name, p in g.named_parameters():
        if p.role == "bn-gamma":
            assert np.all(p.data == 1)
        elif p.role in ("bn-beta", "linear-bias"):
            assert not p.data.any()
        elif p.role == "conv-kernel" and p.size > 500:
            fan_in = p.data[0].size
            assert abs(p.data.std() - np.sqrt(2.0 / fan_in)) < 0.2 * np.sqrt(2.0 / fan_in), name


def test_execution_rejects_wrong_shape():
    g = build_graph(load_preset("mini"))
    with pytest.raises(DataError):
        Execution(g, np.zeros((1, 3, 16, 16), np.float32))


def test_summary_lists_layers_and_classifiers():
    g = build_graph(load_preset("mini"))
    text = g.summary()
    assert "classifier 6" in text and "conv" in text
    assert str(g.count_flops(6)) in text
    assert len(g.rows()) > 50
