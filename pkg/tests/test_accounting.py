import pytest

from src.config.run_config import RunConfig
from src.services.accounting import (
    REFERENCE_RATIO,
    count_params,
    format_units,
    full_finetune_storage,
    storage_report,
)


def block(d, mult):
    """Pre-norm transformer block: two layer norms, four projections, FFN."""
    return 2 * 2 * d + 4 * (d * d + d) + (d * d * mult + d * mult) + (d * mult * d + d)


def test_no_adapters_leaves_only_tau():
    """Test the adapter-free model tunes tau alone."""
    config = RunConfig.from_mapping({"adapter.video_mode": "none", "adapter.text_mode": "none", "cmi.layers": "none"})
    report = count_params(config)
    assert report.tunable == 1
    assert report.ratio < 0.01
    assert report.breakdown["tau"] == 1


def test_toy_counts_match_closed_form(toy_config):
    """Test the toy report against a hand-summed count of every tensor."""
    d_v, d_t, dp, layers = 48, 32, 8, 2
    trm = block(dp, 2)
    hidden = dp // 4
    video_layer = d_v * dp + dp * d_v + trm + dp + 4 * dp + (2 * dp * hidden + hidden) + (hidden * dp + dp)
    text_layer = d_t * dp + dp * d_t + trm
    cmi = -(d_v * dp) - (d_t * dp) + 4 * 2 + (d_v // 4) * (dp // 2) + (d_t // 4) * (dp // 2)
    tunable = layers * (video_layer + text_layer) + cmi + 1

    vision = 12 * d_v + d_v + 17 * d_v + 2 * d_v + layers * block(d_v, 4) + 2 * d_v + d_v * 32
    text = 64 * d_t + 8 * d_t + layers * block(d_t, 4) + 2 * d_t + d_t * 32

    report = count_params(toy_config)
    assert tunable == 4605
    assert report.tunable == tunable
    assert report.backbone == vision + text == 88512
    assert report.total == report.backbone + report.tunable
    assert report.ratio == pytest.approx(100 * 4605 / (88512 + 4605))


def test_toy_breakdown(toy_config):
    """Test the per-group breakdown sums to the tunable count."""
    report = count_params(toy_config)
    assert report.breakdown == {
        "down": 640,
        "trm": 2400,
        "up": 1280,
        "calibration": 116,
        "temporal": 80,
        "cmi": 88,
        "tau": 1,
    }
    assert sum(report.breakdown.values()) == report.tunable


def test_clip_b16_ratio_bounded():
    """Test the real-dimension report lands below 3% next to the reference 2.56%."""
    report = count_params(RunConfig.clip_b16())
    assert report.backbone == 149_620_736
    assert report.tunable == 2_736_065
    assert 1.5 < report.ratio <= 3.0
    assert report.reference_ratio == REFERENCE_RATIO
    assert report.gap == pytest.approx(report.ratio - 2.56)
    assert sum(report.breakdown.values()) == report.tunable
    assert report.video_ratio > report.text_ratio > 0


def test_report_lines(toy_config):
    """Test the text rendering lists totals and every group."""
    lines = count_params(toy_config).to_lines()
    assert lines[:3] == ["total 93117", "backbone 88512", "tunable 4605"]
    assert "tunable.cmi 88" in lines
    assert lines[-2] == "reference_ratio 2.56"


def test_storage_deployment_example():
    """Test five tasks at 2.5% need 112.5% of one model."""
    units = storage_report(5, 0.025)
    assert units == 1.125
    assert format_units(units) == "1.125"


def test_storage_zero_tasks_and_full_finetune():
    """Test zero tasks is the backbone alone; full fine-tuning stores every copy."""
    assert storage_report(0, 0.3) == 1.0
    assert format_units(full_finetune_storage(5)) == "5.0"


def test_storage_rejects_bad_inputs():
    """Test ratio outside [0, 1] and negative task counts."""
    with pytest.raises(ValueError):
        storage_report(5, 1.5)
    with pytest.raises(ValueError):
        storage_report(-1, 0.1)
    with pytest.raises(ValueError):
        full_finetune_storage(-2)
