import numpy as np
import pytest

from semstream.codec import CodecConfig
from semstream.ratecontrol import (BandwidthEstimator, HysteresisConfig, Mode,
                                   RateAnchors, RateController, RateDecision,
                                   compute_anchors, gop_token_stream_bytes, raw_mode)
from semstream.transport import packetize_tokens
from semstream.video import GOP_SIZE


# ---------------------------------------------------------------------------
# anchors

def test_anchor_ordering_validation():
    with pytest.raises(ValueError):
        RateAnchors(r_3x=100.0, r_2x=50.0)
    with pytest.raises(ValueError):
        RateAnchors(r_3x=0.0, r_2x=50.0)


def test_anchors_linear_in_fps():
    a30 = compute_anchors(640, 480, 30.0)
    a15 = compute_anchors(640, 480, 15.0)
    assert a15.r_3x == pytest.approx(a30.r_3x / 2)
    assert a15.r_2x == pytest.approx(a30.r_2x / 2)


def test_anchor_ratio_near_scale_squared_at_1080p():
    a = compute_anchors(1920, 1080, 30.0)
    assert a.r_3x / a.r_2x == pytest.approx(0.47, abs=0.05)


def test_anchors_match_serialize_and_measure_oracle(rng):
    # Oracle: serialize a real full-mask GoP's packets and count the bytes.
    from semstream.codec import encode_gop, scale_gop
    from semstream.synth import MovingSquareClip
    cfg = CodecConfig()
    clip = MovingSquareClip(64, 64, 9, seed=0)
    gop = clip.gop(0)
    for scale in (2, 3):
        working = scale_gop(gop, scale, "down")
        i_tokens, p_tokens = encode_gop(working, cfg)
        measured = sum(len(p.to_bytes()) for p in
                       packetize_tokens(i_tokens, scale) + packetize_tokens(p_tokens, scale))
        assert gop_token_stream_bytes(64, 64, scale, cfg) == measured
    anchors = compute_anchors(64, 64, 30.0, cfg)
    expect_r3 = gop_token_stream_bytes(64, 64, 3, cfg) * 8 * 30 / GOP_SIZE
    assert anchors.r_3x == pytest.approx(expect_r3)


# ---------------------------------------------------------------------------
# Algorithm branch selection

ANCHORS = RateAnchors(r_3x=100_000.0, r_2x=220_000.0)


def test_raw_mode_branches_exhaustive_grid():
    for b in np.linspace(0.0, 2 * ANCHORS.r_2x, 2001):
        mode = raw_mode(float(b), ANCHORS)
        if b < ANCHORS.r_3x:
            assert mode == Mode.EXTREME_LOW
        elif b < ANCHORS.r_2x:
            assert mode == Mode.LOW
        else:
            assert mode == Mode.SUFFICIENT


def test_decision_fields_per_mode():
    ctl = RateController(ANCHORS, HysteresisConfig(enabled=False))
    d = ctl.update(50_000.0)
    assert d.mode == Mode.EXTREME_LOW and d.scale == 3
    assert d.residual_budget == 0.0
    assert d.drop_rate == pytest.approx(0.25)  # 50% shortfall capped
    d = ctl.update(150_000.0)
    assert d.mode == Mode.LOW and d.scale == 3 and d.drop_rate == 0.0
    assert d.residual_budget == pytest.approx(50_000.0)
    d = ctl.update(300_000.0)
    assert d.mode == Mode.SUFFICIENT and d.scale == 2
    assert d.residual_budget == pytest.approx(80_000.0)


def test_decision_invariants_enforced():
    with pytest.raises(ValueError):
        RateDecision(Mode.EXTREME_LOW, scale=2, drop_rate=0.1, residual_budget=0.0)
    with pytest.raises(ValueError):
        RateDecision(Mode.LOW, scale=3, drop_rate=0.1, residual_budget=1.0)
    with pytest.raises(ValueError):
        RateDecision(Mode.SUFFICIENT, scale=2, drop_rate=0.2, residual_budget=1.0)


# ---------------------------------------------------------------------------
# hysteresis

def test_upward_needs_streak_of_three():
    ctl = RateController(ANCHORS, initial_mode=Mode.LOW)
    b = ANCHORS.r_2x * 1.2
    assert ctl.update(b).mode == Mode.LOW
    assert ctl.update(b).mode == Mode.LOW
    assert ctl.update(b).mode == Mode.SUFFICIENT


def test_upward_streak_resets_on_dip():
    ctl = RateController(ANCHORS, initial_mode=Mode.LOW)
    b = ANCHORS.r_2x * 1.2
    ctl.update(b)
    ctl.update(b)
    ctl.update(ANCHORS.r_2x * 1.05)  # above boundary but below the 1.10 margin
    assert ctl.mode == Mode.LOW
    ctl.update(b)
    ctl.update(b)
    assert ctl.update(b).mode == Mode.SUFFICIENT


def test_downward_is_fail_fast_and_can_skip_levels():
    ctl = RateController(ANCHORS, initial_mode=Mode.SUFFICIENT)
    d = ctl.update(ANCHORS.r_3x * 0.5)
    assert d.mode == Mode.EXTREME_LOW


def test_downward_respects_margin():
    ctl = RateController(ANCHORS, initial_mode=Mode.SUFFICIENT)
    # Inside the 5% dead band: hold the mode.
    d = ctl.update(ANCHORS.r_2x * 0.97)
    assert d.mode == Mode.SUFFICIENT
    d = ctl.update(ANCHORS.r_2x * 0.94)
    assert d.mode == Mode.LOW


def test_jitter_around_boundary_switches_at_most_once():
    for boundary in (ANCHORS.r_3x, ANCHORS.r_2x):
        ctl = RateController(ANCHORS, initial_mode=Mode.LOW)
        rng = np.random.default_rng(0)
        switches = 0
        prev_mode = ctl.mode
        for _ in range(100):
            b = boundary * (1.0 + rng.uniform(-0.05, 0.05))
            ctl.update(b)
            if ctl.mode != prev_mode:
                switches += 1
                prev_mode = ctl.mode
        assert switches <= 1


def test_hysteresis_disabled_follows_branches():
    ctl = RateController(ANCHORS, HysteresisConfig(enabled=False),
                         initial_mode=Mode.SUFFICIENT)
    for b in np.linspace(0, 2 * ANCHORS.r_2x, 500):
        assert ctl.update(float(b)).mode == raw_mode(float(b), ANCHORS)


# ---------------------------------------------------------------------------
# bandwidth estimator

def test_estimator_converges_on_constant_delivery():
    est = BandwidthEstimator()
    # 500 kbps: 6250 bytes per 100 ms.
    for i in range(12):
        est.update(6250, 100.0, now=i * 100.0)
    assert est.estimate() == pytest.approx(500_000.0, rel=0.05)


def test_estimator_windowed_max_burst_then_decay():
    est = BandwidthEstimator()
    t = 0.0
    for _ in range(3):
        est.update(6250, 100.0, t)
        t += 100.0
    est.update(25_000, 100.0, t)  # 2 Mbps burst sample
    t += 100.0
    for i in range(9):
        est.update(6250, 100.0, t)
        t += 100.0
        assert est.estimate() == pytest.approx(2_000_000.0)
    est.update(6250, 100.0, t)  # 10th sample after the burst: it ages out
    assert est.estimate() == pytest.approx(500_000.0)


def test_estimator_zero_interval_rejected():
    est = BandwidthEstimator()
    with pytest.raises(ValueError):
        est.update(100, 0.0, now=0.0)


def test_estimator_zero_sample_on_idle_tick():
    est = BandwidthEstimator()
    est.update(6250, 100.0, now=100.0)
    est.on_tick(250.0)
    assert len(est.samples) == 2
    assert est.samples[-1][1] == 0.0
    assert est.estimate() == pytest.approx(500_000.0)  # max of remaining window


def test_estimator_sandwich_bounds(rng):
    # Windowed max is >= the window mean rate and <= the window peak rate.
    est = BandwidthEstimator()
    t = 0.0
    rates = []
    for _ in range(10):
        nbytes = int(rng.integers(1000, 20_000))
        est.update(nbytes, 100.0, t)
        rates.append(nbytes * 8 * 10)
        t += 100.0
    assert min(rates) <= np.mean(rates) <= est.estimate() <= max(rates)


def test_estimator_coalesces_same_instant_deliveries():
    est = BandwidthEstimator()
    est.on_delivered(1000, 0.0)   # seeds the clock
    est.on_delivered(500, 60.0)
    est.on_delivered(700, 60.0)
    est.on_delivered(300, 60.0)
    # One sample: 1500 bytes over 60 ms = 200 kbit/s.
    assert len(est.samples) == 1
    assert est.estimate() == pytest.approx(200_000.0)


def test_estimator_tick_does_not_shorten_delivery_interval():
    est = BandwidthEstimator()
    est.on_delivered(1500, 0.0)
    est.on_tick(100.0)  # no sample yet (no prior ring sample)
    est.on_delivered(1500, 120.0)
    # Interval measured from the delivery at t=0, not the tick.
    assert est.estimate() == pytest.approx(1500 * 8 * 1000 / 120.0)


def test_estimator_report_every_100ms():
    est = BandwidthEstimator()
    est.update(6250, 100.0, now=50.0)
    assert est.maybe_report(60.0) is not None
    assert est.maybe_report(120.0) is None
    assert est.maybe_report(160.0) is not None
    assert est.maybe_report(161.0) is None
