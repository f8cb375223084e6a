import json

import pytest
from hypothesis import given
from hypothesis import strategies as st

from uavfusion.msgbus import (KIB, BusError, DuplicateTopicError, MessageBus, NoDataError, PayloadKind,
                              PayloadKindMismatch, TopicSpec, UnknownTopicError, graph_export, stats_csv)
from uavfusion.sim import IMU, ODOM, SCAN, PeriodicTask, Scheduler, standard_topics
from uavfusion.world import VirtualClock


def _bus(*specs):
    bus = MessageBus()
    for s in specs:
        bus.register(s)
    return bus


def _publish_periodic(bus, topic, kind, rate, seconds, tick=0.001):
    """Publish through the scheduler so stamps land on integer ticks."""
    clock = VirtualClock(tick=tick, mission_limit=seconds + 1)
    sched = Scheduler(clock)
    sched.add(PeriodicTask(topic, rate, 0, lambda t: bus.publish(topic, kind, None, t)))
    sched.run(clock.to_ticks(seconds))


def test_kind_mismatch_rejected():
    bus = _bus(TopicSpec("/scan", PayloadKind.LaserScan, 6.4))
    with pytest.raises(PayloadKindMismatch):
        bus.publish("/scan", PayloadKind.Imu, None, 0.0)


def test_unknown_topic_and_duplicates():
    bus = _bus(TopicSpec("/scan", PayloadKind.LaserScan, 6.4))
    with pytest.raises(UnknownTopicError):
        bus.publish("/nope", PayloadKind.Imu, None, 0.0)
    with pytest.raises(DuplicateTopicError):
        bus.register(TopicSpec("/scan", PayloadKind.LaserScan, 6.4))
    with pytest.raises(ValueError):
        TopicSpec("/x", PayloadKind.Imu, 0.0)


def test_stamps_may_not_go_backwards():
    bus = _bus(TopicSpec("/imu", PayloadKind.Imu, 300.0))
    bus.publish("/imu", PayloadKind.Imu, None, 1.0)
    with pytest.raises(BusError):
        bus.publish("/imu", PayloadKind.Imu, None, 0.5)


def test_fan_out_to_two_subscribers():
    bus = _bus(TopicSpec("/odom", PayloadKind.Odometry, 7.59))
    a = bus.subscribe("/odom", "a")
    b = bus.subscribe("/odom", "b")
    bus.publish("/odom", PayloadKind.Odometry, 1, 0.0)
    assert len(a) == 1 and len(b) == 1


@given(st.lists(st.floats(0.0, 10.0), min_size=1, max_size=50), st.integers(1, 4))
def test_fifo_and_conservation(stamps, n_subs):
    bus = _bus(TopicSpec("/t", PayloadKind.Imu, 100.0))
    subs = [bus.subscribe("/t", f"n{i}") for i in range(n_subs)]
    for k, s in enumerate(sorted(stamps)):
        bus.publish("/t", PayloadKind.Imu, k, s)
    for sub in subs:
        got = sub.drain()
        assert [e.payload for e in got] == list(range(len(stamps)))
        assert [e.seq for e in got] == list(range(1, len(stamps) + 1))
        assert sub.received == bus.published_count("/t")


def test_drop_oldest_bound():
    bus = MessageBus(queue_bound=2)
    bus.register(TopicSpec("/t", PayloadKind.Imu, 1.0))
    sub = bus.subscribe("/t", "n")
    for k in range(5):
        bus.publish("/t", PayloadKind.Imu, k, float(k))
    assert [e.payload for e in sub.drain()] == [3, 4]
    assert sub.dropped == 3


def test_imu_count_over_sixty_seconds():
    # 300.31 Hz for 60 s is 18018.6 messages.
    bus = _bus(TopicSpec(IMU, PayloadKind.Imu, 300.31))
    _publish_periodic(bus, IMU, PayloadKind.Imu, 300.31, 60.0)
    assert abs(bus.published_count(IMU) - 18019) <= 1


def test_bandwidth_from_payload_sizes():
    # Rate times payload size reproduces the measured bandwidths.
    imu = TopicSpec(IMU, PayloadKind.Imu, 300.31)
    odom = TopicSpec(ODOM, PayloadKind.Odometry, 7.59)
    scan = TopicSpec(SCAN, PayloadKind.LaserScan, 6.4)
    assert imu.nominal_bandwidth / KIB == pytest.approx(96.5, abs=0.05)
    assert odom.nominal_bandwidth / KIB == pytest.approx(5.31, abs=0.01)
    assert scan.nominal_bandwidth * 8 / 1000 == pytest.approx(37.0, rel=1e-3)


@pytest.mark.parametrize("topic,kind,rate", [(ODOM, PayloadKind.Odometry, 7.59),
                                             (SCAN, PayloadKind.LaserScan, 6.4),
                                             (IMU, PayloadKind.Imu, 300.31)])
def test_hz_and_bw_over_window(topic, kind, rate):
    bus = _bus(TopicSpec(topic, kind, rate))
    _publish_periodic(bus, topic, kind, rate, 60.0)
    hz = bus.topic_hz(topic, 60.0, 60.0)
    bw = bus.topic_bw(topic, 60.0, 60.0)
    assert hz == pytest.approx(rate, rel=0.02)
    # Constant payload size makes bandwidth exactly rate times size.
    assert bw == pytest.approx(hz * bus.topics[topic].size, rel=1e-12)


def test_no_data_errors():
    bus = _bus(TopicSpec(ODOM, PayloadKind.Odometry, 7.59))
    with pytest.raises(NoDataError):
        bus.topic_hz(ODOM, 60.0)
    with pytest.raises(NoDataError):
        bus.topic_bw(ODOM, 60.0)
    with pytest.raises(ValueError):
        bus.topic_hz(ODOM, 0.0)


def test_graph_export_small():
    bus = _bus(TopicSpec("/t", PayloadKind.Imu, 1.0))
    bus.advertise("/t", "pub")
    bus.subscribe("/t", "sub")
    g = json.loads(graph_export(bus))
    assert g == {"nodes": ["pub", "sub"], "topics": ["/t"], "edges": [["/t", "sub"], ["pub", "/t"]]}


def test_graph_export_empty():
    g = json.loads(graph_export(MessageBus()))
    assert g == {"nodes": [], "topics": [], "edges": []}


def test_pipeline_wiring_has_scan_path():
    from uavfusion.config import RunConfig
    from uavfusion.sim import MissionSim

    cfg = RunConfig(configuration="C")
    sim = MissionSim(cfg.load_world(), cfg.suite(), cfg.waypoints, 0)
    g = sim.bus.graph()
    assert ["sensors", SCAN] in g["edges"]
    assert [SCAN, "fusion-slam"] in g["edges"]
    assert {t.name for t in standard_topics(cfg.suite())} == set(sim.bus.topics)


def test_stats_csv_format():
    text = stats_csv([("/a", 1.5, 10.0)])
    assert text == "topic,hz,bytes_per_s\n/a,1.5000,10.00\n"
