"""Registry semantics, checked against a replayed reference map where the
behavior is more than a single step."""

import pytest

from mrctl.master import MasterError, Registry
from mrctl.names import canonicalize as N


def hello(reg, name, conn_id, data_uri="10.0.0.1:1"):
    return reg.hello(N(name), f"ctl-{conn_id}", data_uri, conn_id)


def test_register_publisher_no_subscribers_yet():
    reg = Registry()
    hello(reg, "/tb3_0/turtlebot3_core", 1, "10.0.0.3:45001")
    result, notes = reg.register_publisher(
        N("/tb3_0/turtlebot3_core"), N("/tb3_0/odom"), "Odometry", "10.0.0.3:45001")
    assert result["peers"] == []
    assert notes == []


def test_unknown_caller_rejected():
    reg = Registry()
    with pytest.raises(MasterError) as err:
        reg.register_publisher(N("/x"), N("/t"), "Odometry", "h:1")
    assert err.value.code == "UnknownCaller"


def test_type_mismatch_on_topic():
    reg = Registry()
    hello(reg, "/a", 1)
    hello(reg, "/x", 2)
    reg.register_publisher(N("/a"), N("/t"), "Odometry", "h:1")
    with pytest.raises(MasterError) as err:
        reg.register_publisher(N("/x"), N("/t"), "LaserScan", "h:2")
    assert err.value.code == "TypeMismatch"
    with pytest.raises(MasterError):
        reg.register_subscriber(N("/x"), N("/t"), "LaserScan")


def test_subscriber_gets_current_publishers():
    reg = Registry()
    hello(reg, "/p1", 1, "h:1")
    hello(reg, "/p2", 2, "h:2")
    hello(reg, "/s", 3, "h:3")
    assert reg.register_subscriber(N("/s"), N("/t"), "String")[0]["publishers"] == []
    reg.unregister(N("/s"), "subscriber", N("/t"))
    reg.register_publisher(N("/p1"), N("/t"), "String", "h:1")
    reg.register_publisher(N("/p2"), N("/t"), "String", "h:2")
    result, _ = reg.register_subscriber(N("/s"), N("/t"), "String")
    assert result["publishers"] == ["h:1", "h:2"]


def test_publisher_update_notifications_reach_all_subscribers():
    reg = Registry()
    hello(reg, "/s1", 1)
    hello(reg, "/s2", 2)
    hello(reg, "/p", 3, "h:3")
    reg.register_subscriber(N("/s1"), N("/t"), "String")
    reg.register_subscriber(N("/s2"), N("/t"), "String")
    _, notes = reg.register_publisher(N("/p"), N("/t"), "String", "h:3")
    assert sorted(conn for conn, _ in notes) == [1, 2]
    for _, note in notes:
        assert note["notify"] == "publisherUpdate"
        assert note["params"] == {"topic": "/t", "publishers": ["h:3"]}


def test_duplicate_hello_evicts_previous():
    reg = Registry()
    hello(reg, "/map_server", 1, "h:1")
    reg.register_publisher(N("/map_server"), N("/map"), "OccupancyGridMsg", "h:1")
    result, notes = hello(reg, "/map_server", 2, "h:2")
    assert result["evicted_previous"] is True
    shutdowns = [n for conn, n in notes if conn == 1 and n["notify"] == "shutdown"]
    assert len(shutdowns) == 1
    # the old registrations are gone atomically with the new hello
    assert reg.system_state()["publishers"] == {}


def test_distinct_names_both_live():
    reg = Registry()
    hello(reg, "/tb3_0/amcl", 1)
    hello(reg, "/tb3_1/amcl", 2)
    assert len(reg.nodes) == 2


def test_service_register_lookup_and_replacement():
    reg = Registry()
    hello(reg, "/map_server", 1, "h:1")
    reg.register_service(N("/map_server"), N("/static_map"), "h:1")
    assert reg.lookup_service(N("/static_map"))["uri"] == "h:1"

    with pytest.raises(MasterError) as err:
        reg.lookup_service(N("/nope"))
    assert err.value.code == "NotFound"

    hello(reg, "/map_server2", 2, "h:2")
    result, notes = reg.register_service(N("/map_server2"), N("/static_map"), "h:2")
    assert result["replaced"] is True
    assert notes and notes[0][0] == 1 and notes[0][1]["notify"] == "serviceReplaced"
    assert reg.lookup_service(N("/static_map"))["uri"] == "h:2"


def test_system_state_empty():
    reg = Registry()
    assert reg.system_state() == {"publishers": {}, "subscribers": {},
                                  "services": {}}


def test_system_state_matches_registration_log_replay():
    # oracle: replay the same log into plain dicts and compare
    log = [
        ("hello", "/tb3_0/core", 1, "h:1"),
        ("hello", "/tb3_1/core", 2, "h:2"),
        ("hello", "/tb3_2/core", 3, "h:3"),
        ("pub", "/tb3_0/core", "/tb3_0/odom", "Odometry"),
        ("pub", "/tb3_1/core", "/tb3_1/odom", "Odometry"),
        ("pub", "/tb3_2/core", "/tb3_2/odom", "Odometry"),
        ("sub", "/tb3_0/core", "/tb3_0/cmd_vel", "Twist"),
        ("sub", "/tb3_1/core", "/tb3_1/cmd_vel", "Twist"),
    ]
    reg = Registry()
    expect_pubs, expect_subs = {}, {}
    for entry in log:
        if entry[0] == "hello":
            _, name, conn, uri = entry
            hello(reg, name, conn, uri)
        elif entry[0] == "pub":
            _, caller, topic, typ = entry
            reg.register_publisher(N(caller), N(topic), typ, "u")
            expect_pubs.setdefault(topic, []).append(caller)
        else:
            _, caller, topic, typ = entry
            reg.register_subscriber(N(caller), N(topic), typ)
            expect_subs.setdefault(topic, []).append(caller)
    state = reg.system_state()
    assert state["publishers"] == {t: sorted(v) for t, v in sorted(expect_pubs.items())}
    assert state["subscribers"] == {t: sorted(v) for t, v in sorted(expect_subs.items())}
    # disjoint namespace prefixes for the three robots
    prefixes = {t.split("/")[1] for t in state["publishers"]}
    assert prefixes == {"tb3_0", "tb3_1", "tb3_2"}


def test_no_dangling_references_after_eviction_or_drop():
    reg = Registry()
    hello(reg, "/a", 1, "h:1")
    hello(reg, "/b", 2, "h:2")
    reg.register_publisher(N("/a"), N("/t"), "String", "h:1")
    reg.register_subscriber(N("/b"), N("/t"), "String")
    reg.register_service(N("/a"), N("/srv"), "h:1")

    notes = reg.drop_connection(1)
    update = [n for conn, n in notes if n["notify"] == "publisherUpdate"]
    assert update and update[0]["params"]["publishers"] == []
    state = reg.system_state()
    for section in state.values():
        for names in section.values():
            assert "/a" not in names


def test_param_roundtrip_and_absence():
    reg = Registry()
    reg.param_set(N("/tb3_0/amcl/odom_frame_id"), "tb3_0/odom")
    assert reg.param_get(N("/tb3_0/amcl/odom_frame_id")) == "tb3_0/odom"
    with pytest.raises(MasterError) as err:
        reg.param_get(N("/absent"))
    assert err.value.code == "NotFound"
    reg.param_set(N("/nullable"), None)
    assert reg.param_get(N("/nullable")) is None  # stored null, not absence
    assert reg.param_has(N("/nullable"))
    reg.param_delete(N("/nullable"))
    assert not reg.param_has(N("/nullable"))


def test_param_rejects_composite_values():
    reg = Registry()
    with pytest.raises(MasterError):
        reg.param_set(N("/k"), {"nested": 1})


def test_set_logger_level_targets_node_connection():
    reg = Registry()
    hello(reg, "/talker", 7)
    _, notes = reg.set_logger_level(N("/talker"), "main", "debug")
    assert notes == [(7, {"notify": "setLoggerLevel",
                          "params": {"logger": "main", "level": "debug"}})]
    with pytest.raises(MasterError) as err:
        reg.set_logger_level(N("/ghost"), "main", "debug")
    assert err.value.code == "NotFound"
    with pytest.raises(MasterError):
        reg.set_logger_level(N("/talker"), "main", "loud")
