import dataclasses

import pytest
from hypothesis import given, strategies as st

from causatrace.activity import (
    Activity,
    ActivityType,
    ContextId,
    EntrySpec,
    LogParseError,
    MessageId,
    SchemaError,
    classify_entry,
    format_raw_line,
    parse_raw_line,
    read_tuple_log,
    write_tuple_log,
)

T = ActivityType


def test_priority_order():
    assert T.BEGIN < T.SEND < T.END < T.RECEIVE < T.MAX


def test_max_cannot_label_an_activity():
    with pytest.raises(ValueError):
        Activity(T.MAX, 1, ContextId("h", "p", 1, 1), MessageId("a", 1, "b", 2), 1)


def test_parse_send_line():
    a = parse_raw_line("1000500 nodeA httpd 2301 17 SEND 10.0.0.1:80-10.0.0.2:8009 100")
    assert a == Activity(
        T.SEND, 1000500, ContextId("nodeA", "httpd", 2301, 17), MessageId("10.0.0.1", 80, "10.0.0.2", 8009), 100
    )


def test_parse_receive_line():
    a = parse_raw_line("1000900 nodeB java 5000 42 RECEIVE 10.0.0.1:80-10.0.0.2:8009 100")
    assert a.kind is T.RECEIVE
    assert a.context == ContextId("nodeB", "java", 5000, 42)
    assert a.node == "nodeB"


def test_missing_tid_is_a_field_count_error():
    with pytest.raises(LogParseError) as exc:
        parse_raw_line("1000900 nodeB java 5000 RECEIVE 10.0.0.1:80-10.0.0.2:8009 100", lineno=3)
    assert exc.value.field_name == "field count"
    assert exc.value.lineno == 3


@pytest.mark.parametrize(
    "line, field",
    [
        ("x nodeB java 5000 1 RECEIVE 10.0.0.1:80-10.0.0.2:8009 100", "timestamp"),
        ("1 nodeB java 5000 1 READ 10.0.0.1:80-10.0.0.2:8009 100", "direction"),
        ("1 nodeB java 5000 1 SEND 10.0.0.1:80 100", "endpoints"),
        ("1 nodeB java 5000 1 SEND 10.0.0.1:99999-10.0.0.2:1 100", "sender"),
        ("1 nodeB java 5000 1 SEND 10.0.0.1:1-10.0.0.2:1 0", "size"),
        ("1 nodeB java -5 1 SEND 10.0.0.1:1-10.0.0.2:1 5", "pid"),
    ],
)
def test_parse_errors_name_the_field(line, field):
    with pytest.raises(LogParseError) as exc:
        parse_raw_line(line)
    assert exc.value.field_name == field


def test_repeated_whitespace_is_tolerated():
    a = parse_raw_line("  7   h  p 1 2   SEND   1.1.1.1:1-2.2.2.2:2   9 \n")
    assert a.size == 9 and a.timestamp == 7


def test_message_direction_matters():
    m = MessageId("10.0.0.1", 80, "10.0.0.2", 8009)
    assert m.reversed() != m
    assert m.reversed().reversed() == m


ENTRY = EntrySpec("httpd", frozenset({80}), frozenset({"10.0.0.1", "10.0.0.2", "10.0.0.3"}))
HTTPD = ContextId("nodeA", "httpd", 1, 1)


def test_client_receive_on_entry_port_becomes_begin():
    a = Activity(T.RECEIVE, 5, HTTPD, MessageId("192.168.1.9", 51000, "10.0.0.1", 80), 300)
    assert classify_entry(a, ENTRY).kind is T.BEGIN


def test_send_to_client_from_entry_port_becomes_end():
    a = Activity(T.SEND, 5, HTTPD, MessageId("10.0.0.1", 80, "192.168.1.9", 51000), 300)
    assert classify_entry(a, ENTRY).kind is T.END


def test_internal_tier_link_is_unchanged():
    a = Activity(T.RECEIVE, 5, ContextId("nodeB", "java", 2, 2), MessageId("10.0.0.1", 45873, "10.0.0.2", 8009), 3)
    assert classify_entry(a, ENTRY) is a


def test_entry_program_restricts_classification():
    a = Activity(T.RECEIVE, 5, ContextId("nodeA", "nginx", 1, 1), MessageId("192.168.1.9", 51000, "10.0.0.1", 80), 3)
    assert classify_entry(a, ENTRY).kind is T.RECEIVE


# -- property tests ---------------------------------------------------------------

ips = st.sampled_from(["10.0.0.1", "10.0.0.2", "192.168.1.9", "172.16.0.5"])
ports = st.sampled_from([80, 8009, 3306, 51000, 40001])
names = st.text(alphabet="abcdefghijklmnopqrstuvwxyz0123456789_.-", min_size=1, max_size=8)
activities = st.builds(
    Activity,
    kind=st.sampled_from([T.SEND, T.RECEIVE]),
    timestamp=st.integers(0, 2**62),
    context=st.builds(ContextId, names, names, st.integers(0, 2**31), st.integers(0, 2**31)),
    message=st.builds(MessageId, ips, ports, ips, ports),
    size=st.integers(1, 2**31),
)


@given(activities)
def test_format_then_parse_is_identity(a):
    assert parse_raw_line(format_raw_line(a)) == a


@given(activities)
def test_classify_entry_only_changes_kind_and_is_idempotent(a):
    b = classify_entry(a, ENTRY)
    assert dataclasses.replace(b, kind=a.kind) == a
    assert classify_entry(b, ENTRY) == b


@given(st.lists(activities, max_size=30), st.lists(st.one_of(st.none(), st.integers(0, 10**6)), max_size=30))
def test_tuple_log_round_trip(tmp_path_factory, acts, rids):
    acts = [dataclasses.replace(a, truth_request_id=r) for a, r in zip(acts, rids + [None] * len(acts))]
    p = tmp_path_factory.mktemp("tl") / "t.jsonl"
    write_tuple_log(acts, p)
    back = read_tuple_log(p)
    assert back == acts
    assert [b.truth_request_id for b in back] == [a.truth_request_id for a in acts]


def test_tuple_log_round_trip_1000(tmp_path):
    import random

    rng = random.Random(1)
    acts = [
        Activity(
            rng.choice([T.BEGIN, T.SEND, T.END, T.RECEIVE]),
            rng.randrange(10**12),
            ContextId(f"n{rng.randrange(4)}", "p", rng.randrange(9), rng.randrange(9)),
            MessageId("1.1.1.1", rng.randrange(65536), "2.2.2.2", 80),
            rng.randrange(1, 5000),
            7 if i == 0 else None,
        )
        for i in range(1000)
    ]
    write_tuple_log(acts, tmp_path / "t.jsonl")
    back = read_tuple_log(tmp_path / "t.jsonl")
    assert back == acts and back[0].truth_request_id == 7


def test_empty_tuple_log(tmp_path):
    (tmp_path / "e.jsonl").write_text("")
    assert read_tuple_log(tmp_path / "e.jsonl") == []


def test_tuple_log_version_mismatch(tmp_path):
    (tmp_path / "v.jsonl").write_text('{"schema":"causatrace.tuple","version":99}\n')
    with pytest.raises(SchemaError):
        read_tuple_log(tmp_path / "v.jsonl")
