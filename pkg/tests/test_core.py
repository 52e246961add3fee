from __future__ import annotations

import threading
import time

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from h3pubsub.core import (
    MAX_TOPIC_BYTES,
    Broker,
    PayloadTooLarge,
    Sink,
    TopicName,
    TopicNotFound,
    TopicRule,
    UnknownHandle,
    ValidationError,
    validate_topic_name,
)
from oracles import RefBroker


class TestValidation:
    def test_accepts_dotted_name(self):
        assert validate_topic_name("sensors.temp") == TopicName("sensors.temp")

    @pytest.mark.parametrize(
        "raw, rule",
        [
            ("", TopicRule.EMPTY),
            ("a/b c", TopicRule.ILLEGAL_CHARACTER),
            ("x" * (MAX_TOPIC_BYTES + 1), TopicRule.TOO_LONG),
            ("tab\there", TopicRule.ILLEGAL_CHARACTER),
            ("ünï", TopicRule.ILLEGAL_CHARACTER),
        ],
    )
    def test_rejects_with_rule(self, raw, rule):
        with pytest.raises(ValidationError) as info:
            validate_topic_name(raw)
        assert info.value.rule is rule

    def test_length_boundary(self):
        assert validate_topic_name("a" * MAX_TOPIC_BYTES)

    @given(st.text(alphabet="abcXYZ019_-.", min_size=1, max_size=MAX_TOPIC_BYTES))
    def test_charset_accepted(self, raw):
        assert validate_topic_name(raw) == raw


class TestTopics:
    def test_create_is_idempotent(self):
        b = Broker()
        assert b.create_topic("t") is True
        assert b.create_topic("t") is False
        assert b.topics() == ["t"]

    def test_recreate_resets_sequence(self):
        b = Broker()
        b.create_topic("t")
        b.publish("t", b"1")
        b.publish("t", b"2")
        b.delete_topic("t")
        b.create_topic("t")
        h = b.subscribe("t")
        b.publish("t", b"3")
        assert h.sink.get(0).seq == 1

    def test_exists_lifecycle(self):
        b = Broker()
        assert not b.topic_exists("t")
        b.create_topic("t")
        assert b.topic_exists("t")
        b.delete_topic("t")
        assert not b.topic_exists("t")

    def test_delete_closes_all_sinks_and_drops_retained(self):
        b = Broker()
        b.create_topic("t")
        handles = [b.subscribe("t") for _ in range(3)]
        b.publish("t", b"x")
        b.delete_topic("t")
        for h in handles:
            assert h.sink.closed
        with pytest.raises(TopicNotFound):
            b.retained("t")
        with pytest.raises(TopicNotFound):
            b.delete_topic("t")

    def test_create_rejects_invalid(self):
        with pytest.raises(ValidationError):
            Broker().create_topic("bad name")


class TestPublish:
    def test_no_subscribers_still_retains(self):
        b = Broker()
        b.create_topic("t")
        assert b.publish("t", b"x") == 0
        assert [m.payload for m in b.retained("t")] == [b"x"]

    def test_fanout_shares_seq(self):
        b = Broker()
        b.create_topic("t")
        h1, h2 = b.subscribe("t"), b.subscribe("t")
        assert b.publish("t", b"x") == 2
        assert h1.sink.get(0).seq == h2.sink.get(0).seq == 1

    def test_absent_topic(self):
        b = Broker()
        with pytest.raises(TopicNotFound):
            b.publish("nope", b"x")
        assert not b.topic_exists("nope")

    def test_size_limit(self):
        b = Broker(max_message_size=4)
        b.create_topic("t")
        assert b.publish("t", b"1234") == 0
        with pytest.raises(PayloadTooLarge):
            b.publish("t", b"12345")

    def test_retained_fifo_evicts_oldest(self):
        b = Broker(retained_capacity=3)
        b.create_topic("t")
        for i in range(5):
            b.publish("t", bytes([i]))
        assert [m.seq for m in b.retained("t")] == [3, 4, 5]

    def test_no_replay_for_late_subscriber(self):
        b = Broker()
        b.create_topic("t")
        b.publish("t", b"old")
        h = b.subscribe("t")
        with pytest.raises(TimeoutError):
            h.sink.get(0)
        b.publish("t", b"new")
        assert h.sink.get(0).payload == b"new"

    def test_published_at_uses_clock(self):
        b = Broker(clock=lambda: 42.0)
        b.create_topic("t")
        h = b.subscribe("t")
        b.publish("t", b"x")
        assert h.sink.get(0).published_at == 42.0


class TestSubscribe:
    def test_absent_topic(self):
        with pytest.raises(TopicNotFound):
            Broker().subscribe("t")

    def test_unsubscribe_twice(self):
        b = Broker()
        b.create_topic("t")
        h = b.subscribe("t")
        b.unsubscribe(h)
        assert b.publish("t", b"x") == 0
        assert h.sink.closed
        with pytest.raises(UnknownHandle):
            b.unsubscribe(h)

    def test_unsubscribe_after_delete(self):
        b = Broker()
        b.create_topic("t")
        h = b.subscribe("t")
        b.delete_topic("t")
        with pytest.raises(UnknownHandle):
            b.unsubscribe(h)

    def test_fanout_in_registration_order(self):
        b = Broker()
        b.create_topic("t")
        order = []
        for i in range(4):
            b.subscribe("t").sink.attach(lambda m, i=i: order.append(i))
        b.publish("t", b"x")
        assert order == [0, 1, 2, 3]


class TestSink:
    def test_iteration_ends_on_close(self):
        b = Broker()
        b.create_topic("t")
        h = b.subscribe("t")
        for i in range(3):
            b.publish("t", bytes([i]))
        b.delete_topic("t")
        assert [m.seq for m in h.sink] == [1, 2, 3]

    def test_attach_flushes_buffer(self):
        b = Broker()
        b.create_topic("t")
        h = b.subscribe("t")
        b.publish("t", b"a")
        got = []
        h.sink.attach(lambda m: got.append(m.payload))
        b.publish("t", b"b")
        assert got == [b"a", b"b"]
        assert len(h.sink) == 0

    def test_close_fires_listener_callback(self):
        closed = []
        s = Sink()
        s.attach(lambda m: None, lambda: closed.append(True))
        s.close()
        s.close()
        assert closed == [True]

    def test_full_sink_blocks_publisher_until_drained(self):
        b = Broker(sink_capacity=2)
        b.create_topic("t")
        h = b.subscribe("t")
        b.publish("t", b"1")
        b.publish("t", b"2")
        done = threading.Event()

        def third():
            b.publish("t", b"3")
            done.set()

        worker = threading.Thread(target=third)
        worker.start()
        assert not done.wait(0.1)
        assert h.sink.get(1).seq == 1
        assert done.wait(2)
        worker.join()
        assert [h.sink.get(0).seq, h.sink.get(0).seq] == [2, 3]

    def test_delete_unblocks_full_sink(self):
        b = Broker(sink_capacity=1)
        b.create_topic("t")
        b.subscribe("t")
        b.publish("t", b"1")
        result = []
        worker = threading.Thread(target=lambda: result.append(b.publish("t", b"2")))
        worker.start()
        time.sleep(0.05)
        b.delete_topic("t")
        worker.join(2)
        assert result == [0]

    def test_put_timeout(self):
        s = Sink(1)
        b = Broker()
        b.create_topic("t")
        b.publish("t", b"x")
        msg = b.retained("t")[0]
        s.put(msg)
        with pytest.raises(TimeoutError):
            s.put(msg, timeout=0.01)


class TestConcurrency:
    def test_parallel_publishers_keep_per_sink_order(self):
        b = Broker(sink_capacity=8)
        b.create_topic("t")
        handles = [b.subscribe("t") for _ in range(3)]
        seen: list[list[int]] = [[] for _ in handles]

        def consume(i):
            for m in handles[i].sink:
                seen[i].append(m.seq)

        consumers = [threading.Thread(target=consume, args=(i,)) for i in range(3)]
        producers = [threading.Thread(target=lambda: [b.publish("t", b"x") for _ in range(200)]) for _ in range(4)]
        for t in consumers + producers:
            t.start()
        for t in producers:
            t.join()
        b.delete_topic("t")
        for t in consumers:
            t.join()
        for s in seen:
            assert s == list(range(1, 801))

    def test_delivered_count_matches_snapshot(self):
        b = Broker()
        b.create_topic("t")
        counts = []
        stop = threading.Event()

        def churn():
            while not stop.is_set():
                h = b.subscribe("t")
                h.sink.attach(lambda m: None)
                b.unsubscribe(h)

        worker = threading.Thread(target=churn)
        worker.start()
        try:
            for _ in range(300):
                counts.append(b.publish("t", b"x"))
        finally:
            stop.set()
            worker.join()
        assert set(counts) <= {0, 1}


# -- reference-model property --------------------------------------------------

NAMES = st.sampled_from(["a", "b", "c", "bad name"])
OPS = st.lists(
    st.one_of(
        st.tuples(st.just("create"), NAMES),
        st.tuples(st.just("exists"), NAMES),
        st.tuples(st.just("delete"), NAMES),
        st.tuples(st.just("publish"), NAMES, st.binary(max_size=8)),
        st.tuples(st.just("subscribe"), NAMES),
        st.tuples(st.just("unsubscribe"), st.integers(0, 30)),
    ),
    max_size=200,
)


def _apply(broker: Broker, handles: dict, op):
    kind = op[0]
    try:
        if kind == "create":
            return "created" if broker.create_topic(op[1]) else "exists"
        if kind == "exists":
            return broker.topic_exists(op[1])
        if kind == "delete":
            broker.delete_topic(op[1])
            return "deleted"
        if kind == "publish":
            return broker.publish(op[1], op[2])
        if kind == "subscribe":
            h = broker.subscribe(op[1])
            handles[len(handles) + 1] = h
            return len(handles)
        h = handles.get(op[1])
        if h is None:
            return "unknown"
        broker.unsubscribe(h)
        return "ok"
    except ValidationError:
        return "invalid"
    except TopicNotFound:
        return "not_found"
    except UnknownHandle:
        return "unknown"


def _apply_ref(ref: RefBroker, op):
    kind = op[0]
    name = op[1]
    if kind == "create" and name == "bad name":
        return "invalid"
    if kind == "create":
        return ref.create(name)
    if kind == "exists":
        return ref.exists(name)
    if kind == "delete":
        return ref.delete(name)
    if kind == "publish":
        return ref.publish(name, op[2])
    if kind == "subscribe":
        return ref.subscribe(name)
    return ref.unsubscribe(name) if name in ref.inbox else "unknown"


@settings(max_examples=200)
@given(OPS)
def test_matches_reference_model(ops):
    broker, ref, handles = Broker(sink_capacity=1000), RefBroker(), {}
    for op in ops:
        assert _apply(broker, handles, op) == _apply_ref(ref, op), op
    for sid, handle in handles.items():
        delivered = [(str(m.topic), m.seq, m.payload) for m in handle.sink.drain()]
        assert delivered == ref.inbox[sid]
        assert handle.sink.closed == (sid in ref.closed)
    for name, record in ref.topics.items():
        assert [(m.seq, m.payload) for m in broker.retained(name)] == record["retained"]
    assert sorted(broker.topics()) == sorted(ref.topics)
