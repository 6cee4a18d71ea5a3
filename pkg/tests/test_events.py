from src.helpers.events import Events


def test_listeners_run_in_registration_order():
    events = Events()
    seen = []
    events.on("tick", lambda value: seen.append(("a", value)))
    events.on("tick", lambda value: seen.append(("b", value)))
    assert events.emit("tick", 1) == 2
    assert seen == [("a", 1), ("b", 1)]
    assert events.emit("other") == 0


def test_once_and_off():
    events = Events()
    seen = []

    def record(value):
        seen.append(value)

    events.on("tick", record, once=True)
    events.emit("tick", 1)
    events.emit("tick", 2)
    assert seen == [1]

    events.on("tick", record)
    events.off("tick", record)
    events.emit("tick", 3)
    assert seen == [1]
    assert events.listeners("tick") == []


def test_failing_listener_is_retried_then_skipped():
    events = Events()
    calls = []

    def flaky():
        calls.append(1)
        raise ValueError("boom")

    events.on("tick", flaky, retry_attempts=3)
    events.on("tick", lambda: calls.append(2))
    assert events.emit("tick") == 1
    assert calls == [1, 1, 1, 2]
