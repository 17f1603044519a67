import pytest

from fogmq.broker.registry import (CAS_FAILED, DUPLICATE_DEVICE, NOT_FOUND, MemoryRegistry, RegistryEntry,
                                   RegistryError, RemoteRegistry)
from fogmq.broker.server import FogMQServer, ServerConfig

from conftest import arun, wait_until


def entry(dev, host="s1"):
    return RegistryEntry(dev, f"clone-{dev}", host, "127.0.0.1:1", "127.0.0.1:2", "127.0.0.1:3", ["p"])


async def exercise(reg):
    events = []
    unwatch = reg.watch(lambda ev, e: events.append((ev, e.device_id, e.host_server_id)))
    e = await reg.claim(entry("d1"))
    assert e.epoch == 1
    with pytest.raises(RegistryError) as exc:
        await reg.claim(entry("d1", "s2"))
    assert exc.value.code == DUPLICATE_DEVICE
    assert (await reg.get("d1")).host_server_id == "s1"
    with pytest.raises(RegistryError) as exc:
        await reg.switch("d1", "s9", "s2", "127.0.0.1:9")
    assert exc.value.code == CAS_FAILED
    e = await reg.switch("d1", "s1", "s2", "127.0.0.1:9")
    assert (e.host_server_id, e.host_endpoint, e.epoch) == ("s2", "127.0.0.1:9", 2)
    with pytest.raises(RegistryError) as exc:
        await reg.switch("nope", "s1", "s2", "x:1")
    assert exc.value.code == NOT_FOUND
    assert not await reg.remove("d1", expected_host="s1")
    assert await reg.remove("d1")
    assert await reg.get("d1") is None
    await reg.claim(entry("d2"))
    assert [x.device_id for x in await reg.entries()] == ["d2"]
    hist = await reg.get_history()
    assert [h["event"] for h in hist] == ["claim", "switch", "remove", "claim"]
    await wait_until(lambda: len(events) == 4)
    unwatch()
    return events


def test_memory_registry_contract():
    events = arun(exercise(MemoryRegistry()))
    assert events == [("claim", "d1", "s1"), ("switch", "d1", "s2"), ("remove", "d1", "s2"), ("claim", "d2", "s1")]


def test_remote_registry_hosted_by_server_has_same_contract():
    async def go():
        host = await FogMQServer(ServerConfig("reg", host_registry=True, flock_enabled=False)).start()
        client = RemoteRegistry(host.endpoint)
        try:
            # let the watch connection establish before the first change
            client.watch(lambda *a: None)
            await wait_until(lambda: len(host.served_registry._watchers) >= 2)
            return await exercise(client)
        finally:
            await client.close()
            await host.stop()

    events = arun(go())
    assert events[0] == ("claim", "d1", "s1") and len(events) == 4


def test_remote_registry_unavailable():
    async def go():
        with pytest.raises(RegistryError) as exc:
            await RemoteRegistry("127.0.0.1:1", timeout=0.5).get("d")
        return exc.value.code

    assert arun(go()) == "REGISTRY_UNAVAILABLE"


def test_entry_roundtrip():
    e = entry("d")
    assert RegistryEntry.from_dict(e.to_dict()) == e
