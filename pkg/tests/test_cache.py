import hashlib

import numpy as np
import pytest
from hypothesis import given, strategies as st

from corredit.cache import (
    CorrCache, CorrCacheEntry, MemoryCache, cache_key, canonical_bytes, md5_hex,
)
from corredit.corrfield import CorrField
from corredit.errors import IntegrityError, ParameterError
from corredit.imageio import smooth_texture

RFC1321 = {
    b"": "d41d8cd98f00b204e9800998ecf8427e",
    b"a": "0cc175b9c0f1b6a831c399e269772661",
    b"abc": "900150983cd24fb0d6963f7d28e17f72",
    b"message digest": "f96b697d7cb7938d525a2f31aaf161d0",
    b"abcdefghijklmnopqrstuvwxyz": "c3fcd3d76192e4007dfb496cca67e13b",
}


@pytest.mark.parametrize("data,digest", RFC1321.items())
def test_md5_reference_vectors(data, digest):
    assert md5_hex(data) == digest


def test_canonical_layout():
    img = np.zeros((2, 3, 1))
    img[0, 0, 0] = 1.0
    blob = canonical_bytes([img])
    assert blob[:12] == bytes([0, 0, 0, 2, 0, 0, 0, 3, 0, 0, 0, 1])
    assert blob[12:] == bytes([255, 0, 0, 0, 0, 0])


def test_key_is_md5_of_canonical_bytes():
    a = smooth_texture(16, 0)
    assert cache_key([a]) == hashlib.md5(canonical_bytes([a])).hexdigest()


def test_key_deterministic_and_order_sensitive():
    a, b = smooth_texture(16, 0), smooth_texture(16, 1)
    assert cache_key([a, b]) == cache_key([a.copy(), b.copy()])
    assert cache_key([a, b]) != cache_key([b, a])
    with pytest.raises(ParameterError):
        cache_key([])


def entry(key="0" * 32, shift=0.0):
    f = CorrField.translation(4, 4, shift, 0)
    return CorrCacheEntry(key, f, CorrField.identity(4, 4))


@pytest.fixture(params=["disk", "memory"])
def store(request, tmp_path):
    return CorrCache(tmp_path / "c") if request.param == "disk" else MemoryCache()


def test_put_get_round_trip(store):
    e = entry()
    store.put(e)
    got = store.get(e.key)
    assert got.key == e.key and got.forward.equals(e.forward) and got.backward.equals(e.backward)


def test_missing_key(store):
    assert store.get("f" * 32) is None


def test_last_write_wins(store):
    store.put(entry(shift=1.0))
    store.put(entry(shift=2.0))
    assert store.get("0" * 32).forward.equals(entry(shift=2.0).forward)


def test_corrupt_entry_detected(tmp_path):
    c = CorrCache(tmp_path)
    c.put(entry())
    p = c.path("0" * 32)
    blob = bytearray(p.read_bytes())
    blob[50] ^= 0xFF
    p.write_bytes(bytes(blob))
    with pytest.raises(IntegrityError) as exc:
        c.get("0" * 32)
    assert exc.value.key == "0" * 32


def test_entry_under_wrong_key(tmp_path):
    c = CorrCache(tmp_path)
    c.put(entry())
    (tmp_path / ("1" * 32)).write_bytes(c.path("0" * 32).read_bytes())
    with pytest.raises(IntegrityError):
        c.get("1" * 32)


def test_no_temp_files_left(tmp_path):
    c = CorrCache(tmp_path)
    c.put(entry())
    assert [p.name for p in tmp_path.iterdir()] == ["0" * 32]


@given(st.binary(max_size=200))
def test_entry_parser_never_crashes(blob):
    try:
        CorrCacheEntry.from_bytes(blob)
    except IntegrityError:
        pass
