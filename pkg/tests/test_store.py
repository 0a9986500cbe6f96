import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from racmem._binio import BadMagicError, TruncatedFileError, VersionMismatchError
from racmem.store import MemoryStore, MetaRecord, create_store, merge, read_store, write_store


def random_store(rng, n, kd=8, vd=6, tag="s"):
    s = create_store(kd, vd)
    for i in range(n):
        s.append(rng.standard_normal(kd), rng.standard_normal(vd),
                 {"source_tag": tag, "class_hint": int(i % 3) if i % 2 else None})
    return s


def test_create_store():
    s = create_store(8, 6)
    assert (s.count, s.key_dim, s.value_dim) == (0, 8, 6)
    assert create_store(768, 768).key_dim == 768
    with pytest.raises(ValueError):
        create_store(8, 0)
    with pytest.raises(ValueError):
        create_store(0, 4)


def test_append_normalizes_keys_only():
    s = create_store(8, 6)
    key = np.zeros(8)
    key[:2] = [3, 4]
    value = np.arange(6, dtype=np.float64)
    assert s.append(key, value, MetaRecord("a")) == 0
    np.testing.assert_allclose(s.keys[0, :2], [0.6, 0.8], rtol=1e-7)
    np.testing.assert_array_equal(s.values[0], value.astype(np.float32))
    assert s.append(np.ones(8), np.ones(6), MetaRecord("a")) == 1


@pytest.mark.parametrize("bad", [np.nan, np.inf])
def test_append_rejects_non_finite(bad):
    s = create_store(4, 2)
    key = np.ones(4)
    key[2] = bad
    with pytest.raises(ValueError):
        s.append(key, np.ones(2), MetaRecord("a"))
    with pytest.raises(ValueError):
        s.append(np.ones(4), np.array([1.0, bad]), MetaRecord("a"))
    assert s.count == 0


def test_append_rejects_zero_key_and_bad_lengths():
    s = create_store(4, 2)
    with pytest.raises(ValueError):
        s.append(np.zeros(4), np.ones(2), MetaRecord("a"))
    with pytest.raises(ValueError):
        s.append(np.ones(5), np.ones(2), MetaRecord("a"))
    with pytest.raises(ValueError):
        s.append(np.ones(4), np.ones(3), MetaRecord("a"))


def test_append_does_not_mutate_existing_rows():
    rng = np.random.default_rng(0)
    s = random_store(rng, 20)
    snap_k, snap_v = s.keys.copy(), s.values.copy()
    for _ in range(100):  # forces several buffer reallocations
        s.append(rng.standard_normal(8), rng.standard_normal(6), MetaRecord("x"))
    assert s.keys[:20].tobytes() == snap_k.tobytes()
    assert s.values[:20].tobytes() == snap_v.tobytes()


def test_keys_unit_norm():
    s = random_store(np.random.default_rng(1), 50)
    np.testing.assert_allclose(np.linalg.norm(s.keys.astype(np.float64), axis=1), 1.0, atol=1e-6)


def test_merge():
    rng = np.random.default_rng(2)
    a, b = random_store(rng, 10, tag="a"), random_store(rng, 5, tag="b")
    m = merge(a, b)
    assert m.count == 15
    assert m.keys[10].tobytes() == b.keys[0].tobytes()
    assert [r.source_tag for r in m.meta] == ["a"] * 10 + ["b"] * 5
    assert merge(create_store(8, 6), a).equals(a)
    with pytest.raises(ValueError):
        merge(a, create_store(16, 6))


def test_merge_associative():
    rng = np.random.default_rng(3)
    a, b, c = (random_store(rng, n) for n in (3, 4, 5))
    assert merge(merge(a, b), c).equals(merge(a, merge(b, c)))


def test_round_trip(tmp_path):
    s = random_store(np.random.default_rng(4), 100)
    write_store(s, tmp_path / "m.racm")
    assert read_store(tmp_path / "m.racm").equals(s)


def test_zero_value_width_round_trip(tmp_path):
    s = MemoryStore(3, 0)
    s.extend(np.eye(3), np.zeros((3, 0)), [MetaRecord("train", i) for i in range(3)])
    write_store(s, tmp_path / "d.racm")
    assert read_store(tmp_path / "d.racm").equals(s)


def test_format_errors(tmp_path):
    s = random_store(np.random.default_rng(5), 10)
    p = tmp_path / "m.racm"
    write_store(s, p)
    raw = p.read_bytes()

    (tmp_path / "magic").write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(BadMagicError):
        read_store(tmp_path / "magic")

    (tmp_path / "trunc").write_bytes(raw[: 24 + 10 * 8 * 4 // 2])
    with pytest.raises(TruncatedFileError):
        read_store(tmp_path / "trunc")

    (tmp_path / "ver").write_bytes(raw[:4] + (2).to_bytes(4, "little") + raw[8:])
    with pytest.raises(VersionMismatchError):
        read_store(tmp_path / "ver")


finite = st.floats(-1e6, 1e6, allow_nan=False, width=32)


@settings(max_examples=40, deadline=None)
@given(
    n=st.integers(0, 12),
    kd=st.integers(1, 5),
    vd=st.integers(1, 4),
    data=st.data(),
)
def test_round_trip_property(tmp_path_factory, n, kd, vd, data):
    s = create_store(kd, vd)
    for _ in range(n):
        key = data.draw(st.lists(finite, min_size=kd, max_size=kd).filter(lambda v: any(v)))
        value = data.draw(st.lists(finite, min_size=vd, max_size=vd))
        tag = data.draw(st.text(max_size=8))
        hint = data.draw(st.one_of(st.none(), st.integers(-5, 5)))
        s.append(key, value, MetaRecord(tag, hint))
    p = tmp_path_factory.mktemp("rt") / "s.racm"
    write_store(s, p)
    assert read_store(p).equals(s)
