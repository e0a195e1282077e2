"""Seed-path derivation: reproducible, collision-resistant, type-strict."""

import hashlib

import numpy as np
import pytest

from cohortsel.rng import _key_part, generator, seed_sequence


def test_same_path_reproduces_stream():
    a = generator(42, "train", 3).standard_normal(8)
    b = generator(42, "train", 3).standard_normal(8)
    np.testing.assert_array_equal(a, b)


def test_distinct_paths_decorrelate():
    draws = {
        "base": generator(42, "train", 3).standard_normal(8).tobytes(),
        "other-label": generator(42, "evaluate", 3).standard_normal(8).tobytes(),
        "other-index": generator(42, "train", 4).standard_normal(8).tobytes(),
        "other-seed": generator(43, "train", 3).standard_normal(8).tobytes(),
        "longer": generator(42, "train", 3, 0).standard_normal(8).tobytes(),
    }
    assert len(set(draws.values())) == len(draws)


def test_order_independent_reconstruction():
    # Streams are addressed, not consumed in sequence: drawing from one
    # substream never perturbs a sibling.
    before = generator(7, "stage", 2).standard_normal(4)
    generator(7, "stage", 1).standard_normal(1000)
    after = generator(7, "stage", 2).standard_normal(4)
    np.testing.assert_array_equal(before, after)


def test_string_labels_hash_to_sha256_prefix():
    expected = int.from_bytes(hashlib.sha256(b"train").digest()[:4], "little")
    assert _key_part("train") == expected
    assert _key_part("train") == 3293867793  # frozen: catches hash-scheme drift


def test_int_labels_pass_through():
    assert _key_part(5) == 5
    assert _key_part(np.int64(5)) == 5
    assert _key_part(2**32 + 3) == 3


def test_label_type_errors():
    with pytest.raises(TypeError):
        _key_part(1.5)
    with pytest.raises(TypeError):
        _key_part(True)
    with pytest.raises(ValueError):
        _key_part(-1)


def test_seed_sequence_spawn_key():
    ss = seed_sequence(9, "a", 1)
    assert ss.entropy == 9
    assert ss.spawn_key == (_key_part("a"), 1)


def test_stream_regression_pin():
    # Frozen first draws: a change here means every recorded experiment
    # would replay differently.
    got = generator(0, "train", 3).standard_normal(3)
    np.testing.assert_allclose(
        got, [-0.16578656, 0.34368938, -0.71262885], atol=1e-8
    )
