import json

import numpy as np
import pytest

from exceptions import ConflictError, DataError, InvalidArgumentError, NotFoundError
from keys import (
    KeyRegistry,
    UserKey,
    expand_key,
    extract_key,
    flip_bits,
    generate_key,
    hamming_distance,
    join_blocks,
    majority_vote,
    pack_bits,
    split_blocks,
    trace_key,
    unpack_bits,
)


def test_generate_key_is_deterministic_per_user_and_seed():
    a = generate_key("alice", r=4, c=2, rng_seed=7)
    assert a.bits.shape == (2, 4, 4)
    assert a.same_bits(generate_key("alice", 4, 2, 7))
    assert not a.same_bits(generate_key("bob", 4, 2, 7))
    assert not a.same_bits(generate_key("alice", 4, 2, 8))


@pytest.mark.parametrize("r,c", [(0, 1), (4, 0)])
def test_generate_key_rejects_bad_geometry(r, c):
    with pytest.raises(InvalidArgumentError):
        generate_key("alice", r, c, 0)


def test_user_key_validates_bits():
    with pytest.raises(InvalidArgumentError):
        UserKey(np.full((1, 2, 2), 2))
    with pytest.raises(InvalidArgumentError):
        UserKey(np.zeros((1, 2, 3)))
    key = UserKey(np.zeros((1, 2, 2)))
    with pytest.raises(ValueError):
        key.bits[0, 0, 0] = 1


def test_expanded_key_votes_back_to_the_key():
    key = generate_key("alice", r=4, c=1, rng_seed=1)
    expanded = expand_key(key, 16, 12)
    assert expanded.shape == (1, 16, 12)
    assert extract_key(expanded.bits, 4).same_bits(key)


def test_expand_rejects_plane_not_multiple_of_r():
    with pytest.raises(InvalidArgumentError):
        expand_key(generate_key("alice", 4, 1, 0), 10, 8)


def test_split_blocks_is_row_major_and_joins_back():
    plane = np.arange(16).reshape(1, 4, 4)
    blocks = split_blocks(plane, 2)
    assert blocks.shape == (4, 1, 2, 2)
    np.testing.assert_array_equal(blocks[1, 0], [[2, 3], [6, 7]])
    np.testing.assert_array_equal(join_blocks(blocks, 4, 4), plane)


def test_split_blocks_rejects_bad_block_size():
    with pytest.raises(InvalidArgumentError):
        split_blocks(np.zeros((1, 6, 6)), 4)


def test_majority_vote_ties_resolve_to_one():
    blocks = np.stack([np.zeros((1, 1, 1)), np.ones((1, 1, 1))])
    assert majority_vote(blocks).bits.item() == 1


def test_majority_vote_thresholds_real_values():
    blocks = np.full((3, 1, 1, 1), 0.4)
    assert majority_vote(blocks, threshold=0.5).bits.item() == 0
    assert majority_vote(blocks, threshold=0.3).bits.item() == 1


def test_majority_vote_rejects_empty_input():
    with pytest.raises(InvalidArgumentError):
        majority_vote([])


def test_vote_and_hamming_match_exhaustive_counting():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        r = int(rng.integers(1, 5))
        c = int(rng.integers(1, 3))
        n = int(rng.integers(1, 10))
        blocks = rng.random((n, c, r, r))
        expected = np.zeros((c, r, r), dtype=np.uint8)
        for ch in range(c):
            for i in range(r):
                for j in range(r):
                    ones = sum(1 for b in range(n) if blocks[b, ch, i, j] >= 0.5)
                    expected[ch, i, j] = 1 if ones >= n - ones else 0
        voted = majority_vote(blocks)
        np.testing.assert_array_equal(voted.bits, expected)

        other = UserKey(rng.integers(0, 2, size=(c, r, r)))
        count = sum(
            1
            for ch in range(c)
            for i in range(r)
            for j in range(r)
            if voted.bits[ch, i, j] != other.bits[ch, i, j]
        )
        assert hamming_distance(voted, other) == count


def test_hamming_distance_rejects_shape_mismatch():
    with pytest.raises(InvalidArgumentError):
        hamming_distance(generate_key("a", 2, 1, 0), generate_key("a", 4, 1, 0))


def test_flip_bits_flips_exactly_n_distinct_bits():
    key = generate_key("alice", 4, 1, 0)
    rng = np.random.default_rng(1)
    for n in (0, 1, 5, 16):
        assert hamming_distance(key, flip_bits(key, n, rng)) == n
    with pytest.raises(InvalidArgumentError):
        flip_bits(key, 17, rng)


def test_pack_bits_is_msb_first():
    bits = np.array([1, 0, 0, 0, 0, 0, 0, 1, 1], dtype=np.uint8).reshape(1, 3, 3)
    assert pack_bits(bits) == bytes([0b10000001, 0b10000000])
    np.testing.assert_array_equal(unpack_bits(pack_bits(bits), 1, 3), bits)


def test_registry_rejects_duplicate_users_and_keys(registry, keys):
    with pytest.raises(ConflictError):
        registry.register("alice", generate_key("x", 4, 1, 0))
    with pytest.raises(ConflictError):
        registry.register("dave", keys["bob"])
    with pytest.raises(NotFoundError):
        registry.get("dave")


def test_registry_persists_keys_and_checkpoints(tmp_path, registry):
    registry.set_checkpoint("bob", "protected/bob.ckpt")
    path = tmp_path / "registry.jsonl"
    registry.save(path)
    loaded = KeyRegistry.load(path)
    assert [e.user_id for e in loaded] == ["alice", "bob", "carol"]
    assert loaded.get("bob").checkpoint == "protected/bob.ckpt"
    assert loaded.get("carol").key.same_bits(registry.get("carol").key)
    assert loaded.config_hash == "h0"


def test_registry_load_refuses_mixed_hashes(tmp_path, registry):
    path = tmp_path / "registry.jsonl"
    registry.save(path)
    lines = path.read_text().splitlines()
    rec = json.loads(lines[1])
    rec["config_hash"] = "other"
    lines[1] = json.dumps(rec)
    path.write_text("\n".join(lines))
    with pytest.raises(DataError):
        KeyRegistry.load(path)


def test_registry_load_reports_corrupt_records(tmp_path):
    path = tmp_path / "registry.jsonl"
    path.write_text('{"user_id": "alice"}\n')
    with pytest.raises(DataError):
        KeyRegistry.load(path)


def test_trace_key_returns_closest_within_threshold(registry, keys):
    near_carol = flip_bits(keys["carol"], 1, np.random.default_rng(0))
    match = trace_key(near_carol, registry, eps3=1)
    assert match.user_id == "carol" and match.distance == 1 and not match.ambiguous
    assert trace_key(near_carol, registry, eps3=0) is None


def test_trace_key_flags_ties_and_prefers_lowest_index():
    tie = KeyRegistry()
    tie.register("a", UserKey(np.array([0, 0, 0, 0]).reshape(1, 2, 2)))
    tie.register("b", UserKey(np.array([1, 1, 0, 0]).reshape(1, 2, 2)))
    match = trace_key(UserKey(np.array([1, 0, 0, 0]).reshape(1, 2, 2)), tie, eps3=1)
    assert match.user_id == "a" and match.distance == 1 and match.ambiguous


def test_trace_key_rejects_empty_registry():
    with pytest.raises(InvalidArgumentError):
        trace_key(generate_key("a", 2, 1, 0), KeyRegistry(), eps3=1)


def test_expand_repeats_the_block_pattern():
    key = UserKey(np.array([[[1, 0], [0, 1]]]))
    expected = np.array([[1, 0, 1, 0], [0, 1, 0, 1], [1, 0, 1, 0], [0, 1, 0, 1]])
    np.testing.assert_array_equal(expand_key(key, 4, 4).bits[0], expected)


def test_majority_vote_of_four_blocks():
    blocks = np.array(
        [[[1, 0], [0, 1]], [[1, 0], [0, 0]], [[1, 1], [0, 1]], [[0, 0], [1, 1]]]
    ).reshape(4, 1, 2, 2)
    np.testing.assert_array_equal(majority_vote(blocks).bits[0], [[1, 0], [0, 1]])


def test_generated_bits_are_balanced_over_seeds():
    bits = np.stack([generate_key("alice", 2, 1, s).bits for s in range(10_000)])
    assert abs(bits.mean() - 0.5) < 0.05
