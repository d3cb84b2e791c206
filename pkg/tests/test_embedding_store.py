import hashlib
import random

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from fuseid.embedding_store import (DimensionMismatchError, DuplicateRecordError, EmbeddingFormatError,
                                    EmbeddingRecord, EmptyDatasetError, SynthConfig, ValidationError,
                                    decode_embeddings, encode_embeddings, generate_synthetic,
                                    make_manifest, pair_samples, read_embeddings, write_embeddings)


def rec(sid, cid, split="train", modality="voice", vec=(1.0, 2.0, 3.0, 4.0)):
    return EmbeddingRecord(sid, cid, split, modality, np.asarray(vec, dtype=np.float32))


def test_empty_file_round_trip(tmp_path):
    path = tmp_path / "empty.fuseid"
    write_embeddings([], path)
    manifest, records = read_embeddings(path)
    assert records == []
    assert manifest.num_speakers == 0
    assert manifest.voice_dim is None and manifest.face_dim is None


def test_single_record_round_trip(tmp_path):
    r = rec("spk", "c0", vec=[0.5, -1.25, 3.0, 1e-7])
    write_embeddings([r], tmp_path / "one.fuseid")
    manifest, back = read_embeddings(tmp_path / "one.fuseid")
    assert back == [r]
    assert back[0].vector.tobytes() == r.vector.tobytes()
    assert manifest.voice_dim == 4 and manifest.counts["train"]["voice"] == 1


def test_digest_stable_for_large_mixed_input(tmp_path, rng):
    records = []
    for k in range(5000):
        split = "train" if k % 3 else "test"
        records.append(rec(f"s{k % 97}", f"c{k}", split, "voice", rng.standard_normal(16)))
        records.append(rec(f"s{k % 97}", f"c{k}", split, "face", rng.standard_normal(8)))
    assert len(records) == 10_000
    a, b = tmp_path / "a.fuseid", tmp_path / "b.fuseid"
    write_embeddings(records, a)
    write_embeddings(records, b)
    assert hashlib.sha256(a.read_bytes()).hexdigest() == hashlib.sha256(b.read_bytes()).hexdigest()
    _, back = read_embeddings(a)
    assert back == records


def test_header_layout():
    buf = encode_embeddings([rec("a", "c", modality="face", vec=[1, 2])])
    assert buf[:8] == b"FUSEID1\0"
    hlen = int.from_bytes(buf[8:12], "little")
    assert buf[12:12 + hlen] == b'{"face_dim":2,"record_count":1,"voice_dim":null}'


def test_label_map_uses_sorted_ids():
    manifest, _ = decode_embeddings(encode_embeddings([rec("b", "1"), rec("a", "1")]))
    assert manifest.label_map == {"a": 0, "b": 1}


def test_nan_component_names_record():
    buf = encode_embeddings([rec("alice", "clip7", vec=[1.0, np.nan, 0.0, 0.0])])
    with pytest.raises(ValidationError, match="alice.*clip7"):
        decode_embeddings(buf)


def test_inf_component_rejected():
    with pytest.raises(ValidationError):
        decode_embeddings(encode_embeddings([rec("a", "c", vec=[np.inf, 0, 0, 0])]))


def test_duplicate_record_rejected():
    with pytest.raises(DuplicateRecordError):
        decode_embeddings(encode_embeddings([rec("a", "c"), rec("a", "c")]))


def test_same_clip_in_both_modalities_is_not_a_duplicate():
    _, back = decode_embeddings(encode_embeddings([rec("a", "c"), rec("a", "c", modality="face")]))
    assert len(back) == 2


def test_mixed_dimensions_rejected(tmp_path):
    with pytest.raises(DimensionMismatchError):
        write_embeddings([rec("a", "1"), rec("a", "2", vec=[1.0, 2.0])], tmp_path / "x")


def test_unwritable_path_raises_os_error(tmp_path):
    with pytest.raises(OSError):
        write_embeddings([rec("a", "1")], tmp_path / "missing_dir" / "x.fuseid")


@pytest.mark.parametrize("cut", [3, 10, 20, -1])
def test_truncated_file_rejected(cut):
    buf = encode_embeddings([rec("a", "1"), rec("b", "2")])
    with pytest.raises(EmbeddingFormatError):
        decode_embeddings(buf[:cut])


def test_bad_magic_rejected():
    with pytest.raises(EmbeddingFormatError):
        decode_embeddings(b"NOTMAGIC" + b"\0" * 20)


def test_pairing_single_clip():
    pairs, skipped = pair_samples([rec("a", "1"), rec("a", "1", modality="face", vec=[1, 1])], "train")
    assert len(pairs) == 1 and skipped == 0
    assert pairs[0].speaker_index == 0
    np.testing.assert_array_equal(pairs[0].face, [1, 1])


def test_pairing_voice_only_clip_is_skipped():
    with pytest.raises(EmptyDatasetError) as err:
        pair_samples([rec("a", "1")], "train")
    assert err.value.skipped == 1
    pairs, skipped = pair_samples(
        [rec("a", "1"), rec("a", "2"), rec("a", "2", modality="face")], "train")
    assert len(pairs) == 1 and skipped == 1


def test_pairing_ignores_other_split():
    records = [rec("a", "1", "test"), rec("a", "1", "train", "face")]
    with pytest.raises(EmptyDatasetError):
        pair_samples(records, "train")


def test_pairing_synthetic_count():
    records = generate_synthetic(SynthConfig(num_identities=50, clips_per_identity_train=20,
                                             clips_per_identity_test=2, latent_dim=4,
                                             voice_dim=8, face_dim=8))
    pairs, skipped = pair_samples(records, "train")
    assert len(pairs) == 1000 and skipped == 0


def test_pairing_invariant_to_record_order(small_synth):
    _, records, _ = small_synth
    shuffled = list(records)
    random.Random(0).shuffle(shuffled)
    a, _ = pair_samples(records, "train")
    b, _ = pair_samples(shuffled, "train")
    key = lambda p: (p.speaker_id, p.clip_id, p.speaker_index, p.voice.tobytes(), p.face.tobytes())
    assert {key(p) for p in a} == {key(p) for p in b}


def test_manifest_check_requires_two_speakers():
    records = [rec("a", "1")]
    with pytest.raises(ValidationError):
        make_manifest(records).check(records=records)


def test_manifest_check_requires_train_coverage():
    records = [rec("a", "1"), rec("b", "1", "test")]
    with pytest.raises(ValidationError, match="b"):
        make_manifest(records).check(records=records)


def test_synthetic_zero_noise_identities_are_constant():
    cfg = SynthConfig(num_identities=3, latent_dim=2, voice_dim=4, face_dim=3,
                      clips_per_identity_train=4, clips_per_identity_test=2,
                      voice_noise_sigma=0.0, face_noise_sigma=0.0, seed=1)
    records = generate_synthetic(cfg)
    groups = {}
    for r in records:
        groups.setdefault((r.speaker_id, r.modality), []).append(r.vector)
    for vecs in groups.values():
        assert len(vecs) == 6
        for v in vecs[1:]:
            np.testing.assert_array_equal(v, vecs[0])


def test_synthetic_deterministic_bytes():
    cfg = SynthConfig(num_identities=4, latent_dim=3, voice_dim=5, face_dim=4, seed=11)
    assert encode_embeddings(generate_synthetic(cfg)) == encode_embeddings(generate_synthetic(cfg))
    other = SynthConfig(num_identities=4, latent_dim=3, voice_dim=5, face_dim=4, seed=12)
    assert encode_embeddings(generate_synthetic(cfg)) != encode_embeddings(generate_synthetic(other))


def test_synthetic_matches_construction():
    # Re-derive the first identity's first voice clip from the documented draw order.
    cfg = SynthConfig(num_identities=2, latent_dim=2, voice_dim=3, face_dim=3,
                      clips_per_identity_train=1, clips_per_identity_test=1,
                      voice_noise_sigma=0.5, face_noise_sigma=0.25, seed=5)
    g = np.random.default_rng(5)
    wv = g.standard_normal((3, 2)) / np.sqrt(2)
    wf = g.standard_normal((3, 2)) / np.sqrt(2)
    z = g.standard_normal(2)
    v = wv @ z + 0.5 * g.standard_normal(3)
    f = wf @ z + 0.25 * g.standard_normal(3)
    records = generate_synthetic(cfg)
    np.testing.assert_allclose(records[0].vector, v / np.linalg.norm(v), rtol=1e-6)
    np.testing.assert_allclose(records[1].vector, f / np.linalg.norm(f), rtol=1e-6)


@pytest.mark.parametrize("bad", [
    dict(num_identities=0), dict(latent_dim=0), dict(voice_noise_sigma=-0.1),
    dict(latent_dim=10, voice_dim=8), dict(clips_per_identity_test=0),
])
def test_synth_config_validation(bad):
    with pytest.raises(ValueError):
        SynthConfig(**{**dict(latent_dim=4, voice_dim=8, face_dim=8), **bad}).validate()


@given(st.integers(0, 2**31 - 1), st.floats(0, 2), st.floats(0, 2))
def test_synthetic_vectors_unit_norm(seed, sv, sf):
    cfg = SynthConfig(num_identities=3, latent_dim=3, voice_dim=5, face_dim=4,
                      clips_per_identity_train=2, clips_per_identity_test=1,
                      voice_noise_sigma=sv, face_noise_sigma=sf, seed=seed)
    norms = np.array([np.linalg.norm(r.vector.astype(np.float64)) for r in generate_synthetic(cfg)])
    assert np.all(np.abs(norms - 1) <= 1e-6)


ids = st.text(alphabet=st.characters(blacklist_categories=("Cs",)), min_size=0, max_size=12)
finite32 = st.floats(allow_nan=False, allow_infinity=False, width=32)


@st.composite
def record_sets(draw):
    vdim = draw(st.integers(1, 6))
    fdim = draw(st.integers(1, 6))
    keys = draw(st.lists(st.tuples(ids, ids, st.sampled_from(["train", "test"]),
                                   st.sampled_from(["voice", "face"])),
                         unique=True, max_size=15))
    out = []
    for sid, cid, split, mod in keys:
        dim = vdim if mod == "voice" else fdim
        vec = draw(st.lists(finite32, min_size=dim, max_size=dim))
        out.append(EmbeddingRecord(sid, cid, split, mod, np.array(vec, dtype=np.float32)))
    return out


@given(record_sets())
def test_round_trip_property(records):
    manifest, back = decode_embeddings(encode_embeddings(records))
    assert back == records
    assert all(a.vector.tobytes() == b.vector.tobytes() for a, b in zip(back, records))
    assert sum(c for s in manifest.counts.values() for c in s.values()) == len(records)
