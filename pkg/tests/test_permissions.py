from __future__ import annotations

import numpy as np
import pytest

from malkit.errors import DatasetError, ManifestParseError
from malkit.permissions import (
    PermissionVocabulary,
    build_vocabulary,
    encode,
    filter_system_permissions,
    parse_feature_lines,
    parse_manifest,
    parse_permission_list,
    read_permission_file,
)

from .conftest import MANIFEST


def test_parse_manifest_document_order_and_dedup():
    assert parse_manifest(MANIFEST) == [
        "android.permission.INTERNET",
        "android.permission.SEND_SMS",
        "com.example.CUSTOM",
        "android.permission.READ_CONTACTS",
    ]


def test_parse_manifest_can_exclude_sdk23():
    names = parse_manifest(MANIFEST, include_sdk23=False)
    assert "android.permission.READ_CONTACTS" not in names
    assert "android.permission.INTERNET" in names


def test_parse_manifest_skips_nameless_elements_with_warning():
    xml = (
        '<manifest xmlns:android="http://schemas.android.com/apk/res/android">'
        "<uses-permission/>"
        '<uses-permission android:name="android.permission.CAMERA"/>'
        "</manifest>"
    )
    warnings: list[str] = []
    assert parse_manifest(xml, warnings=warnings) == ["android.permission.CAMERA"]
    assert len(warnings) == 1


def test_parse_manifest_no_permissions():
    assert parse_manifest("<manifest/>") == []


def test_malformed_manifest_reports_position():
    with pytest.raises(ManifestParseError) as exc:
        parse_manifest("<manifest>\n<uses-permission>\n</manifest>")
    assert exc.value.line is not None


def test_filter_system_permissions():
    names = ["android.permission.INTERNET", "com.example.CUSTOM", "android.permission.SEND_SMS"]
    assert filter_system_permissions(names) == ["android.permission.INTERNET", "android.permission.SEND_SMS"]


def test_parse_feature_lines_keeps_permission_category():
    text = "permission::android.permission.INTERNET\napi_call::foo/Bar\n\npermission::android.permission.INTERNET\n"
    assert parse_feature_lines(text) == ["android.permission.INTERNET"]


def test_parse_feature_lines_malformed_line_number():
    with pytest.raises(DatasetError) as exc:
        parse_feature_lines("permission::android.permission.INTERNET\nnot a feature\n", "f.txt")
    assert exc.value.line == 2
    assert "f.txt:2:" in str(exc.value)


def test_parse_permission_list_comments():
    assert parse_permission_list("# header\nandroid.permission.A  # trailing\n\nandroid.permission.A\n") == [
        "android.permission.A"
    ]


def test_read_permission_file_dispatch(tmp_path, manifest_path):
    feat = tmp_path / "abc123"
    feat.write_text("permission::android.permission.CAMERA\n", encoding="utf-8")
    plain = tmp_path / "perms.txt"
    plain.write_text("android.permission.WAKE_LOCK\n", encoding="utf-8")
    assert "android.permission.SEND_SMS" in read_permission_file(manifest_path)
    assert read_permission_file(feat) == ["android.permission.CAMERA"]
    assert read_permission_file(plain) == ["android.permission.WAKE_LOCK"]


def test_read_permission_file_missing(tmp_path):
    with pytest.raises(DatasetError):
        read_permission_file(tmp_path / "nope.xml")


def test_build_vocabulary_is_sorted_union():
    vocab = build_vocabulary([["android.permission.B", "android.permission.A"], ["android.permission.C"]])
    assert vocab.names == ("android.permission.A", "android.permission.B", "android.permission.C")
    assert vocab.P == 3
    assert "android.permission.C" in vocab


def test_vocabulary_rejects_duplicates():
    with pytest.raises(ValueError):
        PermissionVocabulary(("android.permission.A", "android.permission.A"))


def test_vocabulary_fingerprint_depends_on_order():
    a = PermissionVocabulary(("android.permission.A", "android.permission.B"))
    b = PermissionVocabulary(("android.permission.B", "android.permission.A"))
    assert a.fingerprint() == PermissionVocabulary(a.names).fingerprint()
    assert a.fingerprint() != b.fingerprint()


def test_vocabulary_file(tmp_path, vocab2):
    path = vocab2.save(tmp_path / "vocab.txt")
    assert PermissionVocabulary.load(path).names == vocab2.names


def test_encode_counts_unknown_names(vocab2):
    enc = encode(["android.permission.B", "android.permission.Z", "android.permission.Z"], vocab2)
    assert enc.vector.dtype == np.uint8
    assert enc.vector.tolist() == [0, 1]
    assert enc.ignored == 1


def test_encode_empty_set(vocab2):
    assert encode([], vocab2).vector.tolist() == [0, 0]


def _random_sets(seed: int, n_sets: int = 20) -> list[list[str]]:
    rng = np.random.default_rng(seed)
    pool = [f"android.permission.P{i:02d}" for i in range(15)] + ["com.example.X", "com.example.Y"]
    sets = []
    for _ in range(n_sets):
        size = int(rng.integers(0, 12))
        # repeats allowed
        sets.append([pool[j] for j in rng.integers(0, len(pool), size=size)])
    return sets


@pytest.mark.parametrize("seed", range(5))
def test_encode_ignores_repeats_and_order(seed):
    sets = _random_sets(seed)
    vocab = build_vocabulary(sets[: len(sets) // 2])
    for names in sets:
        enc = encode(names, vocab)
        deduped = encode(list(dict.fromkeys(reversed(names))), vocab)
        assert enc.vector.tolist() == deduped.vector.tolist()
        assert enc.ignored == deduped.ignored
        assert int(enc.vector.sum()) <= min(vocab.P, len(set(names)))


@pytest.mark.parametrize("seed", range(5))
def test_filter_system_permissions_idempotent(seed):
    for names in _random_sets(seed):
        once = filter_system_permissions(names)
        assert filter_system_permissions(once) == once
        assert all(n.startswith("android.permission.") for n in once)


@pytest.mark.parametrize("seed", range(5))
def test_build_vocabulary_ignores_input_order(seed):
    sets = _random_sets(seed)
    rng = np.random.default_rng(seed + 100)
    shuffled = [[s[j] for j in rng.permutation(len(s))] for s in sets]
    shuffled = [shuffled[i] for i in rng.permutation(len(shuffled))]
    a, b = build_vocabulary(sets), build_vocabulary(shuffled)
    assert a.names == b.names
    assert a.fingerprint() == b.fingerprint()
