from __future__ import annotations

import numpy as np
import pytest

from malkit.dataset import Dataset
from malkit.gbm import DecisionTree, GBMModel
from malkit.models import GBMConfig
from malkit.permissions import PermissionVocabulary
from malkit.synthetic import make_synthetic

MANIFEST = """<?xml version="1.0" encoding="utf-8"?>
<manifest xmlns:android="http://schemas.android.com/apk/res/android" package="com.example.app">
    <uses-permission android:name="android.permission.INTERNET" />
    <uses-permission android:name="android.permission.SEND_SMS" />
    <uses-permission android:name="com.example.CUSTOM" />
    <uses-permission-sdk-23 android:name="android.permission.READ_CONTACTS" />
    <uses-permission android:name="android.permission.INTERNET" />
    <application android:label="demo" />
</manifest>
"""


@pytest.fixture(scope="session")
def synthetic() -> Dataset:
    return make_synthetic(seed=42)


@pytest.fixture(scope="session")
def small_synthetic() -> Dataset:
    return make_synthetic(seed=7, families=3, per_family=30, P=20, exclusive=3, noise=0.05)


@pytest.fixture
def vocab2() -> PermissionVocabulary:
    return PermissionVocabulary(("android.permission.A", "android.permission.B"))


@pytest.fixture
def two_class_model(vocab2) -> GBMModel:
    """One round: class 'a' gets -1/+1 on bit 0, class 'b' a constant 0.5 leaf."""
    ta = DecisionTree.from_nodes(0, [{"feature": 0}, {"leaf": -1.0}, {"leaf": 1.0}])
    tb = DecisionTree.from_nodes(1, [{"leaf": 0.5}])
    return GBMModel(
        config=GBMConfig(rounds=1, max_depth=1, learning_rate=1.0),
        classes=("a", "b"),
        base_scores=np.zeros(2),
        trees=(ta, tb),
        vocab=vocab2,
    )


@pytest.fixture
def manifest_path(tmp_path):
    p = tmp_path / "AndroidManifest.xml"
    p.write_text(MANIFEST, encoding="utf-8")
    return p
