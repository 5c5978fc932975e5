import json
from pathlib import Path

import numpy as np
import pytest

from conftest import sample_windows, stub_cmd
from slideseg.bridge import (
    BackendDescriptor,
    BackendKind,
    ExternalBackendClient,
    classify_batch,
    decode_features,
    decode_probability,
    decode_request,
    encode_request,
    extract_features,
    heuristic_backend,
    heuristic_features,
    heuristic_probability,
    parse_backend_spec,
)
from slideseg.errors import (
    BackendFailure,
    CapabilityError,
    ConfigError,
    InputError,
    NumericError,
    ProtocolError,
)

GOLDEN = Path(__file__).parent / "golden" / "heuristic_probability.json"


def tumor_stroma_patches(phantom, size=224, count=50):
    from slideseg.slide import read_level

    rgb = read_level(phantom["slide"], 0)
    tumor = phantom["tumor"].astype(bool)
    stroma = phantom["tissue"].astype(bool) & ~tumor
    rng = np.random.default_rng(1234)
    t_patches = [
        rgb[y : y + size, x : x + size] for y, x in sample_windows(rng, tumor, size, count)
    ]
    s_patches = [
        rgb[y : y + size, x : x + size] for y, x in sample_windows(rng, stroma, size, count)
    ]
    return t_patches, s_patches


def test_heuristic_separates_phantom_textures(phantom_mid):
    t_patches, s_patches = tumor_stroma_patches(phantom_mid, count=500)
    pt = [heuristic_probability(heuristic_features(p)) for p in t_patches]
    ps = [heuristic_probability(heuristic_features(p)) for p in s_patches]
    assert all(p > 0.5 for p in pt)
    assert all(p < 0.5 for p in ps)


def test_feature_class_separation(phantom_mid):
    t_patches, s_patches = tumor_stroma_patches(phantom_mid, count=500)
    ft = np.array([heuristic_features(p) for p in t_patches])
    fs = np.array([heuristic_features(p) for p in s_patches])
    between = np.linalg.norm(ft.mean(0) - fs.mean(0))
    within = np.concatenate(
        [np.linalg.norm(ft - ft.mean(0), axis=1), np.linalg.norm(fs - fs.mean(0), axis=1)]
    ).mean()
    assert between > within


def test_features_of_uniform_white_patch():
    patch = np.full((224, 224, 3), 255, dtype=np.uint8)
    f = heuristic_features(patch)
    assert f[0] == f[1] == f[2] == 255.0
    assert f[3] == 0.0  # luminance variance
    assert f[4] == 0.0  # gradient energy
    assert f[5] == 0.0  # saturation


def test_features_deterministic():
    rng = np.random.default_rng(0)
    patch = rng.integers(0, 256, size=(224, 224, 3), dtype=np.uint8)
    assert np.array_equal(heuristic_features(patch), heuristic_features(patch.copy()))


def test_heuristic_probability_logistic():
    assert heuristic_probability(np.zeros(6), np.zeros(6), 0.0) == 0.5
    assert heuristic_probability(np.zeros(6), np.zeros(6), 20.0) >= 0.999999
    assert heuristic_probability(np.zeros(6), np.zeros(6), -20.0) <= 1e-6
    with pytest.raises(NumericError):
        heuristic_probability(np.array([np.nan] * 6), np.zeros(6), 0.0)
    with pytest.raises(InputError):
        heuristic_probability(np.zeros(5), np.zeros(6), 0.0)


def test_frozen_weights_golden(phantom_mid):
    from slideseg.slide import read_level

    golden = json.loads(GOLDEN.read_text())
    spec = phantom_mid["spec"]
    assert golden["phantom"]["seed"] == spec.seed  # fixture must match golden
    rgb = read_level(phantom_mid["slide"], 0)
    oy, ox = golden["patch_origin_yx"]
    patch = rgb[oy : oy + 224, ox : ox + 224]
    f = heuristic_features(patch)
    expected_f = np.array([float(v) for v in golden["expected_features"]])
    assert np.allclose(f, expected_f, atol=1e-9)
    p = heuristic_probability(f)
    assert p == pytest.approx(float(golden["expected_p"]), abs=1e-9)


def test_classify_empty_list():
    assert classify_batch(heuristic_backend(), []) == []


def test_classify_order_and_batch_invariance(phantom_mid):
    t_patches, s_patches = tumor_stroma_patches(phantom_mid, count=8)
    patches = [((i, 0), p) for i, p in enumerate(t_patches + s_patches)]
    full = classify_batch(heuristic_backend(), patches)
    assert [p.grid_x for p in full] == [k[0][0] for k in patches]
    # Per-item results independent of batch composition / order.
    shuffled = patches[::-1]
    rev = classify_batch(heuristic_backend(), shuffled)
    by_key = {(p.grid_x, p.grid_y): p.p_tumor for p in rev}
    for p in full:
        assert by_key[(p.grid_x, p.grid_y)] == p.p_tumor


def test_classify_rejects_wrong_size():
    bad = np.zeros((64, 64, 3), dtype=np.uint8)
    with pytest.raises(InputError):
        classify_batch(heuristic_backend(), [((0, 0), bad)])


def test_extract_features_capability_and_order(phantom_mid):
    t_patches, _ = tumor_stroma_patches(phantom_mid, count=4)
    patches = [((i, 0), p) for i, p in enumerate(t_patches)]
    feats = extract_features(heuristic_backend(), patches)
    assert len(feats) == 4
    for (key, block), f in zip(patches, feats):
        assert np.array_equal(f, heuristic_features(block))
    no_features = BackendDescriptor(kind=BackendKind.HEURISTIC, feature_dim=0)
    with pytest.raises(CapabilityError):
        extract_features(no_features, patches)


def test_protocol_encode_decode_roundtrip():
    rng = np.random.default_rng(2)
    block = rng.integers(0, 256, size=(17, 13, 3), dtype=np.uint8)
    req = encode_request(7, "classify", block)
    rid, op, arr = decode_request(req)
    assert (rid, op) == (7, "classify")
    assert np.array_equal(arr, block)
    planar = rng.random((4, 5, 6)).astype("<f4")
    req = encode_request(8, "refine", planar)
    rid, op, arr = decode_request(req)
    assert (rid, op) == (8, "refine")
    assert np.array_equal(arr, planar)


def test_decode_response_validation():
    assert decode_probability({"id": 1, "p": 0.25}) == 0.25
    for bad in ({"id": 1}, {"id": 1, "p": float("nan")}, {"id": 1, "p": 2.0}, {"id": 1, "p": "x"}):
        with pytest.raises(ProtocolError):
            decode_probability(bad)
    assert np.array_equal(decode_features({"id": 1, "f": [1, 2]}, 2), [1.0, 2.0])
    for bad in ({"id": 1}, {"id": 1, "f": [1]}, {"id": 1, "f": [float("inf"), 0]}):
        with pytest.raises(ProtocolError):
            decode_features(bad, 2)


def _echo_backend(*args, batch_size=16, feature_dim=0, timeout_s=30.0):
    return BackendDescriptor(
        kind=BackendKind.EXTERNAL_PROCESS,
        command=stub_cmd("echo_backend.py", *args),
        batch_size=batch_size,
        feature_dim=feature_dim,
        timeout_s=timeout_s,
    )


def _patches(n, value=None, size=224):
    rng = np.random.default_rng(3)
    out = []
    for i in range(n):
        if value is None:
            block = rng.integers(0, 256, size=(size, size, 3), dtype=np.uint8)
        else:
            block = np.full((size, size, 3), value, dtype=np.uint8)
        out.append(((i % 7, i // 7), block))
    return out


def test_external_echo_constant():
    probs = classify_batch(_echo_backend("--p", "const"), _patches(10))
    assert [p.p_tumor for p in probs] == [0.5] * 10


def test_external_pixel_passthrough():
    patches = _patches(6, value=51)  # mean 51 -> p = 0.2
    probs = classify_batch(_echo_backend("--p", "mean"), patches)
    for p in probs:
        assert p.p_tumor == pytest.approx(0.2, abs=1e-12)


def test_external_out_of_order_responses_matched_by_id():
    backend = _echo_backend("--p", "mean", "--reverse-batches", "8", batch_size=8)
    patches = [((i, 0), np.full((224, 224, 3), 10 * i, dtype=np.uint8)) for i in range(8)]
    probs = classify_batch(backend, patches)
    for i, p in enumerate(probs):
        assert p.p_tumor == pytest.approx(10 * i / 255.0, abs=1e-12)


def test_external_features():
    backend = _echo_backend("--feature-dim", "4", feature_dim=4)
    patches = [((0, 0), np.full((224, 224, 3), 128, dtype=np.uint8))]
    feats = extract_features(backend, patches)
    assert feats[0].shape == (4,)
    assert feats[0][0] == pytest.approx(128 / 255.0, abs=1e-9)


@pytest.mark.parametrize("mode", ["nan", "big", "wrong-id", "junk", "missing-field", "dup"])
def test_malformed_responses_raise_protocol_error(mode):
    backend = BackendDescriptor(
        kind=BackendKind.EXTERNAL_PROCESS,
        command=stub_cmd("bad_backend.py", "--mode", mode),
        batch_size=4,
        timeout_s=10.0,
    )
    with pytest.raises(ProtocolError):
        classify_batch(backend, _patches(2))


def test_backend_exit_reports_unprocessed():
    backend = BackendDescriptor(
        kind=BackendKind.EXTERNAL_PROCESS,
        command=stub_cmd("bad_backend.py", "--mode", "exit"),
        batch_size=4,
        timeout_s=10.0,
    )
    with pytest.raises(BackendFailure) as err:
        classify_batch(backend, _patches(3))
    assert len(err.value.unprocessed) == 3


def test_backend_timeout():
    backend = BackendDescriptor(
        kind=BackendKind.EXTERNAL_PROCESS,
        command=stub_cmd("bad_backend.py", "--mode", "hang"),
        batch_size=2,
        timeout_s=1.0,
    )
    with pytest.raises(BackendFailure):
        classify_batch(backend, _patches(2))


def test_backend_spec_parsing():
    assert parse_backend_spec("heuristic").kind is BackendKind.HEURISTIC
    assert parse_backend_spec("identity").kind is BackendKind.IDENTITY
    ext = parse_backend_spec("exec:python3 -u worker.py --x 1")
    assert ext.kind is BackendKind.EXTERNAL_PROCESS
    assert ext.command == ("python3", "-u", "worker.py", "--x", "1")
    with pytest.raises(ConfigError):
        parse_backend_spec("magic")
    with pytest.raises(ConfigError):
        BackendDescriptor(kind=BackendKind.EXTERNAL_PROCESS).validate()
    with pytest.raises(ConfigError):
        BackendDescriptor(kind=BackendKind.HEURISTIC, batch_size=0).validate()


def test_client_rejects_missing_command():
    with pytest.raises(BackendFailure):
        ExternalBackendClient(("/nonexistent/backend-binary",))
