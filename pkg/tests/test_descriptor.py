import subprocess
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from heviper import descriptor as desc_mod
from heviper.adapter import BranchId, init_branch_params
from heviper.descriptor import (
    Aggregator,
    BackboneStub,
    DescriptorSet,
    backbone_stub_forward,
    decode_descriptors,
    encode_descriptors,
    extract_descriptors,
    extract_height_descriptor,
    extract_place_descriptor,
    gem_pool,
    l2_normalize,
    load_descriptors,
    mean_pool,
    save_descriptors,
)
from heviper.errors import (
    ConfigError,
    InputError,
    MagicMismatchError,
    TruncatedFileError,
    VersionMismatchError,
)
from heviper.imageio import decode_netpbm, encode_netpbm, read_image, write_image

GOLDEN = Path(__file__).parent / "golden"


def column(values):
    """Token sequence with a class token of zeros and one patch per value."""
    return np.concatenate([[0.0], values]).astype(np.float32)[:, None]


@pytest.fixture
def image():
    return np.random.default_rng(42).integers(0, 256, (56, 56), dtype=np.uint8)


@pytest.fixture
def branches():
    he = init_branch_params(4, 16, 8, dilation=2, seed=42, branch=BranchId.HE)
    vpr = init_branch_params(4, 16, 8, dilation=2, seed=42, branch=BranchId.VPR)
    return he, vpr


@pytest.fixture
def stub():
    return BackboneStub(seed=42, num_blocks=4, dim=16, patch_size=14, cells=2)


class TestGem:
    def test_hand_values(self):
        assert gem_pool(column([1, 2, 3]), 1.0)[0] == pytest.approx(2.0, abs=1e-6)
        assert gem_pool(column([1, 2]), 3.0)[0] == pytest.approx(4.5 ** (1 / 3), abs=1e-5)
        assert gem_pool(column([1, 5]), 10000.0)[0] == pytest.approx(5.0, abs=1e-3)

    def test_class_token_excluded(self):
        t = column([1, 2])
        t[0] = 1000
        assert gem_pool(t, 1.0)[0] == pytest.approx(1.5)

    def test_clamps_negatives(self):
        assert gem_pool(column([-5, -1]), 2.0)[0] == pytest.approx(1e-6, rel=1e-5)

    def test_p_below_one(self):
        with pytest.raises(ConfigError):
            gem_pool(column([1.0]), 0.5)

    @settings(max_examples=40, deadline=None)
    @given(arrays(np.float32, (5, 3), elements=st.floats(0.125, 50, width=32)), st.floats(1, 20), st.floats(0, 20))
    def test_monotone_in_p(self, patches, p, dp):
        t = np.vstack([np.zeros((1, 3), np.float32), patches])
        assert np.all(gem_pool(t, p + dp) >= gem_pool(t, p) * (1 - 1e-6))


class TestNormalize:
    def test_values(self):
        np.testing.assert_allclose(l2_normalize(np.array([3.0, 4.0])), [0.6, 0.8], atol=1e-7)
        unit = l2_normalize(np.array([1.0, 2.0, 2.0]))
        np.testing.assert_allclose(l2_normalize(unit), unit, atol=1e-7)
        np.testing.assert_allclose(l2_normalize(7.5 * unit), unit, atol=1e-6)

    def test_zero_vector(self):
        with pytest.raises(InputError):
            l2_normalize(np.zeros(4))

    def test_row_wise(self, rng):
        out = l2_normalize(rng.standard_normal((5, 8)))
        np.testing.assert_allclose(np.linalg.norm(out, axis=1), 1, atol=1e-6)


class TestAggregator:
    def test_parse(self):
        assert Aggregator.parse("gem") == Aggregator("gem", 3.0)
        assert Aggregator.parse("gem:2.5") == Aggregator("gem", 2.5)
        assert Aggregator.parse("mean").kind == "mean"
        for bad in ("salad", "gem:x", "gem:0.5"):
            with pytest.raises(ConfigError):
                Aggregator.parse(bad)

    def test_gem1_equals_mean(self, rng):
        t = rng.uniform(0.1, 3, (10, 6)).astype(np.float32)
        np.testing.assert_allclose(Aggregator("gem", 1.0)(t), mean_pool(t), atol=1e-6)


class TestStub:
    def test_stream_shape_and_determinism(self, stub, image):
        a, b = backbone_stub_forward(image, stub), backbone_stub_forward(image, stub)
        assert len(a) == 4 and all(x.shape == (17, 16) and x.dtype == np.float32 for x in a)
        assert all(x.tobytes() == y.tobytes() for x, y in zip(a, b))

    def test_constant_image_gives_identical_patches(self, stub):
        for x in stub.forward(np.full((28, 28), 77, np.uint8)):
            assert np.all(x[1:] == x[1])

    def test_seed_changes_stream(self, stub, image):
        other = replace(stub, seed=43).forward(image)
        assert any(not np.array_equal(x, y) for x, y in zip(stub.forward(image), other))

    def test_class_token_is_patch_mean(self, stub, image):
        x0 = stub.forward(image)[0]
        np.testing.assert_allclose(x0[0], x0[1:].mean(axis=0), atol=1e-5)

    def test_colour_and_float_inputs(self, stub, rng):
        rgb = rng.integers(0, 256, (28, 28, 3), dtype=np.uint8)
        assert stub.forward(rgb)[0].shape == (5, 16)
        grid = rng.random((28, 28), dtype=np.float32)
        assert stub.forward(grid)[0].shape == (5, 16)

    def test_bad_dims(self, stub):
        with pytest.raises(InputError):
            stub.forward(np.zeros((30, 28), np.uint8))
        with pytest.raises(InputError):
            stub.forward(np.zeros((28, 56), np.uint8))
        with pytest.raises(ConfigError):
            BackboneStub(patch_size=14, cells=3)


class TestExtraction:
    def test_unit_norm_and_repeatable(self, stub, image, branches):
        he, vpr = branches
        h = extract_height_descriptor(image, stub, he)
        p = extract_place_descriptor(image, stub, vpr, "gem")
        assert abs(np.linalg.norm(h) - 1) <= 1e-5 and abs(np.linalg.norm(p) - 1) <= 1e-5
        assert h.tobytes() == extract_height_descriptor(image.copy(), stub, he).tobytes()

    def test_golden(self, stub, image, branches):
        he, vpr = branches
        golden = np.load(GOLDEN / "descriptors_seed42.npy")
        h, p = extract_descriptors(image, stub, he, vpr)
        np.testing.assert_allclose(h, golden[0], atol=1e-6)
        np.testing.assert_allclose(p, golden[1], atol=1e-6)

    def test_single_forward_pass(self, stub, image, branches, monkeypatch):
        calls = []
        original = BackboneStub.forward
        monkeypatch.setattr(BackboneStub, "forward", lambda self, img: calls.append(1) or original(self, img))
        extract_descriptors(image, stub, *branches)
        assert len(calls) == 1

    def test_isolation(self, stub, image, branches, rng):
        he, vpr = branches
        h0, p0 = extract_descriptors(image, stub, he, vpr)
        vpr2 = [replace(p, down_proj=p.down_proj + rng.standard_normal(p.down_proj.shape)) for p in vpr]
        he2 = [replace(p, s1=p.s1 + 1.0) for p in he]
        assert extract_descriptors(image, stub, he, vpr2)[0].tobytes() == h0.tobytes()
        assert extract_descriptors(image, stub, he2, vpr)[1].tobytes() == p0.tobytes()

    def test_unknown_aggregator(self, stub, image, branches):
        with pytest.raises(ConfigError):
            extract_place_descriptor(image, stub, branches[1], "netvlad")


def test_descriptor_determinism_across_processes(tmp_path):
    script = (
        "import numpy as np, sys\n"
        "from heviper.adapter import BranchId, init_branch_params\n"
        "from heviper.descriptor import BackboneStub, extract_descriptors\n"
        "img = np.random.default_rng(42).integers(0, 256, (56, 56), dtype=np.uint8)\n"
        "stub = BackboneStub(42, 4, 16, 14, 2)\n"
        "he = init_branch_params(4, 16, 8, dilation=2, seed=42, branch=BranchId.HE)\n"
        "vpr = init_branch_params(4, 16, 8, dilation=2, seed=42, branch=BranchId.VPR)\n"
        "h, p = extract_descriptors(img, stub, he, vpr)\n"
        "sys.stdout.write((h.tobytes() + p.tobytes()).hex())\n"
    )
    runs = [subprocess.run([sys.executable, "-c", script], capture_output=True, text=True, check=True).stdout for _ in range(2)]
    assert runs[0] == runs[1] and runs[0]


class TestDescriptorFile:
    def test_round_trip(self, tmp_path, rng):
        ds = DescriptorSet([5, 2**63 + 1, 7], rng.standard_normal((3, 4)))
        save_descriptors(tmp_path / "d.hevd", ds)
        back = load_descriptors(tmp_path / "d.hevd")
        assert back == ds
        np.testing.assert_array_equal(back.get(2**63 + 1), ds.vectors[1])

    def test_layout(self, rng):
        ds = DescriptorSet([9], rng.standard_normal((1, 2)))
        data = encode_descriptors(ds)
        assert data[:4] == b"HEVD" and len(data) == 4 + 4 + 8 + 4 + 8 + 8
        assert int.from_bytes(data[-8:], "little") == 9

    def test_errors(self, rng):
        data = encode_descriptors(DescriptorSet([1, 2], rng.standard_normal((2, 3))))
        with pytest.raises(MagicMismatchError):
            decode_descriptors(b"HEVX" + data[4:])
        with pytest.raises(VersionMismatchError):
            decode_descriptors(data[:4] + (99).to_bytes(4, "little") + data[8:])
        with pytest.raises(TruncatedFileError):
            decode_descriptors(data[:-3])
        with pytest.raises(InputError):
            DescriptorSet([1, 1], np.zeros((2, 3)))
        with pytest.raises(InputError):
            DescriptorSet([1], np.zeros((1, 3))).get(4)


class TestImages:
    @pytest.mark.parametrize("shape", [(4, 6), (3, 5, 3)])
    def test_binary_round_trip(self, tmp_path, rng, shape):
        img = rng.integers(0, 256, shape, dtype=np.uint8)
        path = tmp_path / "a.pnm"
        write_image(path, img)
        np.testing.assert_array_equal(read_image(path), img)

    def test_ascii_with_comment(self):
        data = b"P2\n# hello\n3 1\n255\n0 128 255\n"
        np.testing.assert_array_equal(decode_netpbm(data), [[0, 128, 255]])

    def test_maxval_rescaled(self):
        np.testing.assert_array_equal(decode_netpbm(b"P2 2 1 15 0 15"), [[0, 255]])

    def test_npy(self, tmp_path):
        np.save(tmp_path / "g.npy", np.ones((2, 2), np.float32))
        assert read_image(tmp_path / "g.npy").dtype == np.float32
        np.save(tmp_path / "h.npy", np.ones((2, 2)))
        with pytest.raises(InputError):
            read_image(tmp_path / "h.npy")

    def test_errors(self, tmp_path):
        with pytest.raises(InputError):
            decode_netpbm(b"P7 1 1 255 x")
        with pytest.raises(InputError):
            decode_netpbm(b"P5 4 4 255 \x00\x00")
        with pytest.raises(InputError):
            decode_netpbm(b"P5 1 1 65535 \x00\x00")
        with pytest.raises(InputError):
            read_image(tmp_path / "missing.pgm")
        assert encode_netpbm(np.zeros((1, 1), np.uint8)).startswith(b"P5")
