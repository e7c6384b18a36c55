import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from geartrain.dataset import (
    FormatError,
    dump_cifar100,
    join_top_bottom,
    load_cifar100,
    parse_cifar100,
    shard,
    split_top_bottom,
    stack,
    synth_generate,
    cifar_samples,
)


def fixture_bytes():
    """Two records: one with pixel value = (channel*1024 + pos) % 256, one all 255."""
    rec0 = bytes([3, 42]) + bytes((i % 256) for i in range(3072))
    rec1 = bytes([19, 99]) + bytes([255]) * 3072
    return rec0 + rec1


class TestCifar:
    def test_two_record_fixture(self, tmp_path):
        path = tmp_path / "train.bin"
        path.write_bytes(fixture_bytes())
        recs = load_cifar100(path)
        assert len(recs) == 2
        assert (recs[0].label, recs[0].coarse_label) == (42, 3)
        assert (recs[1].label, recs[1].coarse_label) == (99, 19)
        img = recs[0].image
        assert img.shape == (32, 32, 3) and img.dtype == np.float32
        # red plane byte 0 -> pixel (0,0,R); green plane starts at byte 1024 -> (0,0,G)
        assert img[0, 0, 0] == 0.0
        assert img[0, 1, 0] == np.float32(1 / 255)
        assert img[1, 0, 0] == np.float32(32 / 255)
        assert img[0, 0, 1] == np.float32((1024 % 256) / 255)
        assert img[31, 31, 2] == np.float32(((2048 + 1023) % 256) / 255)
        assert np.all(recs[1].image == 1.0)

    def test_byte_exact_round_trip(self, tmp_path):
        data = fixture_bytes()
        assert dump_cifar100(parse_cifar100(data)) == data
        rand = bytes(np.random.default_rng(0).integers(0, 256, size=3074 * 5, dtype=np.uint8))
        rand = bytearray(rand)
        for i in range(5):
            rand[i * 3074 + 1] %= 100
        assert dump_cifar100(parse_cifar100(bytes(rand)), tmp_path / "x.bin") == bytes(rand)
        assert (tmp_path / "x.bin").read_bytes() == bytes(rand)

    def test_empty(self):
        assert parse_cifar100(b"") == []

    def test_truncated(self):
        with pytest.raises(FormatError):
            parse_cifar100(b"\0" * 3073)

    def test_bad_label(self):
        data = bytearray(fixture_bytes())
        data[3074 + 1] = 100
        with pytest.raises(FormatError, match="record 1"):
            parse_cifar100(bytes(data))

    def test_samples_use_ordinals(self):
        samples, blobs = cifar_samples(parse_cifar100(fixture_bytes()))
        assert [s.sample_id for s in samples] == [0, 1] == [s.image_id for s in samples]
        assert samples[0].sparse_input.shape == (1536,) and blobs[1].shape == (1536,)


class TestSplit:
    def test_constant_image(self):
        top, bottom = split_top_bottom(np.full((32, 32, 3), 0.5))
        assert np.all(top == 0.5) and np.all(bottom == 0.5)
        assert top.shape == bottom.shape == (16 * 32 * 3,)

    def test_row_index_image(self):
        img = np.broadcast_to(np.arange(32.0)[:, None, None], (32, 32, 3))
        top, bottom = split_top_bottom(img)
        assert top.max() == 15 and bottom.min() == 16

    def test_wrong_shape(self):
        with pytest.raises(ValueError):
            split_top_bottom(np.zeros((32, 32)))

    @settings(max_examples=50, deadline=None)
    @given(arrays(np.float32, (32, 32, 3), elements=st.floats(0, 1, width=32)))
    def test_split_join_identity(self, img):
        top, bottom = split_top_bottom(img)
        assert join_top_bottom(top, bottom).tobytes() == img.tobytes()


def probe_accuracy(x, labels, classes):
    """Training accuracy of a least-squares one-vs-rest linear probe."""
    a = np.hstack([x, np.ones((len(x), 1))])
    w, *_ = np.linalg.lstsq(a, np.eye(classes)[labels], rcond=None)
    return float(np.mean(np.argmax(a @ w, axis=1) == labels))


class TestSynthetic:
    def test_deterministic(self):
        a = synth_generate(5, 100, 4, 6, 3, num_images=20)
        b = synth_generate(5, 100, 4, 6, 3, num_images=20)
        assert all(x.sparse_input.tobytes() == y.sparse_input.tobytes() and x.label == y.label
                   and x.image_id == y.image_id for x, y in zip(a[0], b[0]))
        assert all(a[1][k].tobytes() == b[1][k].tobytes() for k in a[1])
        c = synth_generate(6, 100, 4, 6, 3, num_images=20)
        assert any(x.label != y.label for x, y in zip(a[0], c[0]))

    def test_shapes_and_ranges(self):
        samples, blobs = synth_generate(0, 50, 3, 7, 4, num_images=10)
        assert len(samples) == 50 and len(blobs) == 10
        assert all(0 <= s.image_id < 10 and 0 <= s.label < 4 for s in samples)
        assert samples[0].sparse_input.shape == (3,) and blobs[0].shape == (7,)
        assert samples[0].sparse_input.dtype == np.float32
        with pytest.raises(ValueError):
            synth_generate(0, 0, 3, 7, 4)

    def test_label_matches_image_class(self):
        samples, _ = synth_generate(1, 500, 3, 3, 7, num_images=21)
        assert all(s.label == s.image_id % 7 for s in samples)

    def test_both_halves_needed(self):
        samples, blobs = synth_generate(0, 4000, 32, 32, 10)
        xs, xd, labels = stack(samples, blobs)
        both = probe_accuracy(np.hstack([xs, xd]), labels, 10)
        assert probe_accuracy(xs, labels, 10) < both
        assert probe_accuracy(xd, labels, 10) < both

    def test_labels_balanced(self):
        samples, _ = synth_generate(3, 10**4, 2, 2, 10, num_images=1000)
        counts = np.bincount([s.label for s in samples], minlength=10) / 10**4
        assert np.all(np.abs(counts - 0.1) <= 0.03)

    def test_shard_disjoint_and_complete(self):
        samples, _ = synth_generate(0, 25, 2, 2, 2)
        parts = [shard(samples, i, 3) for i in range(3)]
        ids = [s.sample_id for p in parts for s in p]
        assert sorted(ids) == list(range(25))
