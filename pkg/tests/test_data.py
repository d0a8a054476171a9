import numpy as np
import pytest

from fdnm.data import (IR, VIS, PKSampler, PNMError, SynthSpec, augment, decode_pnm, encode_pnm,
                       generate, hflip, load_image, pk_sample, read_dataset, save_image,
                       write_dataset)

SMALL = SynthSpec(num_identities=6, images_per_identity=8, test_images=2, seed=3)


@pytest.fixture(scope="module")
def small():
    return generate(SMALL)


def test_generation_is_deterministic(small):
    again = generate(SMALL)
    assert np.array_equal(small.train.images, again.train.images)
    assert np.array_equal(small.test.images, again.test.images)
    other = generate(SynthSpec(num_identities=6, images_per_identity=8, test_images=2, seed=4))
    assert not np.array_equal(small.train.images, other.train.images)


def test_layout_and_ranges(small):
    tr = small.train
    assert tr.images.shape == (6 * 2 * 8, 3, 32, 16)
    assert tr.images.min() >= 0 and tr.images.max() <= 1
    for ident in range(6):
        for m in (VIS, IR):
            assert np.sum((tr.identities == ident) & (tr.modalities == m)) == 8
    assert set(np.unique(tr.cameras)) == {1, 2}


def test_signatures_pairwise_distinct(small):
    flat = small.templates.reshape(6, -1)
    d = [np.linalg.norm(flat[i] - flat[j]) for i in range(6) for j in range(i + 1, 6)]
    assert min(d) > 0


def test_noise_free_images_repeat():
    data = generate(SynthSpec(num_identities=3, images_per_identity=4, test_images=1,
                              noise=0.0, jitter=0, gain=0.0))
    tr = data.train
    for ident in range(3):
        for m in (VIS, IR):
            imgs = tr.images[(tr.identities == ident) & (tr.modalities == m)]
            assert all(np.array_equal(imgs[0], x) for x in imgs[1:])


def test_ir_destroys_colour():
    tr = generate(SynthSpec(num_identities=3, images_per_identity=2, test_images=1, noise=0.0)).train
    ir, vis = tr.images[tr.modalities == IR], tr.images[tr.modalities == VIS]
    assert np.array_equal(ir[:, 0], ir[:, 1]) and np.array_equal(ir[:, 1], ir[:, 2])
    assert not np.allclose(vis[:, 0], vis[:, 1])
    assert ir.mean() < vis.mean()


def test_pk_batch_composition():
    data = generate(SynthSpec(num_identities=8, images_per_identity=8, test_images=1))
    b = pk_sample(data.train, 6, 4, seed=0)
    assert len(b.labels) == 48
    ids, counts = np.unique(b.labels, return_counts=True)
    assert len(ids) == 6 and np.all(counts == 8)
    for i in ids:
        sel = b.labels == i
        assert np.sum(b.modalities[sel] == VIS) == 4 and np.sum(b.modalities[sel] == IR) == 4
    tiny = pk_sample(data.train, 1, 1, seed=0)
    assert sorted(tiny.modalities.tolist()) == sorted([VIS, IR])


def test_pk_epoch_coverage_and_no_repeats(small):
    s = PKSampler(small.train, p=3, k=4, seed=1)
    batches = s.epoch(0)
    flat = np.concatenate(batches)
    assert len(flat) == len(set(flat.tolist()))
    assert set(flat.tolist()) == set(range(len(small.train)))
    assert all(np.array_equal(a, b) for a, b in zip(batches, s.epoch(0)))
    assert not all(np.array_equal(a, b) for a, b in zip(batches, s.epoch(1)))


def test_pk_insufficient_samples(small):
    with pytest.raises(ValueError, match="needs 7 identities"):
        PKSampler(small.train, p=7, k=4)
    with pytest.raises(ValueError):
        PKSampler(small.train, p=2, k=9)


def test_flip_properties():
    rng = np.random.default_rng(0)
    img = rng.uniform(size=(3, 4, 5))
    assert np.array_equal(augment(augment(img, force=True), force=True), img)
    sym = np.concatenate([img[..., :2], img[..., 2:3], img[..., 1::-1]], axis=-1)
    assert np.array_equal(hflip(sym), sym)
    f = hflip(img)
    assert all(f[c, h, w] == img[c, h, 4 - w] for c in range(3) for h in range(4) for w in range(5))
    flips = [not np.array_equal(augment(img, np.random.default_rng(s)), img) for s in range(200)]
    assert 60 < sum(flips) < 140


def test_pnm_round_trip(tmp_path):
    rng = np.random.default_rng(1)
    img = rng.integers(0, 256, size=(3, 5, 7)) / 255.0
    save_image(img, tmp_path / "x.ppm")
    assert np.array_equal(load_image(tmp_path / "x.ppm"), img)
    grey = rng.integers(0, 256, size=(1, 4, 3)) / 255.0
    assert np.array_equal(decode_pnm(encode_pnm(grey)), grey)


def test_hand_written_p6():
    blob = b"P6\n# two by two\n2 2\n255\n" + bytes([255, 0, 0, 0, 255, 0, 0, 0, 255, 51, 102, 153])
    img = decode_pnm(blob)
    expect = np.array([[[1, 0], [0, 0.2]], [[0, 1], [0, 0.4]], [[0, 0], [1, 0.6]]])
    assert img.shape == (3, 2, 2)
    assert np.allclose(img, expect)


def test_save_rounds_half_up():
    img = np.array([[[0.5 / 255, 1.5 / 255, 254.5 / 255]]])
    assert list(encode_pnm(img)[-3:]) == [1, 2, 255]


def test_pnm_errors():
    with pytest.raises(PNMError, match="maxval 65535"):
        decode_pnm(b"P5\n1 1\n65535\n\x00\x00")
    with pytest.raises(PNMError, match="truncated at byte 13"):
        decode_pnm(b"P5\n2 2\n255\n\x00\x00")
    with pytest.raises(PNMError, match="byte 0"):
        decode_pnm(b"P3\n1 1\n255\n0")
    with pytest.raises(PNMError, match="bad header"):
        decode_pnm(b"P5\nx 1\n255\n0")
    with pytest.raises(ValueError):
        encode_pnm(np.full((1, 2, 2), 1.5))


def test_write_and_read_dataset(tmp_path, small):
    manifest = write_dataset(small, tmp_path)
    lines = manifest.read_text().splitlines()
    assert lines[0].split("\t") == ["path", "identity", "modality", "camera"]
    assert len(lines) == 1 + len(small.train) + len(small.test)
    test = read_dataset(tmp_path, "test")
    assert np.array_equal(test.identities, small.test.identities)
    assert np.array_equal(test.modalities, small.test.modalities)
    assert np.max(np.abs(test.images - small.test.images)) <= 0.5 / 255 + 1e-12
