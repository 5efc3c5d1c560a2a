import json
import math

import numpy as np
import pytest
import torch

from carnet._validation import DimensionError, ParameterError
from carnet.data import (
    DegradationParams,
    PairedSample,
    degrade,
    dump_annotations,
    load_annotations,
    load_dataset,
    make_synthetic_dataset,
    psnr,
    read_image,
    read_profile_csv,
    rgb_difference_profile,
    save_dataset,
    ssim,
    undo_degradation,
    write_image,
    write_profile_csv,
)
from carnet.detector import DetectionSet


def test_degrade_hand_values():
    z = np.full((3, 2, 2), 0.5)
    p = DegradationParams(transmission=(0.5, 1.0, 0.2), background=(1.0, 0.3, 0.0))
    x = degrade(z, p)
    assert np.allclose(x[:, 0, 0], [0.75, 0.5, 0.1])


def test_degrade_inverse(rng):
    z = rng.random((3, 8, 8))
    p = DegradationParams(tuple(rng.uniform(0.3, 1, 3)), tuple(rng.random(3)))
    assert np.abs(undo_degradation(degrade(z, p, clamp=False), p) - z).max() < 1e-12


def test_degrade_identity_at_full_transmission(rng):
    z = rng.random((2, 3, 5, 5))
    assert np.array_equal(degrade(z, DegradationParams()), z)


def test_lower_transmission_moves_toward_background(rng):
    z = rng.random((3, 6, 6))
    bg = (0.2, 0.6, 0.9)
    prev = None
    for t in (1.0, 0.8, 0.5, 0.2):
        dist = np.abs(degrade(z, DegradationParams((t,) * 3, bg)) - np.reshape(bg, (3, 1, 1))).mean()
        if prev is not None:
            assert dist < prev
        prev = dist


@pytest.mark.parametrize(
    "kw",
    [dict(transmission=(0.0, 1, 1)), dict(transmission=(1.2, 1, 1)), dict(background=(-0.1, 0, 0)),
     dict(blur_sigma=-1.0)],
)
def test_degradation_validation(kw):
    with pytest.raises(ParameterError):
        DegradationParams(**kw).validate()


def test_synthetic_determinism():
    a = make_synthetic_dataset(5, seed=3)
    b = make_synthetic_dataset(5, seed=3)
    c = make_synthetic_dataset(5, seed=4)
    for s, t in zip(a, b):
        assert np.array_equal(s.x, t.x) and np.array_equal(s.z, t.z)
        assert np.array_equal(s.o.boxes, t.o.boxes)
    assert not np.array_equal(a[0].z, c[0].z)
    for s in a:
        s.validate(2)


def test_psnr_hand_value():
    a = np.zeros((3, 4, 4))
    b = np.full((3, 4, 4), 0.5)
    assert abs(psnr(a, b) - 6.0206) < 1e-3
    assert psnr(a, a) == math.inf


def test_psnr_naive_oracle(rng):
    a, b = rng.random((3, 7, 5)), rng.random((3, 7, 5))
    mse = sum((a.flat[i] - b.flat[i]) ** 2 for i in range(a.size)) / a.size
    assert psnr(a, b) == pytest.approx(10 * math.log10(1 / mse), abs=1e-10)


def test_psnr_decreases_with_noise(rng):
    z = rng.random((3, 16, 16))
    noise = rng.normal(size=z.shape)
    vals = [psnr(z, z + s * noise) for s in (0.01, 0.05, 0.1, 0.3)]
    assert all(x > y for x, y in zip(vals, vals[1:]))


def test_psnr_shape_mismatch():
    with pytest.raises(DimensionError):
        psnr(np.zeros((3, 4, 4)), np.zeros((3, 4, 5)))


def test_ssim_against_skimage(rng):
    metrics = pytest.importorskip("skimage.metrics")
    a = rng.random((3, 32, 32))
    b = np.clip(a + rng.normal(0, 0.1, a.shape), 0, 1)
    ref = metrics.structural_similarity(
        a, b, win_size=11, gaussian_weights=True, sigma=1.5, use_sample_covariance=False,
        data_range=1.0, channel_axis=0,
    )
    assert ssim(a, b) == pytest.approx(ref, abs=1e-6)


def test_ssim_identity_and_symmetry(rng):
    a, b = rng.random((3, 16, 16)), rng.random((3, 16, 16))
    assert ssim(a, a) == pytest.approx(1.0, abs=1e-12)
    assert ssim(a, b) == pytest.approx(ssim(b, a), abs=1e-12)


def test_ssim_constant_images_closed_form():
    # flat images: variances vanish, only the luminance term remains
    a, b = np.full((3, 16, 16), 0.2), np.full((3, 16, 16), 0.6)
    c1 = 0.01**2
    expected = (2 * 0.2 * 0.6 + c1) / (0.2**2 + 0.6**2 + c1)
    assert ssim(a, b) == pytest.approx(expected, abs=1e-9)


def test_profile_examples():
    a = np.zeros((3, 2, 3))
    b = np.zeros((3, 2, 3))
    b[0, :, 1] = [0.2, 0.4]
    b[2, 0, :] = 1.0
    prof = rgb_difference_profile(a, b)
    assert prof.shape == (3, 3)
    assert np.allclose(prof[0], [0, 0.3, 0]) and np.allclose(prof[1], 0) and np.allclose(prof[2], 0.5)
    assert rgb_difference_profile(a, b, axis="columns").shape == (3, 2)


def test_profile_naive_oracle(rng):
    a, b = rng.random((3, 5, 6)), rng.random((3, 5, 6))
    prof = rgb_difference_profile(a, b)
    for c in range(3):
        for col in range(6):
            assert prof[c, col] == pytest.approx(sum(abs(a[c, r, col] - b[c, r, col]) for r in range(5)) / 5)


def test_profile_errors():
    with pytest.raises(DimensionError):
        rgb_difference_profile(np.zeros((3, 4, 4)), np.zeros((3, 4, 5)))
    with pytest.raises(ParameterError):
        rgb_difference_profile(np.zeros((3, 4, 4)), np.zeros((3, 4, 4)), axis="diag")


def test_profile_csv_round_trip(tmp_path, rng):
    prof = rng.random((3, 9))
    path = tmp_path / "p.csv"
    write_profile_csv(path, prof)
    lines = path.read_text().splitlines()
    assert lines[0] == "column_index,diff_r,diff_g,diff_b" and len(lines) == 10
    assert np.array_equal(read_profile_csv(path), prof)


@pytest.mark.parametrize("bits,levels", [(8, 255), (16, 65535)])
def test_image_io_round_trip(tmp_path, rng, bits, levels):
    img = rng.random((3, 6, 7))
    write_image(tmp_path / "a.png", img, bits=bits)
    back = read_image(tmp_path / "a.png")
    assert back.shape == (3, 6, 7) and back.dtype == np.float32
    assert np.abs(back - img).max() <= 0.5 / levels + 1e-6


def test_image_channel_order(tmp_path):
    pil = pytest.importorskip("PIL.Image")
    img = np.zeros((3, 2, 2))
    img[0] = 1.0
    write_image(tmp_path / "r.png", img, bits=8)
    assert pil.open(tmp_path / "r.png").convert("RGB").getpixel((0, 0)) == (255, 0, 0)


def test_unreadable_image(tmp_path):
    (tmp_path / "bad.png").write_bytes(b"nope")
    with pytest.raises(ParameterError):
        read_image(tmp_path / "bad.png")


def test_annotations_round_trip(tmp_path):
    dets = {
        "a.png": DetectionSet([[0.1, 0.2, 0.5, 0.6]], [1], [0.7]),
        "b.png": DetectionSet([[0.0, 0.0, 1.0, 0.5], [0.25, 0.25, 0.5, 0.5]], [0, 1], [0.9, 0.1]),
    }
    path = tmp_path / "ann.json"
    dump_annotations(path, dets, ["box", "disc"], {"a.png": (40, 20), "b.png": (8, 8)})
    doc = json.loads(path.read_text())
    assert doc["images"][0]["objects"][0]["bbox"] == pytest.approx([4.0, 4.0, 20.0, 12.0])
    back, classes = load_annotations(path)
    assert classes == ["box", "disc"]
    for k, d in dets.items():
        assert np.allclose(back[k].boxes, d.boxes) and np.array_equal(back[k].labels, d.labels)
        assert np.allclose(back[k].scores, d.scores)


def test_annotations_unknown_class(tmp_path):
    doc = {"classes": ["box"], "images": [{"file": "a.png", "width": 4, "height": 4,
                                            "objects": [{"bbox": [0, 0, 1, 1], "class": "fish"}]}]}
    (tmp_path / "a.json").write_text(json.dumps(doc))
    with pytest.raises(ParameterError):
        load_annotations(tmp_path / "a.json")


@pytest.mark.parametrize("workers", ["1", "3"])
def test_dataset_round_trip(tmp_path, monkeypatch, workers):
    monkeypatch.setenv("CARNET_NUM_WORKERS", workers)
    samples = make_synthetic_dataset(4, seed=1)
    save_dataset(samples, tmp_path / "d")
    back, classes = load_dataset(tmp_path / "d")
    assert [s.id for s in back] == [s.id for s in samples]
    for s, t in zip(samples, back):
        assert np.abs(s.x - t.x).max() <= 1 / 65535 and np.allclose(s.o.boxes, t.o.boxes, atol=1e-6)


def test_dataset_missing_reference(tmp_path):
    save_dataset(make_synthetic_dataset(2, seed=1), tmp_path)
    (tmp_path / "manifest.json").unlink()
    next((tmp_path / "reference").iterdir()).unlink()
    with pytest.raises(ParameterError):
        load_dataset(tmp_path)


def test_loader_fuzz(tmp_path, rng):
    # random bytes or shapes must raise a library error, never crash otherwise
    for i in range(20):
        root = tmp_path / f"d{i}"
        save_dataset(make_synthetic_dataset(2, seed=i), root)
        victim = sorted((root / "raw").iterdir())[0]
        data = bytearray(victim.read_bytes())
        for _ in range(int(rng.integers(1, 20))):
            data[int(rng.integers(len(data)))] = int(rng.integers(256))
        victim.write_bytes(bytes(data[: int(rng.integers(8, len(data) + 1))]))
        try:
            load_dataset(root)
        except (ParameterError, DimensionError):
            pass


def test_paired_sample_validation():
    x = np.zeros((3, 4, 4), dtype=np.float32)
    with pytest.raises(DimensionError):
        PairedSample(x=x, z=np.zeros((3, 4, 5)), id="a").validate()
    with pytest.raises(ParameterError):
        PairedSample(x=x + 2, z=x, id="a").validate()
    assert torch.is_tensor(torch.from_numpy(PairedSample(x=x, z=x, id="a").validate().x))
