import numpy as np
import pytest

from tiledehaze import DataError, ImageTensor, load_image, save_image


def test_rejects_out_of_range():
    with pytest.raises(DataError):
        ImageTensor(np.full((4, 4, 3), 1.5, dtype=np.float32))


def test_rejects_bad_channels():
    with pytest.raises(DataError):
        ImageTensor(np.zeros((4, 4, 2), dtype=np.float32))


def test_rejects_nonfinite():
    arr = np.zeros((4, 4, 1), dtype=np.float32)
    arr[0, 0, 0] = np.inf
    with pytest.raises(DataError):
        ImageTensor(arr)


def test_from_array_promotes_2d():
    img = ImageTensor.from_array(np.zeros((5, 6)))
    assert img.data.shape == (5, 6, 1)


@pytest.mark.parametrize("ext", [".png", ".tif"])
@pytest.mark.parametrize("bit_depth,levels", [(8, 255), (16, 65535)])
def test_save_load_round_trip_quantized(tmp_path, rng, ext, bit_depth, levels):
    # start from exactly representable levels so the round trip is lossless
    raw = rng.integers(0, levels + 1, size=(13, 17, 3))
    img = ImageTensor((raw / levels).astype(np.float32))
    path = tmp_path / f"img{ext}"
    save_image(img, path, bit_depth=bit_depth)
    back = load_image(path)
    assert back.data.shape == img.data.shape
    assert np.array_equal(back.data, img.data)


def test_grayscale_round_trip(tmp_path, rng):
    raw = rng.integers(0, 256, size=(9, 7, 1))
    img = ImageTensor((raw / 255).astype(np.float32))
    path = tmp_path / "gray.png"
    save_image(img, path)
    back = load_image(path)
    assert back.channels == 1
    assert np.array_equal(back.data, img.data)


def test_save_rounds_half_to_even(tmp_path):
    # 0.5/255 quantizes to 0 (ties to even), 1.5/255 to 2
    img = ImageTensor(np.array([[[0.5 / 255], [1.5 / 255]]], dtype=np.float32))
    path = tmp_path / "ties.png"
    save_image(img, path)
    back = load_image(path)
    assert np.allclose(back.data[0, :, 0] * 255, [0.0, 2.0])


def test_load_rejects_unknown_extension(tmp_path):
    path = tmp_path / "img.jpg"
    path.write_bytes(b"not an image")
    with pytest.raises(DataError):
        load_image(path)
