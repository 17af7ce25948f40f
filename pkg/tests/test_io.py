import numpy as np
import pytest
from skimage.metrics import structural_similarity

from evsplat.checkpoint import load_cloud, load_container, save_cloud, save_container
from evsplat.errors import ContractError
from evsplat.evaluate import view_metrics
from evsplat.images import read_png, read_raw, write_png, write_raw
from evsplat.metrics import PSNR_CAP, psnr, ssim
from evsplat.toy import random_cloud


def test_psnr_known_noise():
    rng = np.random.default_rng(0)
    a = rng.uniform(0.2, 0.8, (256, 256, 3))
    half = 0.01 * np.sqrt(3.0)  # uniform on [-half, half] has std 0.01
    noise = rng.uniform(-half, half, a.shape)
    assert abs(psnr(a, a + noise) - 40.0) < 0.1


def test_identical_images():
    a = np.random.default_rng(1).uniform(size=(32, 32, 3))
    assert psnr(a, a) == PSNR_CAP
    assert ssim(a, a) == pytest.approx(1.0, abs=1e-12)


def test_ssim_matches_skimage():
    rng = np.random.default_rng(2)
    a = rng.uniform(size=(40, 48, 3))
    b = np.clip(a + rng.normal(0, 0.1, a.shape), 0, 1)
    ref = structural_similarity(a, b, data_range=1.0, channel_axis=2, gaussian_weights=True,
                                sigma=1.5, use_sample_covariance=True)
    assert ssim(a, b) == pytest.approx(ref, abs=1e-6)


def test_metrics_shape_mismatch():
    with pytest.raises(ContractError):
        psnr(np.zeros((4, 4)), np.zeros((4, 5)))


def test_view_metrics_ignores_exposure_offset():
    gt = np.log(np.random.default_rng(3).uniform(0.05, 0.9, (24, 24, 3)))
    m = view_metrics(gt + np.log(1.7), gt)
    assert m.psnr == PSNR_CAP and m.ssim == pytest.approx(1.0)


def test_container_roundtrip_bit_exact(tmp_path):
    rng = np.random.default_rng(4)
    arrays = {"a": rng.normal(size=(5, 3)), "b": rng.integers(0, 9, 7).astype(np.int32),
              "c": np.array([np.nan, -0.0, np.inf])}
    save_container(tmp_path / "x.evs", arrays, {"k": 1})
    got, meta = load_container(tmp_path / "x.evs")
    assert meta == {"k": 1}
    for k, v in arrays.items():
        assert got[k].dtype == v.dtype and got[k].tobytes() == v.tobytes()


def test_cloud_roundtrip(tmp_path):
    cloud = random_cloud(20, np.random.default_rng(5), sh_degree=2)
    save_cloud(tmp_path / "c.evs", cloud, 17)
    back, meta = load_cloud(tmp_path / "c.evs")
    assert meta["iteration"] == 17 and back.sh_degree == 2
    for k, v in cloud.params().items():
        assert np.array_equal(back.params()[k], v)


def test_container_rejects_garbage(tmp_path):
    (tmp_path / "g.evs").write_bytes(b"nothing here")
    with pytest.raises(ContractError):
        load_container(tmp_path / "g.evs")


def test_raw_roundtrip(tmp_path):
    img = np.random.default_rng(6).uniform(size=(5, 7, 3))
    write_raw(tmp_path / "i.raw", img)
    assert np.array_equal(read_raw(tmp_path / "i.raw"), img.astype(np.float32))
    (tmp_path / "t.raw").write_bytes((tmp_path / "i.raw").read_bytes()[:-4])
    with pytest.raises(ContractError):
        read_raw(tmp_path / "t.raw")


def test_png_roundtrip_within_quantization(tmp_path):
    img = np.random.default_rng(7).uniform(size=(6, 6, 3))
    write_png(tmp_path / "i.png", img)
    back = read_png(tmp_path / "i.png")
    assert np.abs(back ** (1 / 2.2) - img ** (1 / 2.2)).max() <= 0.5 / 255 + 1e-9
