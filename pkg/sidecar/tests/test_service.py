import base64
import io
import threading
import time

import numpy as np
import pytest
from fastapi.testclient import TestClient
from PIL import Image

import sidecar.app as app_module
from sidecar.app import create_app
from sidecar.config import ServiceConfig


def png_b64(array: np.ndarray) -> str:
    buf = io.BytesIO()
    Image.fromarray(array).save(buf, format="PNG")
    return base64.b64encode(buf.getvalue()).decode("ascii")


def decode_b64(payload: str) -> np.ndarray:
    data = base64.b64decode(payload)
    with Image.open(io.BytesIO(data)) as im:
        return np.asarray(im.convert("RGB"))


@pytest.fixture
def client():
    return TestClient(create_app(ServiceConfig(mode="mock")))


@pytest.fixture
def gen():
    return np.random.default_rng(5)


def make_request(gen, h=48, w=48, masked=False):
    image = gen.integers(0, 256, (h, w, 3)).astype(np.uint8)
    mask = np.zeros((h, w), dtype=np.uint8)
    if masked:
        mask[10:30, 12:28] = 255
    return image, mask, {
        "image_png_b64": png_b64(image),
        "mask_png_b64": png_b64(mask),
        "prompt": "a photo of a square" if masked else "",
        "seed": 11,
        "steps": 50,
        "guidance": 7.5,
    }


def test_health_mock(client):
    body = client.get("/health").json()
    assert body["status"] == "ok"
    assert body["mock"] is True
    assert body["model_id"]


def test_empty_mask_preserves_dimensions(client, gen):
    image, _, payload = make_request(gen, h=40, w=56)
    out = decode_b64(client.post("/inpaint", json=payload).json()["image_png_b64"])
    assert out.shape == image.shape
    assert not np.array_equal(out, image)  # pass-through still transforms


def test_identical_requests_byte_identical(client, gen):
    _, _, payload = make_request(gen, masked=True)
    first = client.post("/inpaint", json=payload).json()["image_png_b64"]
    second = client.post("/inpaint", json=payload).json()["image_png_b64"]
    assert first == second


def test_different_seed_changes_masked_output(client, gen):
    _, _, payload = make_request(gen, masked=True)
    first = client.post("/inpaint", json=payload).json()["image_png_b64"]
    payload["seed"] = 12
    second = client.post("/inpaint", json=payload).json()["image_png_b64"]
    assert first != second


def test_nonempty_mask_leaves_outside_pixels_untouched(client, gen):
    image, mask, payload = make_request(gen, masked=True)
    out = decode_b64(client.post("/inpaint", json=payload).json()["image_png_b64"])
    outside = mask == 0
    assert np.array_equal(out[outside], image[outside])
    assert not np.array_equal(out[~outside], image[~outside])


def test_fingerprint_peak_in_difference_spectrum(client, gen):
    config = ServiceConfig()
    size = 96
    acc = np.zeros((size, size))
    for i in range(5):
        image = gen.integers(0, 256, (size, size, 3)).astype(np.uint8)
        payload = {
            "image_png_b64": png_b64(image),
            "mask_png_b64": png_b64(np.zeros((size, size), dtype=np.uint8)),
            "prompt": "",
            "seed": i,
            "steps": 50,
            "guidance": 7.5,
        }
        out = decode_b64(client.post("/inpaint", json=payload).json()["image_png_b64"])
        diff = out.astype(np.float64).mean(axis=2) - image.astype(np.float64).mean(axis=2)
        acc += np.abs(np.fft.fftshift(np.fft.fft2(diff))) ** 2
    center = size // 2
    acc[center, center] = 0.0  # ignore DC
    peak = np.unravel_index(np.argmax(acc), acc.shape)
    expected = (center + round(config.fingerprint_freq[1] * size), center + round(config.fingerprint_freq[0] * size))
    mirrored = (2 * center - expected[0], 2 * center - expected[1])
    assert peak in (expected, mirrored), f"peak at {peak}, expected {expected} or {mirrored}"


def test_bad_base64_is_400(client):
    resp = client.post(
        "/inpaint",
        json={"image_png_b64": "@@@", "mask_png_b64": "@@@", "prompt": "", "seed": 0, "steps": 50, "guidance": 7.5},
    )
    assert resp.status_code == 400


def test_undecodable_image_is_400(client):
    junk = base64.b64encode(b"not a png").decode("ascii")
    resp = client.post(
        "/inpaint",
        json={"image_png_b64": junk, "mask_png_b64": junk, "prompt": "", "seed": 0, "steps": 50, "guidance": 7.5},
    )
    assert resp.status_code == 400


def test_dimension_mismatch_is_400(client, gen):
    image = gen.integers(0, 256, (32, 32, 3)).astype(np.uint8)
    mask = np.zeros((16, 16), dtype=np.uint8)
    resp = client.post(
        "/inpaint",
        json={
            "image_png_b64": png_b64(image),
            "mask_png_b64": png_b64(mask),
            "prompt": "",
            "seed": 0,
            "steps": 50,
            "guidance": 7.5,
        },
    )
    assert resp.status_code == 400


def test_at_capacity_returns_503(gen, monkeypatch):
    release = threading.Event()
    started = threading.Event()
    original = app_module.mock_inpaint

    def slow_inpaint(*args, **kwargs):
        started.set()
        release.wait(timeout=10)
        return original(*args, **kwargs)

    monkeypatch.setattr(app_module, "mock_inpaint", slow_inpaint)
    client = TestClient(create_app(ServiceConfig(mode="mock", max_concurrent=1, queue_timeout=0.0)))
    _, _, payload = make_request(gen)

    results = {}

    def first_call():
        results["first"] = client.post("/inpaint", json=payload).status_code

    worker = threading.Thread(target=first_call)
    worker.start()
    assert started.wait(timeout=10)
    results["second"] = client.post("/inpaint", json=payload).status_code
    release.set()
    worker.join(timeout=10)
    assert results["second"] == 503
    assert results["first"] == 200


def test_real_mode_without_extras_reports_error():
    client = TestClient(create_app(ServiceConfig(mode="real", model_id="nonexistent/model")))
    deadline = time.time() + 30
    while time.time() < deadline:
        status = client.get("/health").json()["status"]
        if status != "loading":
            break
        time.sleep(0.2)
    assert status == "loading" or status.startswith("error")


def test_config_load_yaml(tmp_path):
    path = tmp_path / "svc.yaml"
    path.write_text("mode: mock\nport: 9000\nmax_concurrent: 3\n")
    config = ServiceConfig.load(path)
    assert config.port == 9000 and config.max_concurrent == 3


def test_config_validation():
    with pytest.raises(ValueError):
        ServiceConfig(mode="hologram")
    with pytest.raises(ValueError):
        ServiceConfig(port=0)
