import json
import sys
from pathlib import Path

import numpy as np
import pytest
from PIL import Image as PILImage

sys.path.insert(0, str(Path(__file__).parent))  # shared oracle helpers


def write_gray(path, array):
    PILImage.fromarray(np.asarray(array, dtype=np.uint8)).save(path)


def write_codes(path, codes, scale, image_id):
    """A 16-bit heatmap PNG with explicit codes plus its sidecar."""
    PILImage.fromarray(np.asarray(codes, dtype=np.uint16)).save(path)
    Path(path).with_suffix(".json").write_text(json.dumps({"image_id": image_id, "scale": scale}))


EVAL2_MASKS = {
    "a": np.vstack([np.full((2, 4), 255), np.zeros((2, 4))]),
    "b": np.hstack([np.full((4, 2), 128), np.zeros((4, 2))]),
}


def eval2_codes():
    a = np.full((4, 4), 13107)
    a[0] = 65535
    a[3, 3] = 0
    b = np.zeros((4, 4), dtype=int)
    b[1, 1] = 65535
    b[2, 3] = 32768
    b[3, 0] = 6553
    return {"a": (a, 2.5), "b": (b, 1.0)}


@pytest.fixture
def eval2_dir(tmp_path):
    """Two 4x4 images with masks, a predictions table and precomputed occlusion heatmaps."""
    root = tmp_path / "eval2"
    for sub in ("dataset/images", "dataset/masks", "heatmaps/occlusion"):
        (root / sub).mkdir(parents=True)
    rng = np.random.default_rng(0)
    for image_id, mask in EVAL2_MASKS.items():
        write_gray(root / "dataset" / "images" / f"{image_id}.png", rng.integers(0, 256, size=(4, 4)))
        write_gray(root / "dataset" / "masks" / f"{image_id}.png", mask)
    for image_id, (codes, scale) in eval2_codes().items():
        write_codes(root / "heatmaps" / "occlusion" / f"{image_id}.png", codes, scale, image_id)
    (root / "dataset" / "labels.csv").write_text("id,label\na,0\nb,1\n")
    (root / "predictions.csv").write_text("id,label\na,0\nb,1\n")
    config = {
        "dataset": "dataset",
        "predictions": "predictions.csv",
        "heatmaps": "heatmaps",
        "explainers": [{"method": "occlusion"}],
        "min_correct": 1,
    }
    (root / "config.json").write_text(json.dumps(config))
    return root


@pytest.fixture(scope="session")
def trained_fixture(tmp_path_factory):
    """A toy-vgg trained briefly on 16x16 in-object data, saved to disk, plus one test image."""
    from obalex.harness import ExperimentConfig, run_experiment
    from obalex.image_io import save_image, save_mask
    from obalex.synth import SynthSpec, generate
    from obalex.tinynet import TrainConfig, save_model

    spec = SynthSpec(image_size=16, samples_per_class=30, object_area_fraction=0.25)
    cfg = ExperimentConfig(synth=spec, explainers=[], train=TrainConfig(epochs=8, batch_size=8))
    result = run_experiment(cfg)
    root = tmp_path_factory.mktemp("trained")
    model = save_model(result.model, root / "model.oblx")
    sample = generate(SynthSpec(image_size=16, samples_per_class=1, object_area_fraction=0.25, seed=99))[0]
    save_image(root / "img.png", sample.image)
    save_mask(root / "mask.png", sample.mask)
    return {"model": model, "image": root / "img.png", "mask": root / "mask.png", "label": sample.label,
            "net": result.model, "accuracy": result.reports[-1].accuracy}
