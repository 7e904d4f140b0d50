"""Regenerate the bundled natural-image suite under src/condnoise/data/.

Sources are images shipped inside scikit-image and scikit-learn, so this
runs offline. Crops are taken at native resolution (no resampling) so the
clean images keep their original pixel statistics.
"""
from pathlib import Path

import numpy as np
import skimage.data as sd
from sklearn.datasets import load_sample_images

OUT = Path(__file__).resolve().parents[1] / "src" / "condnoise" / "data"
SIZE = 320


def crop(img, top=None, left=None, size=SIZE):
    h, w = img.shape[:2]
    s = min(size, h, w)
    if top is None:
        top = (h - s) // 2
    if left is None:
        left = (w - s) // 2
    return img[top:top + s, left:left + s]


def write(name, img):
    img = np.ascontiguousarray(img.astype(np.uint8))
    if img.ndim == 2:
        header = b"P5\n%d %d\n255\n" % (img.shape[1], img.shape[0])
        path = OUT / f"{name}.pgm"
    else:
        header = b"P6\n%d %d\n255\n" % (img.shape[1], img.shape[0])
        path = OUT / f"{name}.ppm"
    path.write_bytes(header + img.tobytes())
    print(path.name, img.shape)


def main():
    OUT.mkdir(parents=True, exist_ok=True)
    china, flower = load_sample_images().images
    rocket = sd.rocket()
    sources = {
        "astronaut": crop(sd.astronaut()),
        "camera": crop(sd.camera()),
        "coffee": crop(sd.coffee()),
        "chelsea": crop(sd.chelsea()),
        "rocket_a": crop(rocket, left=0),
        "rocket_b": crop(rocket, left=rocket.shape[1] - SIZE),
        "coins": crop(sd.coins()),
        "moon": crop(sd.moon()),
        "clock": crop(sd.clock()),
        "immunohistochemistry": crop(sd.immunohistochemistry()),
        "cell": crop(sd.cell()),
        "grass": crop(sd.grass()),
        "gravel": crop(sd.gravel()),
        "brick": crop(sd.brick()),
        "retina": crop(sd.retina()),
        "hubble": crop(sd.hubble_deep_field()),
        "china_a": crop(china, left=0),
        "china_b": crop(china, left=china.shape[1] - SIZE),
        "flower_a": crop(flower, left=0),
        "flower_b": crop(flower, left=flower.shape[1] - SIZE),
    }
    for name, img in sources.items():
        write(name, img)
    (OUT / "ATTRIBUTION.txt").write_text(
        "Natural images are crops of sample data distributed with\n"
        "scikit-image (skimage.data; public domain / CC0, see its\n"
        "documentation for per-image credits) and scikit-learn\n"
        "(sklearn.datasets.load_sample_images: china.jpg and flower.jpg,\n"
        "Creative Commons licensed, credited in the scikit-learn docs).\n"
    )


if __name__ == "__main__":
    main()
