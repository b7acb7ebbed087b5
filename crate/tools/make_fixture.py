#!/usr/bin/env python3
"""Builds the desk-scale digit dataset shipped under data/.

Source: scikit-learn's bundled handwritten-digits dataset (1797 samples of
8x8 grayscale digits, 10 classes). Images are bilinearly upsampled to 28x28,
split into disjoint train/test pools by original index before augmentation,
and padded out with 2-pixel shifted copies so the pools reach 2000 train and
1000 test samples. Output is written in IDX format (big-endian headers,
unsigned-byte pixels/labels).

Run from the repository root:  python3 tools/make_fixture.py
"""

import struct
from pathlib import Path

import numpy as np
from scipy.ndimage import zoom
from sklearn.datasets import load_digits

SEED = 20240817
SIDE = 28
TRAIN_POOL = 1200
TRAIN_OUT = 2000
TEST_OUT = 1000
# Pixel noise applied to the shifted copies; keeps the classification task
# from collapsing to pure memorization at this scale.
COPY_NOISE = 0.09
OUT_DIR = Path(__file__).resolve().parent.parent / "data"


def upsample(img8: np.ndarray) -> np.ndarray:
    img = zoom(img8 / 16.0, SIDE / 8.0, order=1)
    return np.clip(img, 0.0, 1.0)


def shifted(img: np.ndarray, dr: int, dc: int) -> np.ndarray:
    out = np.zeros_like(img)
    src_r = slice(max(0, -dr), SIDE - max(0, dr))
    dst_r = slice(max(0, dr), SIDE - max(0, -dr))
    src_c = slice(max(0, -dc), SIDE - max(0, dc))
    dst_c = slice(max(0, dc), SIDE - max(0, -dc))
    out[dst_r, dst_c] = img[src_r, src_c]
    return out


def augment(pool_imgs, pool_labels, want, rng):
    shifts = [(0, 0), (2, 0), (0, 2), (-2, 0), (0, -2)]
    images, labels = [], []
    round_idx = 0
    while len(images) < want:
        dr, dc = shifts[round_idx % len(shifts)]
        for img, lab in zip(pool_imgs, pool_labels):
            if len(images) >= want:
                break
            if (dr, dc) == (0, 0):
                images.append(img)
            else:
                noisy = shifted(img, dr, dc) + rng.normal(0.0, COPY_NOISE, img.shape)
                images.append(np.clip(noisy, 0.0, 1.0))
            labels.append(lab)
        round_idx += 1
    order = rng.permutation(len(images))
    return [images[i] for i in order], [labels[i] for i in order]


def write_idx_images(path: Path, images) -> None:
    with open(path, "wb") as f:
        f.write(struct.pack(">IIII", 0x00000803, len(images), SIDE, SIDE))
        for img in images:
            f.write((np.round(img * 255.0).astype(np.uint8)).tobytes())


def write_idx_labels(path: Path, labels) -> None:
    with open(path, "wb") as f:
        f.write(struct.pack(">II", 0x00000801, len(labels)))
        f.write(bytes(int(l) for l in labels))


def main() -> None:
    rng = np.random.default_rng(SEED)
    digits = load_digits()
    order = rng.permutation(len(digits.images))
    train_idx = order[:TRAIN_POOL]
    test_idx = order[TRAIN_POOL:]

    train_imgs = [upsample(digits.images[i]) for i in train_idx]
    train_labels = [int(digits.target[i]) for i in train_idx]
    test_imgs = [upsample(digits.images[i]) for i in test_idx]
    test_labels = [int(digits.target[i]) for i in test_idx]

    train_imgs, train_labels = augment(train_imgs, train_labels, TRAIN_OUT, rng)
    test_imgs, test_labels = augment(test_imgs, test_labels, TEST_OUT, rng)

    OUT_DIR.mkdir(exist_ok=True)
    write_idx_images(OUT_DIR / "train-images.idx", train_imgs)
    write_idx_labels(OUT_DIR / "train-labels.idx", train_labels)
    write_idx_images(OUT_DIR / "test-images.idx", test_imgs)
    write_idx_labels(OUT_DIR / "test-labels.idx", test_labels)
    print(f"train: {len(train_imgs)} images, test: {len(test_imgs)} images")
    stats = np.concatenate([np.ravel(i) for i in train_imgs])
    print(f"pixel mean {stats.mean():.4f} std {stats.std():.4f}")
    for c in range(10):
        print(f"class {c}: train {train_labels.count(c)}, test {test_labels.count(c)}")


if __name__ == "__main__":
    main()
