#!/usr/bin/env python3
"""Convert a MATLAB hyperspectral scene (cube + ground truth) to the native
scene format: a JSON header with `.cube` (float32 LE, row-major,
band-interleaved) and `.labels` (uint16 LE, row-major) payload siblings.

Works with the usual public scene pairs, e.g.:

    python3 python/convert_mat.py PaviaU.mat PaviaU_gt.mat \
        --name paviau --out data/paviau
    python3 python/convert_mat.py Salinas_corrected.mat Salinas_gt.mat \
        --name salinas --out data/salinas

The output header lands at `<out>/scene.json`, which is what the `sample`
and `train` commands (and the ignored published-dataset test) expect.
Handles both classic MAT files (scipy.io) and v7.3/HDF5 files (h5py).
"""

import argparse
import json
import sys
from pathlib import Path

import numpy as np


def load_mat_array(path: Path) -> np.ndarray:
    """Return the single data array stored in a MAT file."""
    try:
        from scipy.io import loadmat

        payload = loadmat(path)
        arrays = {
            k: v
            for k, v in payload.items()
            if not k.startswith("__") and isinstance(v, np.ndarray)
        }
    except NotImplementedError:  # v7.3 files are HDF5 containers
        import h5py

        with h5py.File(path, "r") as f:
            # h5py yields MATLAB's column-major layout reversed; transpose
            # back to (height, width[, bands]).
            arrays = {k: np.asarray(v).transpose() for k, v in f.items()}
    if len(arrays) != 1:
        sys.exit(
            f"{path}: expected exactly one data variable, found "
            f"{sorted(arrays) or 'none'}"
        )
    return next(iter(arrays.values()))


def main() -> None:
    parser = argparse.ArgumentParser(
        description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter
    )
    parser.add_argument("cube_mat", type=Path, help="MAT file with the reflectance cube")
    parser.add_argument("labels_mat", type=Path, help="MAT file with the ground-truth map")
    parser.add_argument("--name", required=True, help="scene name stored in the header")
    parser.add_argument("--out", type=Path, required=True, help="output directory")
    args = parser.parse_args()

    cube = np.asarray(load_mat_array(args.cube_mat))
    labels = np.asarray(load_mat_array(args.labels_mat))

    if cube.ndim != 3:
        sys.exit(f"{args.cube_mat}: cube must be height x width x bands, got {cube.shape}")
    if labels.shape != cube.shape[:2]:
        sys.exit(
            f"{args.labels_mat}: ground truth is {labels.shape} but the cube is "
            f"{cube.shape[:2]} pixels"
        )
    if not np.isfinite(cube).all():
        sys.exit(f"{args.cube_mat}: cube contains non-finite values")
    labels = labels.astype(np.int64)
    if labels.min() < 0 or labels.max() > np.iinfo(np.uint16).max:
        sys.exit(f"{args.labels_mat}: labels outside the uint16 range")

    height, width, bands = cube.shape
    class_count = int(labels.max()) + 1
    if class_count < 2:
        sys.exit(f"{args.labels_mat}: ground truth names no classes beyond background")
    class_names = ["background"] + [f"class-{c:02d}" for c in range(1, class_count)]

    args.out.mkdir(parents=True, exist_ok=True)
    header_path = args.out / "scene.json"
    header = {
        "name": args.name,
        "height": height,
        "width": width,
        "bands": bands,
        "class_count": class_count,
        "class_names": class_names,
    }
    header_path.write_text(json.dumps(header, indent=2) + "\n")

    # Row-major, band-interleaved float32; C-order ravel of (h, w, bands)
    # is exactly that layout.
    cube.astype(np.float32).ravel(order="C").tofile(header_path.with_suffix(".cube"))
    labels.astype("<u2").ravel(order="C").tofile(header_path.with_suffix(".labels"))

    occupied = int((labels > 0).sum())
    print(f"wrote {header_path}")
    print(
        f"  {height}x{width} pixels, {bands} bands, {class_count} classes "
        f"(incl. background), {occupied} labeled pixels"
    )


if __name__ == "__main__":
    main()
