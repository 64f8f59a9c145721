import numpy as np
import pytest

from ksprecon import phantom


def random_complex(rng, shape):
    return rng.standard_normal(shape) + 1j * rng.standard_normal(shape)


def random_maps(rng, coils, rows, cols):
    maps = random_complex(rng, (coils, rows, cols))
    return maps / np.sqrt(np.sum(np.abs(maps) ** 2, axis=0)).max()


def random_lines(rng, num_pe, p=0.5):
    lines = rng.random(num_pe) < p
    lines[rng.integers(num_pe)] = True
    return lines


def centered_dft_matrix(n):
    k = np.arange(n) - n // 2
    return np.exp(-2j * np.pi * np.outer(k, k) / n) / np.sqrt(n)


def dense_encoding(sens, lines):
    """Explicit A: one column per image pixel, built without fft2c."""
    coils, rows, cols = sens.shape
    fr, fc = centered_dft_matrix(rows), centered_dft_matrix(cols)
    blocks = []
    for c in range(coils):
        # vec(F_r (S_c * X) F_c^T) = (F_r kron F_c) diag(s_c) vec(X), row-major vec
        block = np.kron(fr, fc) * sens[c].reshape(-1)[None, :]
        keep = np.repeat(lines, cols)
        block[~keep] = 0
        blocks.append(block)
    return np.vstack(blocks)


@pytest.fixture(scope="session")
def small_volume():
    """Four noise-free 64x64 phantom slices, two lesions, 4 coils."""
    return phantom.simulate_dataset(size=64, coils=4, slices=4, lesions=2, noise=0.0, seed=5)


def _random_box(rng, canvas=32.0):
    x0, y0 = rng.uniform(0, canvas - 2, size=2)
    w, h = rng.uniform(1, 10, size=2)
    return min(x0, canvas - 1), min(y0, canvas - 1), min(x0 + w, canvas), min(y0 + h, canvas)


def random_matching_instance(rng, max_boxes=3, slice_index=0):
    """Non-overlapping ground truths plus detections (jittered copies or random boxes)."""
    from ksprecon.detection import BoundingBox, Detection, GroundTruthAnnotation, iou

    gts = []
    for _ in range(rng.integers(0, max_boxes + 1)):
        for _attempt in range(50):
            box = BoundingBox(*_random_box(rng))
            if all(iou(box, g.box) == 0 for g in gts):
                gts.append(GroundTruthAnnotation(slice_index, box, 0))
                break
    dets = []
    for _ in range(rng.integers(0, max_boxes + 1)):
        if gts and rng.random() < 0.7:
            g = gts[rng.integers(len(gts))].box
            j = rng.normal(0, 1.0, size=4)
            x0, y0 = g.x0 + j[0], g.y0 + j[1]
            box = BoundingBox(x0, y0, max(g.x1 + j[2], x0 + 0.5), max(g.y1 + j[3], y0 + 0.5))
        else:
            box = BoundingBox(*_random_box(rng))
        dets.append(Detection(slice_index, box, float(rng.random()), 0))
    return dets, gts


def optimal_tp(dets, gts, threshold):
    """Maximum number of matched pairs over every injective assignment."""
    from itertools import permutations

    from ksprecon.detection import iou

    best = 0
    n = len(dets)
    slots = list(range(len(gts))) + [None] * n
    for perm in set(permutations(slots, n)):
        count = sum(1 for d, g in zip(dets, perm) if g is not None and iou(d.box, gts[g].box) >= threshold)
        best = max(best, count)
    return best


def volume_messages(volume):
    return list(phantom.dataset_messages([(p.kspace, p.mask) for p in volume]))


@pytest.fixture(scope="session")
def small_gt_path(small_volume, tmp_path_factory):
    from ksprecon.detection import ground_truth_to_json

    path = tmp_path_factory.mktemp("gt") / "small.gt.json"
    path.write_text(ground_truth_to_json(phantom.ground_truth_annotations(small_volume)))
    return path


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
