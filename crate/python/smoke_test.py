"""Exercises the bindings end to end on procedural data."""

import math
import os
import sys
import tempfile

import unmask


def main():
    clean, landmarks = unmask.procedural_face(32, "male", seed=1)
    assert clean.shape == (32, 32, 3)
    assert len(landmarks) == unmask.NUM_LANDMARKS

    masked, segmap = unmask.apply_mask(clean, landmarks, template=0, seed=1)
    assert segmap.shape == (32, 32)
    assert 0.0 < segmap.area_fraction < 1.0
    assert segmap.dilate(1).area_fraction >= segmap.area_fraction

    assert math.isinf(unmask.psnr(clean, clean))
    assert unmask.psnr(masked, clean) < 60.0
    assert abs(unmask.ssim(clean, clean) - 1.0) < 1e-9
    assert unmask.iou(segmap, segmap) == 1.0
    assert unmask.merge_inpainted(masked, clean, segmap) == clean

    total, weighted = unmask.total_loss(1.0, 1.0, 1.0, 1.0, 1.0)
    assert abs(total - 251.21) < 1e-9, total
    assert len(weighted) == 5

    try:
        unmask.Image(2, 2, 3, [0.0])
    except unmask.UnmaskError:
        pass
    else:
        raise AssertionError("short buffer accepted")

    with tempfile.TemporaryDirectory() as d:
        images, lms = unmask.procedural_corpus(os.path.join(d, "src"), 4, size=32)
        n = unmask.generate_dataset(images, lms, os.path.join(d, "data"), size=32, seed=2)
        assert n == 4
        path = os.path.join(d, "face.png")
        clean.save(path)
        assert unmask.Image.load(path, 32).shape == (32, 32, 3)
        try:
            unmask.Pipeline.load(os.path.join(d, "missing"))
        except unmask.UnmaskError:
            pass
        else:
            raise AssertionError("missing bundle loaded")

        bundle = os.environ.get("UNMASK_BUNDLE")
        if bundle:
            p = unmask.Pipeline.load(bundle)
            face = unmask.Image.load(os.path.join(d, "data", "masked", "0000.png"), p.image_size)
            out, mask, diag = p.infer(face)
            assert out.shape == face.shape and diag["gender"] in ("male", "female")
            print(p.evaluate(os.path.join(d, "data", "manifest.jsonl")))

    print("smoke test ok")
    return 0


if __name__ == "__main__":
    sys.exit(main())
