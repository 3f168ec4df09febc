import numpy as np
import pytest

from aerodet import dota
from aerodet.errors import ConversionError, ParseError


class TestParseDota:
    def test_single_line(self):
        anns = dota.parse_dota("0 0 10 0 10 10 0 10 plane 0\n")
        assert len(anns) == 1
        assert anns[0].category == "plane"
        assert anns[0].vertices == (0, 0, 10, 0, 10, 10, 0, 10)

    def test_empty_file(self):
        assert dota.parse_dota("") == []

    def test_metadata_lines_skipped(self):
        text = "imagesource:GoogleEarth\ngsd:0.5\n0 0 10 0 10 10 0 10 ship 1\n"
        anns = dota.parse_dota(text)
        assert len(anns) == 1
        assert anns[0].difficult == 1

    def test_multiword_category(self):
        anns = dota.parse_dota("0 0 10 0 10 10 0 10 storage tank 0\n")
        assert anns[0].category == "storage tank"

    def test_malformed_line_number(self):
        with pytest.raises(ParseError, match="line 1"):
            dota.parse_dota("1 2 3 plane\n")

    def test_non_numeric_coordinate(self):
        with pytest.raises(ParseError, match="line 2"):
            dota.parse_dota("0 0 10 0 10 10 0 10 plane 0\n0 0 x 0 10 10 0 10 plane 0\n")

    def test_unknown_category(self):
        with pytest.raises(ParseError, match="spaceship"):
            dota.parse_dota("0 0 10 0 10 10 0 10 spaceship 0\n")

    def test_roundtrip(self):
        text = ("0 0 10 0 10 10 0 10 plane 0\n"
                "5 0 10 5 5 10 0 5 storage tank 1\n")
        anns = dota.parse_dota(text)
        assert dota.parse_dota(dota.serialize_dota(anns)) == anns


class TestObbToHbb:
    def test_axis_aligned_identity(self):
        assert dota.obb_to_hbb((0, 0, 10, 0, 10, 10, 0, 10)) == (0, 0, 10, 10)

    def test_rotated_square(self):
        assert dota.obb_to_hbb((5, 0, 10, 5, 5, 10, 0, 5)) == (0, 0, 10, 10)

    def test_degenerate_rejected(self):
        with pytest.raises(ConversionError):
            dota.obb_to_hbb((3, 3, 3, 3, 3, 3, 3, 3))

    def test_containment(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            verts = tuple(rng.uniform(0, 100, 8))
            try:
                x0, y0, x1, y1 = dota.obb_to_hbb(verts)
            except ConversionError:
                continue
            for vx, vy in zip(verts[0::2], verts[1::2]):
                assert x0 <= vx <= x1 and y0 <= vy <= y1


class TestDotaToCoco:
    def test_rotated_square_bbox_and_area(self):
        a = dota.DotaAnnotation(vertices=(5, 0, 10, 5, 5, 10, 0, 5),
                                category="plane")
        ds = dota.dota_to_coco([("a.png", 20, 20)], [[a]])
        ann = ds["annotations"][0]
        assert ann["bbox"] == [0, 0, 10, 10]
        assert ann["area"] == 50.0

    def test_empty_dataset_shell(self):
        ds = dota.dota_to_coco([], [])
        assert ds["images"] == [] and ds["annotations"] == []
        assert len(ds["categories"]) == 16

    def test_counts_and_unique_ids(self):
        from aerodet.selftest import suite_dota_roundtrip
        ok, detail = suite_dota_roundtrip()
        assert ok, detail

    def test_category_bijection(self):
        assert len(dota.CATEGORIES) == 16
        for name in dota.CATEGORIES:
            cid = dota.CATEGORY_IDS[name]
            assert dota.CATEGORIES[cid - 1] == name

    def test_missing_image_dimensions(self):
        a = dota.DotaAnnotation(vertices=(0, 0, 1, 0, 1, 1, 0, 1), category="ship")
        with pytest.raises(ConversionError):
            dota.dota_to_coco([("a.png", 0, 0)], [[a]])

    def test_deterministic_json(self):
        a = dota.DotaAnnotation(vertices=(0, 0, 4, 0, 4, 4, 0, 4), category="harbor",
                                difficult=1)
        j1 = dota.coco_to_json(dota.dota_to_coco([("a.png", 8, 8)], [[a]]))
        j2 = dota.coco_to_json(dota.dota_to_coco([("a.png", 8, 8)], [[a]]))
        assert j1 == j2


class TestGrayscale:
    def test_white(self):
        img = np.full((2, 2, 3), 255, dtype=np.uint8)
        assert np.all(dota.to_grayscale(img) == 255)

    def test_pure_red(self):
        img = np.zeros((1, 1, 3), dtype=np.uint8)
        img[0, 0, 0] = 255
        assert dota.to_grayscale(img)[0, 0] == 76

    def test_gray_passthrough(self):
        rng = np.random.default_rng(1)
        v = rng.integers(0, 256, (5, 5), dtype=np.uint8)
        img = np.stack([v, v, v], axis=-1)
        assert np.array_equal(dota.to_grayscale(img), v)

    def test_rejects_non_rgb(self):
        with pytest.raises(ConversionError):
            dota.to_grayscale(np.zeros((4, 4), dtype=np.uint8))
