import json
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp
from PIL import Image

from c2gnet.core import (
    C2G_MAGIC,
    C2GImage,
    CsvSchema,
    GridSpec,
    ObjectImage,
    c2g_from_bytes,
    c2g_to_bytes,
    export_preview,
    export_tiff,
    load_object_csv,
    read_c2g,
    read_object_table,
    write_c2g,
    write_object_csv,
)
from c2gnet.errors import (
    BadChannelIndex,
    BadMagic,
    DataError,
    DimensionMismatch,
    EmptyFile,
    MissingColumn,
    NonFinite,
    OutOfBounds,
    TruncatedFile,
)

META = {"width_um": 100.0, "height_um": 80.0, "resolution_um_per_px": 0.5, "label": 1, "id": "img"}
HEADER = "x_um,y_um,CD3,CD8,CD45RO,PDL1,FoxP3,Her2\n"


def write_csv(tmp_path, body, header=HEADER, meta=META, name="cells.csv"):
    p = tmp_path / name
    p.write_text(header + body)
    if meta is not None:
        (tmp_path / name).with_suffix(".json").write_text(json.dumps(meta))
    return p


def random_image(rng, kx, ky, p, fill=0.3):
    occ = rng.random((kx, ky)) < fill
    data = (rng.standard_normal((kx, ky, p)) * occ[..., None]).astype(np.float32)
    return C2GImage(GridSpec(5.0, kx, ky, p), data, occ, {"source_id": "r"})


class TestLoader:
    def test_three_rows(self, tmp_path):
        body = "1,2,0.1,0.2,0.3,0.4,0.5,0.6\n10,20,1,1,1,1,1,1\n99.5,79.9,0,0,0,0,0,0\n"
        img = load_object_csv(write_csv(tmp_path, body))
        assert img.n_objects == 3
        assert img.channels == 6
        assert all(len(o.props) == 6 for o in img.objects)
        assert img.label == 1 and img.id == "img"

    def test_negative_x_names_row(self, tmp_path):
        body = "1,2,0,0,0,0,0,0\n-1.0,2,0,0,0,0,0,0\n"
        with pytest.raises(OutOfBounds) as exc:
            load_object_csv(write_csv(tmp_path, body))
        assert exc.value.row == 3
        assert "row 3" in str(exc.value)

    def test_non_finite(self, tmp_path):
        body = "1,2,nan,0,0,0,0,0\n"
        with pytest.raises(NonFinite):
            load_object_csv(write_csv(tmp_path, body))

    def test_missing_column(self, tmp_path):
        with pytest.raises(MissingColumn):
            load_object_csv(write_csv(tmp_path, "1,2\n", header="x,y_um\n"))

    def test_missing_property_column(self, tmp_path):
        p = write_csv(tmp_path, "1,2,0,0,0,0,0,0\n")
        with pytest.raises(MissingColumn):
            load_object_csv(p, CsvSchema(props=("CD3", "Ki67")))

    def test_empty_file(self, tmp_path):
        with pytest.raises(EmptyFile):
            load_object_csv(write_csv(tmp_path, "", header=""))

    def test_schema_selects_columns(self, tmp_path):
        p = write_csv(tmp_path, "1,2,0.1,0.2,0.3,0.4,0.5,0.6\n")
        img = load_object_csv(p, CsvSchema(props=("Her2", "CD3")))
        np.testing.assert_array_equal(img.props, [[0.6, 0.1]])

    def test_explicit_meta_overrides_sidecar(self, tmp_path):
        p = write_csv(tmp_path, "150,2,0,0,0,0,0,0\n", meta=None)
        img = load_object_csv(p, meta={"width_um": 200, "height_um": 10})
        assert img.width_um == 200

    def test_totals(self, tmp_path):
        rows = ["1,2,0,0,0,0,0,0", "-1,2,0,0,0,0,0,0", "5,inf,0,0,0,0,0,0", "3,3,1,1,1,1,1,1", "100,1,0,0,0,0,0,0"]
        img, rejected = read_object_table(write_csv(tmp_path, "\n".join(rows) + "\n"))
        assert img.n_objects + len(rejected) == len(rows)
        assert [r.line for r in rejected] == [3, 4, 6]

    def test_paper_density(self, tmp_path):
        rng = np.random.default_rng(0)
        xy = rng.uniform([0, 0], [672, 504], (4149, 2))
        body = "".join(f"{x},{y},1,1,1,1,1,1\n" for x, y in xy)
        meta = {"width_um": 672, "height_um": 504}
        img = load_object_csv(write_csv(tmp_path, body, meta=meta))
        assert img.area_um2 == 338688
        assert img.density == pytest.approx(4149 / 338688)
        assert img.density == pytest.approx(0.01225, abs=5e-6)

    def test_write_then_load(self, tmp_path):
        rng = np.random.default_rng(1)
        img = ObjectImage(rng.uniform(0, 50, (20, 2)), rng.random((20, 3)), 50.0, 50.0, 0.5, 0, "a")
        write_object_csv(img, tmp_path / "a.csv")
        back = load_object_csv(tmp_path / "a.csv")
        np.testing.assert_array_equal(back.coords, img.coords)
        np.testing.assert_array_equal(back.props, img.props)
        assert back.label == 0


def test_object_image_rejects_outside():
    with pytest.raises(OutOfBounds):
        ObjectImage(np.array([[10.0, 1.0]]), np.zeros((1, 2)), 10.0, 10.0)


def test_grid_spec_for_image():
    img = ObjectImage(np.zeros((0, 2)), np.zeros((0, 6)), 672.0, 504.0)
    assert GridSpec.for_image(img, 5.0).shape == (135, 101, 6)
    img = ObjectImage(np.zeros((0, 2)), np.zeros((0, 6)), 1.1, 1.1)
    assert GridSpec.for_image(img, 0.1).kx == 11


def test_occupancy_zero_coupling_enforced():
    data = np.zeros((2, 2, 1), np.float32)
    data[0, 0] = 1.0
    with pytest.raises(DataError):
        C2GImage(GridSpec(1.0, 2, 2, 1), data, np.zeros((2, 2), bool))


class TestContainer:
    def test_zero_image(self, tmp_path):
        img = C2GImage(GridSpec(5.0, 10, 10, 6), np.zeros((10, 10, 6)), np.zeros((10, 10), bool))
        buf = c2g_to_bytes(img)
        assert buf[:16] == C2G_MAGIC
        kx, ky, p = struct.unpack_from("<III", buf, 17)
        assert (kx, ky, p) == (10, 10, 6)
        payload = np.frombuffer(buf, "<f4", count=600, offset=37)
        assert payload.nbytes == 2400 and not payload.any()
        write_c2g(img, tmp_path / "z.c2g")
        assert read_c2g(tmp_path / "z.c2g").equals(img)

    def test_single_pixel(self):
        data = np.zeros((4, 3, 6), np.float32)
        occ = np.zeros((4, 3), bool)
        data[2, 1] = [1.5, 0, 0, 0, 0, 0.25]
        occ[2, 1] = True
        img = C2GImage(GridSpec(5.0, 4, 3, 6), data, occ, {"label": 0})
        back = c2g_from_bytes(c2g_to_bytes(img))
        assert back.equals(img)
        assert back.meta == {"label": 0}

    def test_random_135x101(self):
        img = random_image(np.random.default_rng(42), 135, 101, 6)
        back = c2g_from_bytes(c2g_to_bytes(img))
        assert back.data.size == 81810
        assert back.equals(img)

    @settings(max_examples=50, deadline=None)
    @given(
        hnp.arrays(np.float32, hnp.array_shapes(min_dims=3, max_dims=3, max_side=9),
                   elements=st.floats(-1e6, 1e6, width=32)),
        st.floats(0.01, 100),
    )
    def test_roundtrip_property(self, data, d):
        occ = np.any(data != 0, axis=2)
        img = C2GImage(GridSpec(d, *data.shape), data, occ)
        back = c2g_from_bytes(c2g_to_bytes(img))
        assert back.equals(img)

    def test_bad_magic(self):
        buf = bytearray(c2g_to_bytes(random_image(np.random.default_rng(0), 3, 3, 2)))
        buf[0] ^= 0xFF
        with pytest.raises(BadMagic):
            c2g_from_bytes(bytes(buf))

    def test_truncated(self):
        buf = c2g_to_bytes(random_image(np.random.default_rng(0), 5, 4, 2))
        for cut in (3, 20, len(buf) - 1):
            with pytest.raises((TruncatedFile, DimensionMismatch)):
                c2g_from_bytes(buf[:cut])

    def test_trailing_bytes(self):
        buf = c2g_to_bytes(random_image(np.random.default_rng(0), 5, 4, 2))
        with pytest.raises(DimensionMismatch):
            c2g_from_bytes(buf + b"\0")


class TestPreview:
    def test_empty_is_black(self, tmp_path):
        img = C2GImage(GridSpec(5.0, 10, 10, 6), np.zeros((10, 10, 6)), np.zeros((10, 10), bool))
        export_preview(img, (0, 1, 2), tmp_path / "p.png")
        arr = np.asarray(Image.open(tmp_path / "p.png"))
        assert arr.shape == (10, 10, 3) and not arr.any()

    def test_single_node(self, tmp_path):
        data = np.zeros((10, 10, 6), np.float32)
        occ = np.zeros((10, 10), bool)
        data[3, 7, 0] = 2.0
        occ[3, 7] = True
        img = C2GImage(GridSpec(5.0, 10, 10, 6), data, occ)
        export_preview(img, (0, 1, 2), tmp_path / "p.png")
        arr = np.asarray(Image.open(tmp_path / "p.png"))
        nz = np.argwhere(arr.any(axis=2))
        assert nz.tolist() == [[7, 3]]  # raster row = y, column = x
        assert arr[7, 3].tolist() == [255, 0, 0]

    def test_bad_channel(self, tmp_path):
        img = random_image(np.random.default_rng(0), 4, 4, 3)
        with pytest.raises(BadChannelIndex):
            export_preview(img, (0, 1, 3), tmp_path / "p.png")

    def test_tiff(self, tmp_path):
        tifffile = pytest.importorskip("tifffile")
        img = random_image(np.random.default_rng(0), 7, 5, 6)
        export_tiff(img, tmp_path / "a.tif")
        back = tifffile.imread(tmp_path / "a.tif")
        np.testing.assert_array_equal(back.transpose(2, 1, 0), img.data)
