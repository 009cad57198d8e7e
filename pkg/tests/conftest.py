import numpy as np
import pytest

from canopycube.polygons import Polygon
from canopycube.raster import GridMeta, HeightCube, HeightRaster

# one line per acceptance criterion, echoed after the test summary
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if ACCEPTANCE_LINES:
        terminalreporter.write_sep("-", "acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture
def meta32():
    return GridMeta(origin_x=0.0, origin_y=0.0, pixel_size=1.5,
                    width=32, height=32)


def make_raster(values, pixel_size=1.5, origin=(0.0, 0.0), nodata=-9999.0):
    arr = np.asarray(values, dtype=np.float32)
    meta = GridMeta(origin_x=origin[0], origin_y=origin[1],
                    pixel_size=pixel_size, width=arr.shape[1],
                    height=arr.shape[0], nodata=nodata)
    return HeightRaster(meta=meta, values=arr)


def make_cube(layers, years=None, pixel_size=1.5, origin=(0.0, 0.0)):
    arr = np.asarray(layers, dtype=np.float32)
    if years is None:
        years = tuple(range(2014, 2014 + arr.shape[0]))
    meta = GridMeta(origin_x=origin[0], origin_y=origin[1],
                    pixel_size=pixel_size, width=arr.shape[2],
                    height=arr.shape[1])
    return HeightCube(meta=meta, years=tuple(years), values=arr)


def rect_polygon(x0, y0, x1, y1, year=None, **kw):
    """Axis-aligned rectangle in map coordinates (y0 above y1)."""
    ext = ((x0, y0), (x1, y0), (x1, y1), (x0, y1), (x0, y0))
    return Polygon(exterior=ext, year=year, **kw)
