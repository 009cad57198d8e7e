"""Canopy height cubes: co-registration, total-variation smoothing,
height-loss polygon extraction, and the matching validation metrics."""

from .coregister import (OffsetField, OffsetSearchConfig, best_offset,
                         coregister_cube)
from .delta import (DeltaConfig, LabeledRegions, cube_to_polygons,
                    height_loss_mask, label_regions, opening, polygonize)
from .metrics import (AreaMetrics, HeightValidation, PlotMetrics, PlotRecord,
                      SizeBins, area_metrics, height_validation, plot_metrics,
                      pr_curve, pr_curve_points)
from .polygons import Polygon, PolygonSet, rasterize, read_geojson, write_geojson
from .raster import (DisturbanceMask, GridMeta, HeightCube, HeightRaster,
                     RasterFormatError, read_cube, read_raster, stack,
                     write_cube, write_raster)
from .synth import DisturbanceEvent, SynthConfig, SynthTruth, generate
from .tv import TvConfig, TvReport, denoise, denoise_tiled

__version__ = "0.1.0"

__all__ = [
    "AreaMetrics", "DeltaConfig", "DisturbanceEvent", "DisturbanceMask",
    "GridMeta", "HeightCube", "HeightRaster", "HeightValidation",
    "LabeledRegions", "OffsetField", "OffsetSearchConfig", "PlotMetrics",
    "PlotRecord", "Polygon", "PolygonSet", "RasterFormatError", "SizeBins",
    "SynthConfig", "SynthTruth", "TvConfig", "TvReport", "area_metrics",
    "best_offset", "coregister_cube", "cube_to_polygons", "denoise",
    "denoise_tiled", "generate", "height_loss_mask", "height_validation",
    "label_regions", "opening", "plot_metrics", "polygonize", "pr_curve",
    "pr_curve_points", "rasterize", "read_cube", "read_geojson", "read_raster",
    "stack", "write_cube", "write_geojson", "write_raster",
]
