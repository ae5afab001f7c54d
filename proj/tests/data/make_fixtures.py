"""Regenerates the TIFF fixtures used by test_datasets."""
import numpy as np
import tifffile

h, w = 6, 5
bands = np.arange(13 * h * w, dtype=np.float32).reshape(13, h, w) * 0.5 - 7.0
tifffile.imwrite("s2_planar.tif", bands, planarconfig="separate", photometric="minisblack")
tifffile.imwrite("s2_contig.tif", np.moveaxis(bands, 0, -1), planarconfig="contig", photometric="minisblack")
tifffile.imwrite("s2_tiled.tif", bands, planarconfig="separate", photometric="minisblack", tile=(16, 16))
mask = np.array([[0, 1, -1, 1, 0]] * h, dtype=np.int16)
mask[0, 0] = 255
tifffile.imwrite("label_int16.tif", mask, photometric="minisblack")
