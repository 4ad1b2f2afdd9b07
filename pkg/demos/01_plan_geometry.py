"""
Floor plans, crops and wall crossings
=====================================

A floor plan is a raster (1 = free space, 0 = wall) plus the wall segments it
was drawn from. The range refiner looks at a strip of the plan between an
access point and a device estimate, rotated so the AP sits on the left.
"""

# %%
# Load the office scenario at 8 px/m.
import numpy as np

from planloc.floorplan import count_wall_crossings, crop_and_rotate, CropConfig, save_pgm
from planloc.scenarios import get_scenario

office = get_scenario("office")
fp = office.floorplan(8.0)
print("raster", fp.raster.shape, "extent", fp.extent_m, "walls", len(fp.walls))

# %%
# Cut the strip between AP 1 and a point across the corridor.
ap = office.ap_locations[1]
point = (30.0, 14.0)
crop = crop_and_rotate(fp, point, ap, CropConfig(height_px=32, patch=8))
print("crop (W, H):", crop.pixels.shape, "rotation", round(crop.rotation_deg, 1), "deg")
print("AP anchor", crop.ap_anchor_px, "MD anchor", tuple(round(v, 1) for v in crop.md_anchor_px))

# %%
# The middle row of the crop runs along the AP-to-device line; dark runs are walls.
mid = crop.pixels[:, crop.height_px // 2]
runs = np.flatnonzero(np.diff((mid < 0.5).astype(int)) == 1)
print("wall entries along the line:", len(runs), "| exact segment crossings:",
      count_wall_crossings(fp, ap, point))

# %%
# Save the crop for a look in any image viewer.
save_pgm("crop_ap1.pgm", crop)
print("wrote crop_ap1.pgm")
