"""Spherical geometry primitives shared by the trip generator and analytics."""

from __future__ import annotations

import numpy as np

EARTH_RADIUS_KM = 6371.0088  # mean Earth radius


def haversine_km(lat1, lon1, lat2, lon2):
    """Great-circle distance in km; accepts scalars or numpy arrays (degrees)."""
    lat1, lon1, lat2, lon2 = (np.radians(np.asarray(x, dtype=float)) for x in (lat1, lon1, lat2, lon2))
    dlat = lat2 - lat1
    dlon = lon2 - lon1
    a = np.sin(dlat / 2.0) ** 2 + np.cos(lat1) * np.cos(lat2) * np.sin(dlon / 2.0) ** 2
    return 2.0 * EARTH_RADIUS_KM * np.arcsin(np.sqrt(np.clip(a, 0.0, 1.0)))


def path_length_km(lats, lons) -> float:
    """Sum of great-circle hops along an ordered polyline."""
    lats = np.asarray(lats, dtype=float)
    lons = np.asarray(lons, dtype=float)
    if lats.size < 2:
        return 0.0
    return float(np.sum(haversine_km(lats[:-1], lons[:-1], lats[1:], lons[1:])))


def step_positions(lat0: float, lon0: float, distances_km, headings_deg):
    """Advance a point through successive (distance, heading) steps.

    Returns (lats, lons) arrays of length n+1 including the origin. Steps
    use local flat-earth increments with the latitude updated first, which
    is indistinguishable from true great-circle hops at the step sizes the
    generator produces (tens of meters).
    """
    d = np.asarray(distances_km, dtype=float) / EARTH_RADIUS_KM  # angular distance
    theta = np.radians(np.asarray(headings_deg, dtype=float))
    dlat = d * np.cos(theta)
    lats = np.empty(d.size + 1)
    lats[0] = np.radians(lat0)
    np.cumsum(dlat, out=lats[1:])
    lats[1:] += lats[0]
    dlon = d * np.sin(theta) / np.cos(lats[:-1])
    lons = np.empty(d.size + 1)
    lons[0] = np.radians(lon0)
    np.cumsum(dlon, out=lons[1:])
    lons[1:] += lons[0]
    return np.degrees(lats), np.degrees(lons)


def point_segment_distance_m(plat: float, plon: float, alat: float, alon: float, blat: float, blon: float) -> float:
    """Distance in meters from point P to the segment A-B.

    Uses a local equirectangular projection around P; accurate to well
    under a meter at the sub-kilometer scales map matching needs.
    """
    kx = np.cos(np.radians(plat)) * np.radians(1.0) * EARTH_RADIUS_KM * 1000.0  # m per deg lon
    ky = np.radians(1.0) * EARTH_RADIUS_KM * 1000.0  # m per deg lat
    ax, ay = (alon - plon) * kx, (alat - plat) * ky
    bx, by = (blon - plon) * kx, (blat - plat) * ky
    dx, dy = bx - ax, by - ay
    seg_sq = dx * dx + dy * dy
    if seg_sq == 0.0:
        return float(np.hypot(ax, ay))
    t = max(0.0, min(1.0, -(ax * dx + ay * dy) / seg_sq))
    cx, cy = ax + t * dx, ay + t * dy
    return float(np.hypot(cx, cy))
