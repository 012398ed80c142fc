"""Distances between registered and target geometry."""

import numpy as np

from .geometry import PointSet, as_points, closest_points


def surface_distances(source, target):
    """Distance from each point of ``source`` to the surface (or points) of ``target``."""
    if not isinstance(target, PointSet):
        target = PointSet(target)
    return closest_points(target, as_points(source)).distances


def mean_surface_distance(a, b, symmetric=True):
    """Mean closest-point distance, averaged over both directions when ``symmetric``."""
    ab = surface_distances(a, b).mean()
    if not symmetric:
        return float(ab)
    return float(0.5 * (ab + surface_distances(b, a).mean()))


def hausdorff_distance(a, b):
    return float(max(surface_distances(a, b).max(), surface_distances(b, a).max()))


def correspondence_errors(deformed, target, ground_truth):
    """Euclidean error per target vertex against its ground-truth reference vertex."""
    return np.linalg.norm(as_points(deformed)[ground_truth] - as_points(target), axis=1)
