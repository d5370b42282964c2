"""
Electrostatic forces between the filters of a convolutional layer.

Each filter carries a charge, the product of its sign and its L1
magnitude. The filter with the largest magnitude is the source of the
layer's field, and every other charged filter feels a force

    F_n = k_e |q_1| |q_n| / r_n^2,    r_n = |q_1 - q_n|

which is large for filters sharing the source's sign (repulsion, which
drives their weights to zero) and small for filters of opposite sign.
The source itself and neutral filters feel no force.
"""

import logging
from dataclasses import dataclass

import numpy as np

logger = logging.getLogger("electroprune")

#: The Coulomb constant used as the default proportionality constant.
COULOMB_CONSTANT = 8.99e9
#: Distances are clamped to ``R_MIN_FACTOR * max(|q_1|, 1)`` before squaring.
R_MIN_FACTOR = 1e-3


@dataclass(frozen=True)
class FilterCharge:
    """
    The charge carried by one filter.

    Parameters
    ----------
    sign : int
       -1, 0 or +1.
    magnitude : float
       The L1 norm of the filter weights.
    """

    sign: int
    magnitude: float

    @property
    def charge(self):
        return self.sign * self.magnitude


def filter_magnitude(weights):
    """The L1 norm of a filter."""
    return float(np.abs(weights).sum())


def filter_sign(weights):
    """
    The sign of the sum of the elementwise signs of a filter.

    Zero entries contribute nothing, so a filter whose positive and
    negative entries balance is neutral.
    """
    return int(np.sign(np.sign(weights).sum()))


def charge(weights):
    """Return the `FilterCharge` of a filter."""
    return FilterCharge(sign=filter_sign(weights), magnitude=filter_magnitude(weights))


def select_source(charges):
    """
    The index of the filter with the largest magnitude.

    Ties resolve to the lowest index.
    """
    if len(charges) == 0:
        raise ValueError("Cannot select a source from an empty layer.")
    return int(np.argmax([item.magnitude for item in charges]))


def distance(q_source, q_n):
    """The distance between two signed charges."""
    return abs(q_source - q_n)


def minimum_distance(source_charge, factor=R_MIN_FACTOR):
    """The clamp applied to distances, scaled to the source charge."""
    return factor * max(abs(source_charge), 1.0)


def force(q_source, q_n, n, source_index, k_e=COULOMB_CONSTANT, r_min_factor=R_MIN_FACTOR):
    """
    The magnitude of the force exerted on filter ``n`` by the source.

    Parameters
    ----------
    q_source, q_n : `FilterCharge`
       The charges of the source filter and of filter ``n``.
    n, source_index : int
       Filter indices; the source exerts no force on itself.
    k_e : float
       The proportionality constant, which must be positive.
    r_min_factor : float
       Scale of the distance clamp, see `minimum_distance`.
    """
    if k_e <= 0:
        raise ValueError(f"k_e must be positive, got {k_e}.")
    if n == source_index or q_n.sign == 0:
        return 0.0
    r = max(distance(q_source.charge, q_n.charge),
            minimum_distance(q_source.charge, r_min_factor))
    return k_e * abs(q_source.charge) * abs(q_n.charge) / r ** 2


def layer_charges(weights):
    """
    Signs, magnitudes and charges of every filter of a ``[N, C, k, k]`` weight tensor.
    """
    axes = tuple(range(1, weights.ndim))
    magnitudes = np.abs(weights).sum(axis=axes, dtype=np.float64)
    signs = np.sign(np.sign(weights).sum(axis=axes)).astype(np.int64)
    return signs, magnitudes, signs * magnitudes


@dataclass
class LayerForceField:
    """
    The field of one layer at the moment it was computed.

    Parameters
    ----------
    layer : str
       The layer name.
    signs, magnitudes, charges : `numpy.ndarray`
       Per-filter charge components.
    source_index : int
    distances, forces : `numpy.ndarray`
       Per-filter distance to the source and force magnitude.
    k_e : float
    r_min : float
       The distance clamp in force for this field.
    timestamp : int, optional
       The optimisation step or epoch at which the field was computed.
    """

    layer: str
    signs: np.ndarray
    magnitudes: np.ndarray
    charges: np.ndarray
    source_index: int
    distances: np.ndarray
    forces: np.ndarray
    k_e: float
    r_min: float
    timestamp: int = None

    @property
    def source_charge(self):
        return float(self.charges[self.source_index])

    @property
    def active(self):
        """Filters which feel a force: charged and not the source."""
        mask = self.signs != 0
        mask[self.source_index] = False
        return mask

    def total(self):
        return float(self.forces.sum())

    def filter_charges(self):
        return [FilterCharge(int(s), float(m)) for s, m in zip(self.signs, self.magnitudes)]


def layer_force_field(layer, k_e=COULOMB_CONSTANT, r_min_factor=R_MIN_FACTOR, timestamp=None):
    """
    Compute charges, the source filter, distances and forces for a layer.

    Parameters
    ----------
    layer : `electroprune.layers.Conv2d`
       A prunable convolution.
    k_e : float, optional
    r_min_factor : float, optional
    timestamp : int, optional
       Recorded on the returned field.

    Returns
    -------
    `LayerForceField`
    """
    if not getattr(layer, "prunable", False):
        raise ValueError(f"{layer.name} is not a prunable layer.")
    if k_e <= 0:
        raise ValueError(f"k_e must be positive, got {k_e}.")
    signs, magnitudes, charges = layer_charges(layer.weight)
    source = int(np.argmax(magnitudes))
    q1 = charges[source]
    r_min = minimum_distance(q1, r_min_factor)
    distances = np.abs(q1 - charges)
    field = LayerForceField(
        layer=layer.name, signs=signs, magnitudes=magnitudes, charges=charges,
        source_index=source, distances=distances, forces=np.zeros_like(magnitudes),
        k_e=k_e, r_min=r_min, timestamp=timestamp,
    )
    active = field.active
    clamped = np.maximum(distances[active], r_min)
    field.forces[active] = k_e * abs(q1) * np.abs(charges[active]) / clamped ** 2
    if magnitudes[source] == 0:
        logger.warning(f"{layer.name} has only zero filters; its field is empty")
    return field


def force_fields(model, k_e=COULOMB_CONSTANT, r_min_factor=R_MIN_FACTOR, timestamp=None):
    """The `LayerForceField` of every prunable layer, keyed by layer name."""
    return {
        layer.name: layer_force_field(layer, k_e, r_min_factor, timestamp)
        for layer in model.prunable_layers()
    }


def penalty(model, k_e=COULOMB_CONSTANT, r_min_factor=R_MIN_FACTOR, fields=None):
    """
    The sum of force magnitudes over every prunable layer and filter.
    """
    if not model.prunable_layers():
        raise ValueError("The model has no prunable layers to regularise.")
    if fields is None:
        fields = force_fields(model, k_e, r_min_factor)
    return float(sum(field.total() for field in fields.values()))


def penalty_gradient(layer, field, alpha_e, k_e=COULOMB_CONSTANT):
    """
    The gradient of the weighted penalty with respect to a layer's weights.

    For filter ``n`` this is ``alpha_e k_e |q_1| / max(r_n, r_min)^2 sign(w)``
    elementwise, with ``|q_1|``, ``r_n`` and the filter signs held fixed at
    their values in ``field``. The source and neutral filters get zero.
    """
    if field.layer != layer.name:
        raise ValueError(f"The field for {field.layer} does not belong to {layer.name}.")
    coefficients = np.zeros(field.forces.shape, dtype=np.float64)
    active = field.active
    clamped = np.maximum(field.distances[active], field.r_min)
    coefficients[active] = alpha_e * k_e * abs(field.source_charge) / clamped ** 2
    coefficients = coefficients.astype(layer.weight.dtype)
    return coefficients[:, None, None, None] * np.sign(layer.weight)


def penalty_gradients(model, fields, alpha_e, k_e=COULOMB_CONSTANT):
    """`penalty_gradient` for every field, keyed by parameter name."""
    layers = model.named_layers()
    return {
        f"{name}.weight": penalty_gradient(layers[name], field, alpha_e, k_e)
        for name, field in fields.items()
    }


TABLE_COLUMNS = ("layer", "filter_index", "l1", "normalized_l1", "sign", "charge",
                 "distance", "force", "is_source")


def filter_table(model, k_e=COULOMB_CONSTANT, r_min_factor=R_MIN_FACTOR):
    """
    One row per filter of every prunable layer, with the columns of `TABLE_COLUMNS`.
    """
    rows = []
    for name, field in force_fields(model, k_e, r_min_factor).items():
        largest = field.magnitudes.max()
        for index in range(len(field.magnitudes)):
            rows.append({
                "layer": name,
                "filter_index": index,
                "l1": float(field.magnitudes[index]),
                "normalized_l1": float(field.magnitudes[index] / largest) if largest else 0.0,
                "sign": int(field.signs[index]),
                "charge": float(field.charges[index]),
                "distance": float(field.distances[index]),
                "force": float(field.forces[index]),
                "is_source": int(index == field.source_index),
            })
    return rows


def penalty_from_table(rows):
    """Recompute the penalty from rows produced by `filter_table`."""
    return float(sum(float(row["force"]) for row in rows))
