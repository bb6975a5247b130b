"""Published reference results used as fixtures and as reference rows in reports.

These are the numbers reported for the six networks trained on the full
multi-dataset corpus. They are not reproduction targets; the toolkit only
recomputes what is derivable from them (means, F1, relative improvements).
"""

from __future__ import annotations

from types import MappingProxyType

from .core import Architecture

A = Architecture

# Column order used by the reference tables.
TABLE_ORDER = (A.RAGNET, A.PSPNET, A.SEGNET, A.UNET, A.FCN8, A.FCN32)
SHORT_NAMES = MappingProxyType({
    A.RAGNET: "RN", A.PSPNET: "PN", A.SEGNET: "SN", A.UNET: "UN", A.FCN8: "F-8", A.FCN32: "F-32",
})
CLASS_COLUMNS = ("IRF", "SRF", "CA", "HE", "drusen")

# Pixel-level micro recall (tpr), precision (ppv) and F-score.
PIXEL_SCORES = MappingProxyType({
    A.RAGNET: dict(tpr=0.8547, ppv=0.8606, f1=0.8576),
    A.PSPNET: dict(tpr=0.7540, ppv=0.9200, f1=0.8287),
    A.SEGNET: dict(tpr=0.6388, ppv=0.9342, f1=0.7587),
    A.UNET: dict(tpr=0.7736, ppv=0.8842, f1=0.8252),
    A.FCN8: dict(tpr=0.6238, ppv=0.6165, f1=0.6201),
    A.FCN32: dict(tpr=0.4755, ppv=0.5611, f1=0.5147),
})


def _row(values):
    return dict(zip(CLASS_COLUMNS, values))


DICE = MappingProxyType({
    A.RAGNET: _row((0.846, 0.850, 0.941, 0.633, 0.840)),
    A.SEGNET: _row((0.810, 0.610, 0.886, 0.373, 0.695)),
    A.PSPNET: _row((0.843, 0.809, 0.944, 0.594, 0.735)),
    A.UNET: _row((0.816, 0.757, 0.878, 0.581, 0.864)),
    A.FCN8: _row((0.681, 0.568, 0.761, 0.124, 0.410)),
    A.FCN32: _row((0.651, 0.434, 0.638, 0.032, 0.243)),
})
DICE_MEANS = MappingProxyType({A.RAGNET: 0.822, A.SEGNET: 0.675, A.PSPNET: 0.785, A.UNET: 0.779,
                               A.FCN8: 0.509, A.FCN32: 0.400})

IOU = MappingProxyType({
    A.RAGNET: _row((0.733, 0.739, 0.890, 0.464, 0.725)),
    A.SEGNET: _row((0.681, 0.439, 0.796, 0.229, 0.533)),
    A.PSPNET: _row((0.728, 0.680, 0.895, 0.423, 0.581)),
    A.UNET: _row((0.689, 0.609, 0.783, 0.409, 0.761)),
    A.FCN8: _row((0.517, 0.397, 0.615, 0.066, 0.257)),
    A.FCN32: _row((0.482, 0.277, 0.468, 0.016, 0.138)),
})
IOU_MEANS = MappingProxyType({A.RAGNET: 0.710, A.SEGNET: 0.535, A.PSPNET: 0.661, A.UNET: 0.650,
                              A.FCN8: 0.370, A.FCN32: 0.276})

# Transfer mean IoU, rows are (train group, test group).
TRANSFER = MappingProxyType({
    ("R", "D"): (0.624, 0.589, 0.414, 0.574, 0.281, 0.170),
    ("D", "R"): (0.649, 0.601, 0.426, 0.612, 0.301, 0.194),
    ("R", "Z"): (0.657, 0.615, 0.468, 0.604, 0.322, 0.225),
    ("Z", "R"): (0.663, 0.632, 0.472, 0.629, 0.329, 0.245),
    ("B", "R"): (0.573, 0.542, 0.389, 0.534, 0.236, 0.144),
    ("R", "B"): (0.554, 0.535, 0.374, 0.521, 0.213, 0.115),
    ("Z", "D"): (0.809, 0.752, 0.613, 0.734, 0.476, 0.342),
    ("D", "Z"): (0.794, 0.741, 0.598, 0.721, 0.445, 0.335),
    ("D", "B"): (0.582, 0.534, 0.487, 0.525, 0.229, 0.136),
    ("B", "D"): (0.571, 0.529, 0.479, 0.517, 0.214, 0.127),
    ("B", "Z"): (0.564, 0.513, 0.465, 0.524, 0.221, 0.152),
    ("Z", "B"): (0.552, 0.507, 0.457, 0.512, 0.235, 0.178),
})
# Rows where the second-best mark falls on UNet; PSPNet elsewhere.
TRANSFER_SECOND_UNET = frozenset({("D", "R"), ("B", "Z"), ("Z", "B")})

# True-negative rate on the healthy-only fundus set.
TN_RATES = MappingProxyType({A.RAGNET: 0.9999, A.FCN32: 0.9379})

# Relative-improvement claims: (a, b, stated percentage), (a - b) / a.
IMPROVEMENT_CLAIMS = (
    ("RAGNet tpr over UNet", 0.8547, 0.7736, 9.48),
    ("RAGNet f1 over PSPNet", 0.8576, 0.8287, 3.36),
    ("SegNet ppv over PSPNet", 0.9342, 0.9200, 1.52),
    ("RAGNet mean dice over PSPNet", 0.822, 0.785, 4.5),
    ("RAGNet mean dice over FCN-32", 0.822, 0.400, 51.33),
    ("RAGNet mean IoU over PSPNet", 0.710, 0.661, 6.9),
)


def transfer_row(pair) -> dict:
    return dict(zip(TABLE_ORDER, TRANSFER[tuple(pair)]))
