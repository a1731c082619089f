"""Published simulation numbers, bundled as static reference data.

These are used only for the "diff" column of rendered tables; they are never
asserted bit-exactly.  Coverage values are percentages, lengths are raw
interval lengths, rejection rates are proportions.
"""
from __future__ import annotations

LEVELS = (90, 95, 99)

# Coverage (%) of the proposed method, keyed by (n, p, r) then level; ten coordinates.
TABLE1 = {
    (50, 100, 100): {
        90: (90.3, 88.5, 89.6, 88.9, 90.1, 90.0, 88.8, 90.6, 87.5, 89.4),
        95: (94.5, 93.8, 94.1, 93.8, 94.5, 95.0, 94.1, 94.9, 94.4, 94.2),
        99: (98.7, 98.8, 98.4, 98.0, 98.8, 98.8, 97.9, 98.6, 98.9, 98.2),
    },
    (100, 500, 500): {
        90: (88.3, 88.7, 89.3, 89.0, 88.9, 89.7, 88.2, 88.1, 89.2, 89.0),
        95: (93.2, 94.1, 94.1, 93.8, 93.9, 93.5, 94.3, 93.4, 94.5, 94.2),
        99: (98.2, 98.4, 98.3, 98.8, 98.4, 98.7, 98.9, 98.0, 98.9, 98.4),
    },
}

# Mean length of 95% intervals at (50, 100, 100); ten coordinates.
TABLE2 = {(50, 100, 100): (0.815, 0.769, 0.771, 0.781, 0.758, 0.749, 0.770, 0.760, 0.789, 0.782)}

# Coverage (%) in the repeated-measurements design; five coordinates.
TABLE3 = {
    (50, 100, 200): {
        90: (87.3, 88.3, 89.6, 89.9, 88.9),
        95: (93.4, 93.6, 94.9, 94.5, 93.8),
        99: (97.5, 98.0, 98.8, 98.4, 98.2),
    },
    (100, 200, 400): {
        90: (89.3, 89.1, 92.5, 92.5, 88.9),
        95: (93.8, 94.5, 96.4, 96.2, 94.8),
        99: (98.0, 98.9, 99.2, 98.9, 98.6),
    },
}

# Mean 95% lengths at (50, 100, 200): one versus two estimating equations.
TABLE4 = {
    (50, 100, 200): {
        "one": (0.325, 0.329, 0.323, 0.322, 0.323),
        "two": (0.289, 0.293, 0.285, 0.288, 0.285),
    }
}

# Rejection rates at alpha = 0.05 keyed by (case, a, n, p) -> (J = R_n, J = all).
TABLE5 = {
    (1, 1.0, 50, 1): (0.056, 0.056),
    (1, 1.0, 50, 10): (0.061, 0.061),
    (1, 1.0, 50, 50): (0.061, 0.002),
    (1, 1.0, 50, 100): (0.058, 0.002),
    (1, 1.0, 100, 100): (0.047, 0.002),
    (2, 0.7, 50, 1): (0.492, 0.492),
    (2, 0.7, 50, 10): (0.521, 0.521),
    (2, 0.7, 50, 50): (0.580, 0.082),
    (2, 0.7, 50, 100): (0.601, 0.054),
    (2, 0.7, 100, 100): (0.738, 0.286),
    (2, 0.5, 50, 1): (0.915, 0.915),
    (2, 0.5, 50, 10): (0.911, 0.911),
    (2, 0.5, 50, 50): (0.883, 0.143),
    (2, 0.5, 50, 100): (0.890, 0.257),
    (2, 0.5, 100, 100): (0.994, 0.381),
    (2, 0.3, 50, 1): (1.000, 1.000),
    (2, 0.3, 50, 10): (1.000, 1.000),
    (2, 0.3, 50, 50): (0.998, 0.167),
    (2, 0.3, 50, 100): (1.000, 0.743),
    (2, 0.3, 100, 100): (1.000, 0.294),
}

TABLES = {1: TABLE1, 2: TABLE2, 3: TABLE3, 4: TABLE4, 5: TABLE5}
