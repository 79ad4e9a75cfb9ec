"""Bjontegaard-delta calculations between rate-distortion curves, including
the documented degenerate outcomes."""

from diffcodec import metrics

pts = [(0.10, 30.0), (0.20, 33.0), (0.40, 36.0), (0.80, 39.0)]
anchor = metrics.RdCurve([metrics.RdPoint(r, q) for r, q in pts])

# A codec that needs 25% less rate at every quality level.
better = metrics.RdCurve([metrics.RdPoint(0.75 * r, q) for r, q in pts])
print("25% cheaper curve:   BD-rate", metrics.bd_rate(anchor, better))

# Doubling the rate at every point is +100% by construction.
doubled = metrics.RdCurve([metrics.RdPoint(2 * r, q) for r, q in pts])
print("doubled-rate curve:  BD-rate", metrics.bd_rate(anchor, doubled))

# Disjoint quality ranges cannot be compared.
shifted = metrics.RdCurve([metrics.RdPoint(r, q + 50) for r, q in pts])
print("disjoint qualities:  BD-rate", metrics.bd_rate(anchor, shifted))

# Non-monotone curves get the documented '--' marker.
wobble = metrics.RdCurve([metrics.RdPoint(r, q) for (r, _), q in
                          zip(pts, (30.0, 29.0, 36.0, 39.0))])
print("non-monotone curve:  BD-rate", metrics.bd_rate(anchor, wobble))

# BD-metric: average quality gain at equal rate.
print("doubled-rate curve:  BD-metric", metrics.bd_metric(anchor, doubled))
