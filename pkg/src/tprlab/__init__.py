"""Learning generic temporal path representations over road networks.

A temporal path is a road-network path plus a departure time. The package
trains an LSTM encoder of such paths with weakly-supervised contrastive
learning (peak/off-peak or congestion-index labels) under an easiest-first
curriculum, then evaluates the representations on travel-time estimation,
path ranking, and path recommendation over synthetic traffic data.
"""

__version__ = "0.1.0"
