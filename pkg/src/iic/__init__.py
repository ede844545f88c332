"""Inter-intra contrastive learning of video representations, in numpy.

Two views of each clip (RGB frames and their frame differences) are pulled
together against negatives drawn from memory banks; temporally broken copies
of the clip (a repeated frame, shuffled sub-clips) serve as extra negatives.
"""

__version__ = "0.1.0"
