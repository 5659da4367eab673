"""Cloud-assisted continual adaptation of a small on-device classifier.

A lightweight device model predicts on a drifting input stream, scores its
own uncertainty with MC dropout, and ships only the uncertain samples to a
cloud trainer.  The cloud adapts a larger teacher adversarially, distills
it into a student copy of the device model, maintains a learned additive
input prompt, and periodically syncs parameters back down.  Every byte on
the simulated link is accounted for.
"""

__version__ = "0.1.0"
