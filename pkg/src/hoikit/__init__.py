"""Hand-object interaction toolkit: contact maps, plausibility metrics,
test-time pose refinement over a skinned capsule hand, and frame-pair
selection for object-only / interaction video frames."""

__version__ = "0.1.0"
