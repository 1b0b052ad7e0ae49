"""varleak: information-bottleneck representation training with adversarial
prior matching, an attribute-inference attack harness, and mutual-information
estimators validated against exact oracles."""

__version__ = "0.1.0"
