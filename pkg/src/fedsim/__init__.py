"""Federated graph learning simulator.

Single-process simulation of personalized federated training for social bot
detection on graphs.  Clients run an adaptive message-passing backbone with
a three-stage adversarial distillation schedule; the server maintains a
data-free generator, neuron-level aggregation masks, and a DDQN agent that
assigns per-client update momenta.  FedAvg and FedProx baselines share the
same data pipeline and evaluation path.
"""

__version__ = "0.1.0"
