"""FogMQ clone brokering: Flock migration engine, oracles and a loopback broker."""
__version__ = "0.1.0"
