"""Composite flows built from the core modules: forwarding, Nagios bridge, supervision, broker simulator."""
